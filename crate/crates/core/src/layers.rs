//! Parameter declarations and the building blocks shared by the generator,
//! encoder, fusion units and discriminator.
//!
//! Weights use the equalized learning-rate convention: they are stored with
//! unit variance and scaled by `1/sqrt(fan_in)` at run time.

use rand::Rng;
use retouch_tensor::{Array, Element, ParamStore, Tape, Var};

use crate::error::{Error, Result};

/// Slope of every leaky rectifier in the model.
pub const LRELU_SLOPE: f64 = 0.2;
/// Variance-preserving gain applied after the leaky rectifier.
pub const LRELU_GAIN: f64 = std::f64::consts::SQRT_2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal(f64),
    Constant(f64),
}

/// Name, shape and initializer of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self { name: name.into(), shape: shape.to_vec(), init }
    }
}

pub fn init_params<T: Element, R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> ParamStore<T> {
    let mut store = ParamStore::new();
    for spec in specs {
        let value = match spec.init {
            Init::Normal(std) => Array::randn(&spec.shape, std, rng),
            Init::Constant(c) => Array::full(&spec.shape, T::from_f64_lossy(c)),
        };
        store.insert(spec.name.clone(), value);
    }
    store
}

/// Checks that `store` holds exactly the declared tensors with the declared
/// shapes, reporting every discrepancy at once.
pub fn validate_params<T: Element>(specs: &[ParamSpec], store: &ParamStore<T>) -> Result<()> {
    let mut problems = Vec::new();
    for spec in specs {
        match store.get(&spec.name) {
            None => problems.push(format!("missing tensor `{}` {:?}", spec.name, spec.shape)),
            Some(a) if a.shape() != spec.shape.as_slice() => problems.push(format!(
                "tensor `{}` has shape {:?}, expected {:?}",
                spec.name,
                a.shape(),
                spec.shape
            )),
            Some(a) if !a.all_finite() => problems.push(format!("tensor `{}` has non-finite entries", spec.name)),
            Some(_) => {}
        }
    }
    for name in store.names() {
        if !specs.iter().any(|s| s.name == name) {
            problems.push(format!("unexpected tensor `{name}`"));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Checkpoint(problems))
    }
}

pub(crate) fn lrelu<'t, T: Element>(x: Var<'t, T>) -> Var<'t, T> {
    x.leaky_relu(LRELU_SLOPE, LRELU_GAIN)
}

/// Plain convolution with equalized learning rate and optional bias.
#[derive(Clone, Debug)]
pub struct EqualConv {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub bias: bool,
}

impl EqualConv {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self { name: name.into(), in_ch, out_ch, kernel, stride: 1, bias: true }
    }

    pub fn strided(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        out.push(ParamSpec::new(
            format!("{}.weight", self.name),
            &[self.out_ch, self.in_ch, self.kernel, self.kernel],
            Init::Normal(1.0),
        ));
        if self.bias {
            out.push(ParamSpec::new(format!("{}.bias", self.name), &[self.out_ch], Init::Constant(0.0)));
        }
    }

    pub fn forward<'t, T: Element>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, x: Var<'t, T>) -> Var<'t, T> {
        let scale = 1.0 / ((self.in_ch * self.kernel * self.kernel) as f64).sqrt();
        let w = tape.param(store, &format!("{}.weight", self.name)).mul_scalar(scale);
        let y = x.conv2d(w, self.stride, self.kernel / 2);
        if self.bias {
            let b = tape.param(store, &format!("{}.bias", self.name)).reshape(&[1, self.out_ch, 1, 1]);
            y.add(b)
        } else {
            y
        }
    }
}

/// Fully connected layer `y = x Wᵀ + b` with `W` stored as `(out, in)`.
#[derive(Clone, Debug)]
pub struct EqualLinear {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
    pub bias_init: f64,
}

impl EqualLinear {
    pub fn new(name: impl Into<String>, in_features: usize, out_features: usize) -> Self {
        Self { name: name.into(), in_features, out_features, bias_init: 0.0 }
    }

    pub fn with_bias_init(mut self, value: f64) -> Self {
        self.bias_init = value;
        self
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        out.push(ParamSpec::new(
            format!("{}.weight", self.name),
            &[self.out_features, self.in_features],
            Init::Normal(1.0),
        ));
        out.push(ParamSpec::new(
            format!("{}.bias", self.name),
            &[self.out_features],
            Init::Constant(self.bias_init),
        ));
    }

    pub fn forward<'t, T: Element>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, x: Var<'t, T>) -> Var<'t, T> {
        let scale = 1.0 / (self.in_features as f64).sqrt();
        let w = tape.param(store, &format!("{}.weight", self.name)).mul_scalar(scale);
        let b = tape.param(store, &format!("{}.bias", self.name)).reshape(&[1, self.out_features]);
        x.matmul_t(w).add(b)
    }
}

/// Style-modulated convolution with optional weight demodulation.
///
/// Computed in the per-sample-scaling form: scale input channels by the
/// style, convolve with the shared weight, then rescale output channels by
/// the demodulation factor. This equals convolving with the per-sample
/// weight `w[o,i,..] * s[i] * d[o]`.
#[derive(Clone, Debug)]
pub struct ModulatedConv {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub style_dim: usize,
    pub demodulate: bool,
    pub upsample: bool,
}

pub const DEMOD_EPS: f64 = 1e-8;

impl ModulatedConv {
    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        out.push(ParamSpec::new(
            format!("{}.weight", self.name),
            &[self.out_ch, self.in_ch, self.kernel, self.kernel],
            Init::Normal(1.0),
        ));
        EqualLinear::new(format!("{}.modulation", self.name), self.style_dim, self.in_ch)
            .with_bias_init(1.0)
            .specs(out);
    }

    /// Per-sample style vector `(N, in_ch)` from a latent slice `(N, style_dim)`.
    pub fn style<'t, T: Element>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, latent: Var<'t, T>) -> Var<'t, T> {
        EqualLinear::new(format!("{}.modulation", self.name), self.style_dim, self.in_ch).forward(tape, store, latent)
    }

    /// Convolution given an already computed style `(N, in_ch)`.
    pub fn forward_styled<'t, T: Element>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Var<'t, T>,
        style: Var<'t, T>,
    ) -> Var<'t, T> {
        let n = style.shape()[0];
        let scale = 1.0 / ((self.in_ch * self.kernel * self.kernel) as f64).sqrt();
        let w = tape.param(store, &format!("{}.weight", self.name)).mul_scalar(scale);
        let mut h = x.mul(style.reshape(&[n, self.in_ch, 1, 1]));
        if self.upsample {
            h = h.upsample2x();
        }
        let y = h.conv2d(w, 1, self.kernel / 2);
        if !self.demodulate {
            return y;
        }
        let w_energy = w.sqr().sum_axes(&[2, 3]).reshape(&[self.out_ch, self.in_ch]);
        let demod = style.sqr().matmul_t(w_energy).add_scalar(DEMOD_EPS).rsqrt();
        y.mul(demod.reshape(&[n, self.out_ch, 1, 1]))
    }

    pub fn forward<'t, T: Element>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Var<'t, T>,
        latent: Var<'t, T>,
    ) -> Var<'t, T> {
        let style = self.style(tape, store, latent);
        self.forward_styled(tape, store, x, style)
    }
}
