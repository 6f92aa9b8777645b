//! Pluggable feature pyramids for the perceptual loss and distance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use retouch_tensor::{Element, ParamStore, Tape, Var};

use crate::error::{Error, Result};
use crate::layers::{init_params, lrelu, EqualConv, ParamSpec};

/// Maps an image batch `(N, 3, H, W)` to a list of feature maps.
pub trait FeatureExtractor<T: Element>: Send + Sync {
    fn name(&self) -> &str;

    fn features<'t>(&self, tape: &'t Tape<T>, images: Var<'t, T>) -> Result<Vec<Var<'t, T>>>;
}

/// `Σ_levels mean((φ(a) − φ(b))²)`.
pub fn feature_mse<'t, T: Element>(
    extractor: &dyn FeatureExtractor<T>,
    tape: &'t Tape<T>,
    a: Var<'t, T>,
    b: Var<'t, T>,
) -> Result<Var<'t, T>> {
    if a.shape() != b.shape() {
        return Err(Error::contract("perceptual inputs", a.shape(), b.shape()));
    }
    let fa = extractor.features(tape, a).map_err(|e| Error::Extractor(format!("{}: {e}", extractor.name())))?;
    let fb = extractor.features(tape, b).map_err(|e| Error::Extractor(format!("{}: {e}", extractor.name())))?;
    if fa.len() != fb.len() || fa.is_empty() {
        return Err(Error::Extractor(format!("{} returned mismatched feature lists", extractor.name())));
    }
    let mut total: Option<Var<'t, T>> = None;
    for (x, y) in fa.into_iter().zip(fb) {
        let term = x.sub(y).sqr().mean_all();
        total = Some(match total {
            None => term,
            Some(t) => t.add(term),
        });
    }
    Ok(total.expect("non-empty"))
}

/// Fixed, seeded, untrained multi-scale conv pyramid. Each stage is a 3x3
/// conv with a leaky rectifier, stages separated by 2x average pooling; the
/// output of every stage is a feature level.
#[derive(Clone, Debug)]
pub struct ConvPyramid {
    convs: Vec<EqualConv>,
    weights: ParamStore<f64>,
}

impl ConvPyramid {
    pub const DEFAULT_SEED: u64 = 0x5EE_D0F_1EE7;

    pub fn new(widths: &[usize], seed: u64) -> Self {
        let mut convs = Vec::new();
        let mut c_in = 3;
        for (k, &w) in widths.iter().enumerate() {
            let mut conv = EqualConv::new(format!("stage{k}"), c_in, w, 3);
            conv.bias = false;
            convs.push(conv);
            c_in = w;
        }
        let mut specs: Vec<ParamSpec> = Vec::new();
        for c in &convs {
            c.specs(&mut specs);
        }
        let weights = init_params(&specs, &mut ChaCha8Rng::seed_from_u64(seed));
        Self { convs, weights }
    }
}

impl Default for ConvPyramid {
    fn default() -> Self {
        Self::new(&[16, 32, 32], Self::DEFAULT_SEED)
    }
}

impl<T: Element> FeatureExtractor<T> for ConvPyramid {
    fn name(&self) -> &str {
        "conv-pyramid"
    }

    fn features<'t>(&self, tape: &'t Tape<T>, images: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::contract("extractor input", "(N, 3, H, W)", &shape));
        }
        let min_side = 1 << (self.convs.len() - 1);
        if shape[2] % min_side != 0 || shape[3] % min_side != 0 {
            return Err(Error::contract("extractor input side", format!("multiple of {min_side}"), &shape[2..]));
        }
        let store: ParamStore<T> = self.weights.cast();
        let mut x = images;
        let mut out = Vec::with_capacity(self.convs.len());
        for (k, conv) in self.convs.iter().enumerate() {
            if k > 0 {
                x = x.avg_pool2x();
            }
            x = lrelu(conv.forward(tape, &store, x));
            out.push(x);
        }
        Ok(out)
    }
}
