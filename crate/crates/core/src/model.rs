//! End-to-end retoucher: encoder → latent head → fusion units → backbone.
//!
//! For `i = L-1 .. 1` the fusion unit at level `i` combines `F^i_S` with the
//! backbone features `F^(i+1)_I`, and the blended map feeds backbone unit
//! `i`. Level 1's unit emits the image.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use retouch_tensor::{Array, Element, ParamStore, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::bafs::{BafsUnit, BlendMode, StrengthSpec};
use crate::encoder::{EncoderConfig, SemanticEncoder};
use crate::error::{expect_shape, Error, Result};
use crate::gp::{GanPrior, GpConfig, RGB_CHANNELS};
use crate::layers::{init_params, validate_params, ParamSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub gp: GpConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub blend_mode: BlendMode,
    #[serde(default)]
    pub skip_levels: BTreeSet<usize>,
    #[serde(default)]
    pub strength: StrengthSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            gp: GpConfig::default(),
            encoder: EncoderConfig::default(),
            blend_mode: BlendMode::default(),
            skip_levels: BTreeSet::new(),
            strength: StrengthSpec::default(),
        }
    }
}

impl ModelConfig {
    /// Small configuration used by the toy experiments: 32x32 images.
    pub fn toy() -> Self {
        Self {
            gp: GpConfig { levels: 4, latent_dim: 64, channel_base: 16, channel_max: 64, ..GpConfig::default() },
            encoder: EncoderConfig { channel_base: 16, channel_max: 64 },
            ..Self::default()
        }
    }

    pub fn resolution(&self) -> usize {
        self.gp.output_resolution()
    }

    pub fn validate(&self) -> Result<()> {
        self.gp.validate()?;
        self.encoder.validate()?;
        StrengthSpec::new(self.strength.factor)?;
        let l = self.gp.levels;
        if self.skip_levels.contains(&l) {
            return Err(Error::Config(format!("level {l} holds the constant input and cannot be skipped")));
        }
        if let Some(&bad) = self.skip_levels.iter().find(|&&s| s == 0 || s > l) {
            return Err(Error::Config(format!("skip level {bad} outside [1, {l}]")));
        }
        Ok(())
    }
}

/// Everything recorded on the tape by one forward pass.
pub struct ForwardPass<'t, T: Element> {
    /// Un-clamped output `(N, 3, R, R)`.
    pub image: Var<'t, T>,
    /// `(N, S*d)`.
    pub latent: Var<'t, T>,
    pub spatial_masks: BTreeMap<usize, Var<'t, T>>,
    pub channel_masks: BTreeMap<usize, Var<'t, T>>,
    pub blends: BTreeMap<usize, Var<'t, T>>,
}

/// Inspectable intermediates of a retouch call.
#[derive(Clone, Debug, PartialEq)]
pub struct RetouchDiagnostics<T> {
    /// `(N, S, d)`.
    pub latent: Array<T>,
    /// `M^i_S`, `(N, 1, H_i, W_i)`, for every level with a spatial branch.
    pub spatial_masks: BTreeMap<usize, Array<T>>,
    /// `M^i_C`, `(N, C_i, 1, 1)`, for every level with a channel branch.
    pub channel_masks: BTreeMap<usize, Array<T>>,
    pub blends: Option<BTreeMap<usize, Array<T>>>,
}

#[derive(Clone, Debug)]
pub struct Retoucher<T: Element> {
    config: ModelConfig,
    gp: GanPrior,
    encoder: SemanticEncoder,
    bafs: Vec<BafsUnit>,
    params: ParamStore<T>,
}

struct Layout {
    gp: GanPrior,
    encoder: SemanticEncoder,
    bafs: Vec<BafsUnit>,
}

fn layout(config: &ModelConfig) -> Result<Layout> {
    config.validate()?;
    let gp = GanPrior::with_skips(config.gp.clone(), config.skip_levels.clone())?;
    let encoder = SemanticEncoder::new(&config.encoder, &config.gp)?;
    let bafs = (1..config.gp.levels)
        .map(|i| BafsUnit::new(i, config.gp.channels(i + 1), config.blend_mode))
        .collect();
    Ok(Layout { gp, encoder, bafs })
}

fn all_specs(l: &Layout) -> Vec<ParamSpec> {
    let mut specs = l.gp.specs();
    specs.extend(l.encoder.specs());
    for b in &l.bafs {
        specs.extend(b.specs());
    }
    specs
}

impl<T: Element> Retoucher<T> {
    /// Fresh model with seeded random weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let l = layout(&config)?;
        let params = init_params(&all_specs(&l), &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self { config, gp: l.gp, encoder: l.encoder, bafs: l.bafs, params })
    }

    /// Model around an existing parameter set, which must match the
    /// configuration exactly.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let l = layout(&config)?;
        validate_params(&all_specs(&l), &params)?;
        Ok(Self { config, gp: l.gp, encoder: l.encoder, bafs: l.bafs, params })
    }

    /// Parameter specs implied by `config`.
    pub fn specs_for(config: &ModelConfig) -> Result<Vec<ParamSpec>> {
        Ok(all_specs(&layout(config)?))
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.gp.specs();
        specs.extend(self.encoder.specs());
        for b in &self.bafs {
            specs.extend(b.specs());
        }
        specs
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn gp(&self) -> &GanPrior {
        &self.gp
    }

    pub fn encoder(&self) -> &SemanticEncoder {
        &self.encoder
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution()
    }

    /// Same weights in another precision.
    pub fn cast<U: Element>(&self) -> Retoucher<U> {
        Retoucher {
            config: self.config.clone(),
            gp: self.gp.clone(),
            encoder: self.encoder.clone(),
            bafs: self.bafs.clone(),
            params: self.params.cast(),
        }
    }

    /// A variant with another blend mode and skip set. Tensors shared with
    /// this model are copied; the rest are freshly initialized from `seed`.
    pub fn variant(&self, blend_mode: BlendMode, skip_levels: BTreeSet<usize>, seed: u64) -> Result<Self> {
        let config = ModelConfig { blend_mode, skip_levels, ..self.config.clone() };
        let mut fresh = Self::new(config, seed)?;
        let names: Vec<String> = fresh.params.names().map(str::to_string).collect();
        for name in names {
            if let Some(a) = self.params.get(&name) {
                if a.shape() == fresh.params.get(&name).map(|f| f.shape()).unwrap_or_default() {
                    fresh.params.insert(name, a.clone());
                }
            }
        }
        Ok(fresh)
    }

    /// Records a forward pass on `tape` using `store` for the weights.
    ///
    /// `strength` of `None` is the plain forward; `Some(s)` applies `s` to
    /// the channel weights at levels `2..=L-1`.
    pub fn forward_with<'t>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        image: Var<'t, T>,
        strength: Option<f64>,
    ) -> Result<ForwardPass<'t, T>> {
        let l = self.config.gp.levels;
        let spec = match strength {
            Some(s) => Some(StrengthSpec::new(s)?),
            None => None,
        };
        let enc = self.encoder.forward(tape, store, image)?;
        let latent = self.encoder.latent_head(tape, store, enc.top())?;
        let n = image.shape()[0];
        let (a, b) = self.config.gp.slices_for(l);
        let top = self.gp.unit_forward(
            tape,
            store,
            l,
            self.gp.constant_input(tape, store, n),
            self.gp.latent_slice(latent, a),
            self.gp.latent_slice(latent, b),
            None,
        )?;
        let mut prior = top.features;
        let mut rgb = top.rgb;
        let mut spatial_masks = BTreeMap::new();
        let mut channel_masks = BTreeMap::new();
        let mut blends = BTreeMap::new();
        for level in (1..l).rev() {
            let s = spec.filter(|sp| sp.applies_to(level, l)).map(|sp| sp.factor);
            let fused = self.bafs[level - 1].forward(tape, store, enc.semantic_map(level), prior, s)?;
            if let Some(m) = fused.spatial_mask {
                spatial_masks.insert(level, m);
            }
            if let Some(m) = fused.channel_mask {
                channel_masks.insert(level, m);
            }
            blends.insert(level, fused.blend);
            let out = if self.config.skip_levels.contains(&level) {
                self.gp.bridge_forward(tape, store, level, fused.blend, Some(rgb))?
            } else {
                let (a, b) = self.config.gp.slices_for(level);
                self.gp.unit_forward(
                    tape,
                    store,
                    level,
                    fused.blend,
                    self.gp.latent_slice(latent, a),
                    self.gp.latent_slice(latent, b),
                    Some(rgb),
                )?
            };
            prior = out.features;
            rgb = out.rgb;
        }
        Ok(ForwardPass { image: rgb, latent, spatial_masks, channel_masks, blends })
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, image: Var<'t, T>, strength: Option<f64>) -> Result<ForwardPass<'t, T>> {
        self.forward_with(tape, &self.params, image, strength)
    }

    fn check_input(&self, images: &Array<T>) -> Result<()> {
        let shape = images.shape();
        let r = self.resolution();
        if shape.len() != 4 {
            return Err(Error::contract("retouch input", "rank-4 NCHW batch", shape));
        }
        expect_shape("retouch input", &[shape[0], RGB_CHANNELS, r, r], shape)?;
        if !images.all_finite() {
            return Err(Error::Numeric("retouch input has non-finite pixels".into()));
        }
        Ok(())
    }

    /// Un-clamped output of a batch without recording gradients.
    pub fn infer_raw(&self, images: &Array<T>, strength: Option<f64>) -> Result<Array<T>> {
        self.check_input(images)?;
        let tape = Tape::new();
        let pass = self.forward(&tape, tape.constant(images.clone()), strength)?;
        Ok(pass.image.value().as_ref().clone())
    }

    /// Retouches a batch `(N, 3, R, R)`; the output is clamped to `[-1, 1]`.
    ///
    /// A strength of exactly 1 takes the plain forward path.
    pub fn retouch(
        &self,
        images: &Array<T>,
        strength: &StrengthSpec,
        keep_blends: bool,
    ) -> Result<(Array<T>, RetouchDiagnostics<T>)> {
        self.check_input(images)?;
        let strength = StrengthSpec::new(strength.factor)?;
        let tape = Tape::new();
        let s = (!strength.is_identity()).then_some(strength.factor);
        let pass = self.forward(&tape, tape.constant(images.clone()), s)?;
        let out = pass.image.clamp(-1.0, 1.0).value().as_ref().clone();
        let n = images.dim(0);
        let g = &self.config.gp;
        let grab = |m: &BTreeMap<usize, Var<'_, T>>| -> BTreeMap<usize, Array<T>> {
            m.iter().map(|(&k, v)| (k, v.value().as_ref().clone())).collect()
        };
        let diagnostics = RetouchDiagnostics {
            latent: pass.latent.value().as_ref().clone().reshape(&[n, g.num_slices(), g.latent_dim]),
            spatial_masks: grab(&pass.spatial_masks),
            channel_masks: grab(&pass.channel_masks),
            blends: keep_blends.then(|| grab(&pass.blends)),
        };
        Ok((out, diagnostics))
    }

    /// Retouches with a variant of this model (see [`Retoucher::variant`]).
    pub fn retouch_variant(
        &self,
        images: &Array<T>,
        blend_mode: BlendMode,
        skip_levels: BTreeSet<usize>,
        seed: u64,
    ) -> Result<(Array<T>, RetouchDiagnostics<T>)> {
        self.variant(blend_mode, skip_levels, seed)?.retouch(images, &StrengthSpec::default(), false)
    }
}
