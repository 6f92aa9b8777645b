//! GAN-prior synthesis backbone.
//!
//! A StyleGAN2-style progressive generator split into per-level units. Level
//! `L` starts from a learned 4x4 constant; every lower level `i` consumes an
//! externally supplied (blended) map at half its resolution, upsamples it and
//! applies two style-modulated convolutions. Each unit adds its RGB
//! projection to an accumulator that is upsampled from level to level, so
//! level 1 emits the final image.
//!
//! Level `i` produces features at `2^(L+2-i)` pixels with `c_i` channels.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use retouch_tensor::{Array, Element, ParamStore, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{expect_shape, Error, Result};
use crate::layers::{lrelu, validate_params, EqualConv, Init, ModulatedConv, ParamSpec};

pub const RGB_CHANNELS: usize = 3;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub enabled: bool,
    pub seed: u64,
}

/// Shape of the synthesis network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpConfig {
    /// Number of levels `L`; output resolution is `2^(L+1)`.
    pub levels: usize,
    /// Width `d` of one latent slice.
    pub latent_dim: usize,
    pub channel_base: usize,
    pub channel_max: usize,
    #[serde(default = "yes")]
    pub demodulate: bool,
    #[serde(default)]
    pub noise: NoiseConfig,
}

fn yes() -> bool {
    true
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            levels: 5,
            latent_dim: 128,
            channel_base: 32,
            channel_max: 256,
            demodulate: true,
            noise: NoiseConfig::default(),
        }
    }
}

impl GpConfig {
    /// Layout of the published 1024px FFHQ StyleGAN2 generator (config-f).
    pub fn stylegan2_ffhq_1024() -> Self {
        Self { levels: 9, latent_dim: 512, channel_base: 32, channel_max: 512, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(3..=10).contains(&self.levels) {
            return Err(Error::Config(format!("levels must lie in [3, 10], got {}", self.levels)));
        }
        if self.latent_dim == 0 || self.channel_base == 0 {
            return Err(Error::Config("latent_dim and channel_base must be positive".into()));
        }
        if self.channel_max < self.channel_base {
            return Err(Error::Config(format!(
                "channel_max {} is below channel_base {}",
                self.channel_max, self.channel_base
            )));
        }
        Ok(())
    }

    /// `c_i = min(c_max, c_base * 2^(i-1))`.
    pub fn channels(&self, level: usize) -> usize {
        assert!(level >= 1 && level <= self.levels, "level {level} outside [1, {}]", self.levels);
        (self.channel_base << (level - 1)).min(self.channel_max)
    }

    /// Feature resolution `2^(L+2-i)` emitted by unit `level`.
    pub fn resolution(&self, level: usize) -> usize {
        assert!(level >= 1 && level <= self.levels, "level {level} outside [1, {}]", self.levels);
        1 << (self.levels + 2 - level)
    }

    pub fn output_resolution(&self) -> usize {
        1 << (self.levels + 1)
    }

    /// Latent slices `S = 2L`.
    pub fn num_slices(&self) -> usize {
        2 * self.levels
    }

    /// Indices of the two latent slices consumed by unit `level`.
    pub fn slices_for(&self, level: usize) -> (usize, usize) {
        let k = 2 * (self.levels - level);
        (k, k + 1)
    }

    /// `(C, H, W)` of the map a unit consumes.
    pub fn unit_input_shape(&self, level: usize) -> [usize; 3] {
        if level == self.levels {
            [self.channels(level), 4, 4]
        } else {
            let r = self.resolution(level) / 2;
            [self.channels(level + 1), r, r]
        }
    }

    /// `(C, H, W)` of the features unit `level` emits.
    pub fn feature_shape(&self, level: usize) -> [usize; 3] {
        let r = self.resolution(level);
        [self.channels(level), r, r]
    }
}

/// A W+ code: `S = 2L` style slices of width `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode<T> {
    slices: Array<T>,
}

impl<T: Element> LatentCode<T> {
    pub fn new(slices: Array<T>, config: &GpConfig) -> Result<Self> {
        expect_shape("latent code", &[config.num_slices(), config.latent_dim], slices.shape())?;
        if !slices.all_finite() {
            return Err(Error::Numeric("latent code has non-finite entries".into()));
        }
        Ok(Self { slices })
    }

    pub fn num_slices(&self) -> usize {
        self.slices.dim(0)
    }

    pub fn dim(&self) -> usize {
        self.slices.dim(1)
    }

    pub fn as_array(&self) -> &Array<T> {
        &self.slices
    }

    pub fn slice(&self, k: usize) -> &[T] {
        let d = self.dim();
        &self.slices.data()[k * d..(k + 1) * d]
    }
}

/// Modulated conv + optional noise + bias + leaky rectifier.
#[derive(Clone, Debug)]
struct StyledConv {
    name: String,
    conv: ModulatedConv,
}

impl StyledConv {
    fn new(name: String, in_ch: usize, out_ch: usize, config: &GpConfig, upsample: bool) -> Self {
        let conv = ModulatedConv {
            name: format!("{name}.conv"),
            in_ch,
            out_ch,
            kernel: 3,
            style_dim: config.latent_dim,
            demodulate: config.demodulate,
            upsample,
        };
        Self { name, conv }
    }

    fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.conv.specs(out);
        out.push(ParamSpec::new(format!("{}.noise.weight", self.name), &[1], Init::Constant(0.0)));
        out.push(ParamSpec::new(format!("{}.activate.bias", self.name), &[self.conv.out_ch], Init::Constant(0.0)));
    }

    fn forward<'t, T: Element>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Var<'t, T>,
        latent: Var<'t, T>,
        noise: Option<u64>,
    ) -> Var<'t, T> {
        let mut y = self.conv.forward(tape, store, x, latent);
        if let Some(seed) = noise {
            let (n, _, h, w) = y.dims4();
            let field = Array::randn(&[n, 1, h, w], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
            let strength = tape.param(store, &format!("{}.noise.weight", self.name)).reshape(&[1, 1, 1, 1]);
            y = y.add(tape.constant(field).mul(strength));
        }
        let bias = tape
            .param(store, &format!("{}.activate.bias", self.name))
            .reshape(&[1, self.conv.out_ch, 1, 1]);
        lrelu(y.add(bias))
    }
}

#[derive(Clone, Debug)]
struct ToRgb {
    name: String,
    conv: ModulatedConv,
}

impl ToRgb {
    fn new(name: String, in_ch: usize, config: &GpConfig) -> Self {
        let conv = ModulatedConv {
            name: format!("{name}.conv"),
            in_ch,
            out_ch: RGB_CHANNELS,
            kernel: 1,
            style_dim: config.latent_dim,
            demodulate: false,
            upsample: false,
        };
        Self { name, conv }
    }

    fn specs(&self, out: &mut Vec<ParamSpec>) {
        self.conv.specs(out);
        out.push(ParamSpec::new(format!("{}.bias", self.name), &[RGB_CHANNELS], Init::Constant(0.0)));
    }

    fn forward<'t, T: Element>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        x: Var<'t, T>,
        latent: Var<'t, T>,
    ) -> Var<'t, T> {
        let bias = tape.param(store, &format!("{}.bias", self.name)).reshape(&[1, RGB_CHANNELS, 1, 1]);
        self.conv.forward(tape, store, x, latent).add(bias)
    }
}

#[derive(Clone, Debug)]
struct GpUnit {
    level: usize,
    /// Upsampling conv below the top level; the only conv at the top.
    conv1: StyledConv,
    conv2: Option<StyledConv>,
    to_rgb: ToRgb,
}

/// Result of one unit.
pub struct UnitOutput<'t, T: Element> {
    pub features: Var<'t, T>,
    pub rgb: Var<'t, T>,
}

/// Result of a full synthesis pass.
pub struct GpOutput<'t, T: Element> {
    /// Un-clamped RGB image `(N, 3, 2^(L+1), 2^(L+1))`.
    pub image: Var<'t, T>,
    /// `F^i_I` for every level `i` in `[1, L]`.
    pub features: BTreeMap<usize, Var<'t, T>>,
}

/// The synthesis network description; parameters live in a [`ParamStore`]
/// under the `gp.` prefix.
#[derive(Clone, Debug)]
pub struct GanPrior {
    config: GpConfig,
    units: Vec<GpUnit>,
    skip_levels: BTreeSet<usize>,
}

pub const PREFIX: &str = "gp.";
pub const CONST_NAME: &str = "gp.const";

fn bridge(config: &GpConfig, level: usize) -> EqualConv {
    EqualConv::new(format!("gp.bridge{level}"), config.channels(level + 1), config.channels(level), 1)
}

impl GanPrior {
    pub fn new(config: GpConfig) -> Result<Self> {
        Self::with_skips(config, BTreeSet::new())
    }

    /// Builds a backbone in which the units at `skip_levels` are replaced by
    /// an upsample + 1x1 channel adapter.
    pub fn with_skips(config: GpConfig, skip_levels: BTreeSet<usize>) -> Result<Self> {
        config.validate()?;
        let l = config.levels;
        if skip_levels.contains(&l) {
            return Err(Error::Config(format!("level {l} holds the constant input and cannot be skipped")));
        }
        if let Some(&bad) = skip_levels.iter().find(|&&s| s == 0 || s > l) {
            return Err(Error::Config(format!("skip level {bad} outside [1, {l}]")));
        }
        let units = (1..=l)
            .map(|level| {
                let out_ch = config.channels(level);
                let name = format!("gp.level{level}");
                if level == l {
                    GpUnit {
                        level,
                        conv1: StyledConv::new(format!("{name}.conv1"), out_ch, out_ch, &config, false),
                        conv2: None,
                        to_rgb: ToRgb::new(format!("{name}.to_rgb"), out_ch, &config),
                    }
                } else {
                    let in_ch = config.channels(level + 1);
                    GpUnit {
                        level,
                        conv1: StyledConv::new(format!("{name}.conv1"), in_ch, out_ch, &config, true),
                        conv2: Some(StyledConv::new(format!("{name}.conv2"), out_ch, out_ch, &config, false)),
                        to_rgb: ToRgb::new(format!("{name}.to_rgb"), out_ch, &config),
                    }
                }
            })
            .collect();
        Ok(Self { config, units, skip_levels })
    }

    pub fn config(&self) -> &GpConfig {
        &self.config
    }

    pub fn skip_levels(&self) -> &BTreeSet<usize> {
        &self.skip_levels
    }

    fn unit(&self, level: usize) -> &GpUnit {
        &self.units[level - 1]
    }

    /// Every parameter tensor, derived from the configuration alone.
    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut out = vec![ParamSpec::new(
            CONST_NAME,
            &[self.config.channels(self.config.levels), 4, 4],
            Init::Normal(1.0),
        )];
        for unit in &self.units {
            if self.skip_levels.contains(&unit.level) {
                bridge(&self.config, unit.level).specs(&mut out);
                continue;
            }
            unit.conv1.specs(&mut out);
            if let Some(c) = &unit.conv2 {
                c.specs(&mut out);
            }
            unit.to_rgb.specs(&mut out);
        }
        out
    }

    pub fn validate_params<T: Element>(&self, store: &ParamStore<T>) -> Result<()> {
        let specs = self.specs();
        let mut own = ParamStore::new();
        for (name, a) in store.iter().filter(|(n, _)| n.starts_with(PREFIX)) {
            own.insert(name, a.clone());
        }
        validate_params(&specs, &own)
    }

    fn noise_seed(&self, level: usize, conv: u64) -> Option<u64> {
        let n = &self.config.noise;
        n.enabled.then(|| n.seed ^ ((level as u64) << 8 | conv).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    /// The learned constant broadcast to a batch of `n`.
    pub fn constant_input<'t, T: Element>(&self, tape: &'t Tape<T>, store: &ParamStore<T>, n: usize) -> Var<'t, T> {
        let c = self.config.channels(self.config.levels);
        let k = tape.param(store, CONST_NAME).reshape(&[1, c, 4, 4]);
        if n == 1 {
            k
        } else {
            k.add(tape.constant(Array::zeros(&[n, c, 4, 4])))
        }
    }

    /// One GP unit: `(F_in, l_a, l_b, rgb_acc) -> (F_out, rgb_acc')`.
    ///
    /// `l_a` drives the first conv; `l_b` the second conv and the RGB
    /// projection (at the top level, which has a single conv, `l_a` drives
    /// the conv and `l_b` the projection).
    #[allow(clippy::too_many_arguments)]
    pub fn unit_forward<'t, T: Element>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        level: usize,
        input: Var<'t, T>,
        latent_a: Var<'t, T>,
        latent_b: Var<'t, T>,
        rgb_acc: Option<Var<'t, T>>,
    ) -> Result<UnitOutput<'t, T>> {
        if level == 0 || level > self.config.levels {
            return Err(Error::Argument(format!("GP level {level} outside [1, {}]", self.config.levels)));
        }
        if self.skip_levels.contains(&level) {
            return Err(Error::Config(format!("GP level {level} is configured as skipped")));
        }
        let shape = input.shape();
        let n = shape[0];
        let [c, h, w] = self.config.unit_input_shape(level);
        expect_shape(format!("GP unit {level} input"), &[n, c, h, w], &shape)?;
        let d = self.config.latent_dim;
        expect_shape(format!("GP unit {level} latent a"), &[n, d], &latent_a.shape())?;
        expect_shape(format!("GP unit {level} latent b"), &[n, d], &latent_b.shape())?;
        let unit = self.unit(level);
        let mut f = unit.conv1.forward(tape, store, input, latent_a, self.noise_seed(level, 1));
        if let Some(c2) = &unit.conv2 {
            f = c2.forward(tape, store, f, latent_b, self.noise_seed(level, 2));
        }
        let rgb = unit.to_rgb.forward(tape, store, f, latent_b);
        let rgb = match rgb_acc {
            Some(acc) => {
                let r = self.config.resolution(level);
                expect_shape(format!("GP unit {level} rgb accumulator"), &[n, RGB_CHANNELS, r / 2, r / 2], &acc.shape())?;
                acc.upsample2x().add(rgb)
            }
            None => rgb,
        };
        Ok(UnitOutput { features: f, rgb })
    }

    /// Replaces a skipped unit: upsample, then adapt channels with a 1x1 conv.
    pub fn bridge_forward<'t, T: Element>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        level: usize,
        input: Var<'t, T>,
        rgb_acc: Option<Var<'t, T>>,
    ) -> Result<UnitOutput<'t, T>> {
        if !self.skip_levels.contains(&level) {
            return Err(Error::Config(format!("GP level {level} is not configured as skipped")));
        }
        let shape = input.shape();
        let [c, h, w] = self.config.unit_input_shape(level);
        expect_shape(format!("GP bridge {level} input"), &[shape[0], c, h, w], &shape)?;
        let features = bridge(&self.config, level).forward(tape, store, input.upsample2x());
        let rgb = rgb_acc
            .map(|a| a.upsample2x())
            .ok_or_else(|| Error::Config(format!("GP bridge {level} needs an RGB accumulator")))?;
        Ok(UnitOutput { features, rgb })
    }

    /// Slice `k` of a batched latent `(N, S*d)` as `(N, d)`.
    pub fn latent_slice<'t, T: Element>(&self, latent: Var<'t, T>, k: usize) -> Var<'t, T> {
        let d = self.config.latent_dim;
        latent.narrow(1, k * d, d)
    }

    /// Full synthesis with explicit injected maps.
    ///
    /// `injected[i]` is the map fed to unit `i` for `i < L`. At a skipped
    /// level a missing injection is bridged from the previous level's
    /// features; at any other level it is a configuration error.
    pub fn forward<'t, T: Element>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        latent: Var<'t, T>,
        injected: &BTreeMap<usize, Var<'t, T>>,
    ) -> Result<GpOutput<'t, T>> {
        let l = self.config.levels;
        let shape = latent.shape();
        let n = shape[0];
        expect_shape("GP latent", &[n, self.config.num_slices() * self.config.latent_dim], &shape)?;
        let mut features = BTreeMap::new();
        let (a, b) = self.config.slices_for(l);
        let top = self.unit_forward(
            tape,
            store,
            l,
            self.constant_input(tape, store, n),
            self.latent_slice(latent, a),
            self.latent_slice(latent, b),
            None,
        )?;
        let mut prev = top.features;
        let mut rgb = top.rgb;
        features.insert(l, prev);
        for level in (1..l).rev() {
            let out = if self.skip_levels.contains(&level) {
                let input = injected.get(&level).copied().unwrap_or(prev);
                self.bridge_forward(tape, store, level, input, Some(rgb))?
            } else {
                let input = *injected.get(&level).ok_or_else(|| {
                    Error::Config(format!("no injected feature map for GP level {level}"))
                })?;
                let (a, b) = self.config.slices_for(level);
                self.unit_forward(
                    tape,
                    store,
                    level,
                    input,
                    self.latent_slice(latent, a),
                    self.latent_slice(latent, b),
                    Some(rgb),
                )?
            };
            prev = out.features;
            rgb = out.rgb;
            features.insert(level, prev);
        }
        Ok(GpOutput { image: rgb, features })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolution_ladder_formulae() {
        let c = GpConfig { levels: 5, ..GpConfig::default() };
        assert_eq!(c.output_resolution(), 64);
        assert_eq!((1..=5).map(|i| c.resolution(i)).collect::<Vec<_>>(), vec![64, 32, 16, 8, 4]);
        assert_eq!((1..=5).map(|i| c.channels(i)).collect::<Vec<_>>(), vec![32, 64, 128, 256, 256]);
        assert_eq!(c.unit_input_shape(1), [64, 32, 32]);
        assert_eq!(c.unit_input_shape(5), [256, 4, 4]);
    }

    #[test]
    fn ffhq_layout_matches_w_plus_contract() {
        let c = GpConfig::stylegan2_ffhq_1024();
        assert_eq!(c.num_slices(), 18);
        assert_eq!(c.latent_dim, 512);
        assert_eq!(c.output_resolution(), 1024);
        assert_eq!(c.resolution(9), 4);
        assert_eq!(c.channels(1), 32);
        assert_eq!(c.channels(5), 512);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(GpConfig { levels: 2, ..GpConfig::default() }.validate().is_err());
        assert!(GpConfig { channel_max: 8, channel_base: 16, ..GpConfig::default() }.validate().is_err());
        let c = GpConfig { levels: 4, ..GpConfig::default() };
        assert!(GanPrior::with_skips(c.clone(), BTreeSet::from([4])).is_err());
        assert!(GanPrior::with_skips(c, BTreeSet::from([0])).is_err());
    }

    #[test]
    fn slices_cover_latent_exactly_once() {
        let c = GpConfig { levels: 6, ..GpConfig::default() };
        let mut seen: Vec<usize> = (1..=6).flat_map(|i| {
            let (a, b) = c.slices_for(i);
            [a, b]
        }).collect();
        seen.sort();
        assert_eq!(seen, (0..12).collect::<Vec<_>>());
    }
}
