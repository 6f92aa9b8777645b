//! Blemish-aware feature selection.
//!
//! Each unit fuses the encoder's semantic map `F_S` with the backbone map
//! `F_I` of matching resolution. A shared fusion conv produces `H`; a
//! channel branch (global pooling + two affine layers) and a spatial branch
//! (two convs) each emit paired logits whose two-way softmax yields a mask
//! and its complement:
//!
//! ```text
//! F_Blend = M_S * M_C * F_S + (1 - M_S) * (1 - M_C) * F_I
//! ```
//!
//! with `M_S` broadcast over channels and `M_C` over space. No mask
//! receives direct supervision.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use retouch_tensor::{Array, Element, ParamStore, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{expect_shape, Error, Result};
use crate::layers::{lrelu, EqualConv, EqualLinear, ParamSpec};

/// How semantic and backbone features are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendMode {
    /// Channel concatenation followed by a 1x1 conv; no masks.
    Concat,
    SpatialOnly,
    ChannelOnly,
    #[default]
    SpatialChannel,
}

impl BlendMode {
    pub const ALL: [BlendMode; 4] =
        [BlendMode::Concat, BlendMode::SpatialOnly, BlendMode::ChannelOnly, BlendMode::SpatialChannel];

    pub fn has_spatial(self) -> bool {
        matches!(self, BlendMode::SpatialOnly | BlendMode::SpatialChannel)
    }

    pub fn has_channel(self) -> bool {
        matches!(self, BlendMode::ChannelOnly | BlendMode::SpatialChannel)
    }

    /// Short label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            BlendMode::Concat => "concat",
            BlendMode::SpatialOnly => "spatial",
            BlendMode::ChannelOnly => "channel",
            BlendMode::SpatialChannel => "sc",
        }
    }
}

impl fmt::Display for BlendMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for BlendMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "concat" => Ok(BlendMode::Concat),
            "spatial" | "spatial_only" => Ok(BlendMode::SpatialOnly),
            "channel" | "channel_only" => Ok(BlendMode::ChannelOnly),
            "sc" | "spatial_channel" | "s+c" => Ok(BlendMode::SpatialChannel),
            other => Err(Error::Argument(format!("unknown blend mode `{other}`"))),
        }
    }
}

/// Retouching strength: scales the backbone-side channel weight at levels
/// `2..=L-1`. Level 1 is never modified.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrengthSpec {
    pub factor: f64,
}

impl Default for StrengthSpec {
    fn default() -> Self {
        Self { factor: 1.0 }
    }
}

impl StrengthSpec {
    pub fn new(factor: f64) -> Result<Self> {
        if !factor.is_finite() || factor < 0.0 {
            return Err(Error::Argument(format!("strength must be a finite value >= 0, got {factor}")));
        }
        Ok(Self { factor })
    }

    pub fn is_identity(&self) -> bool {
        self.factor == 1.0
    }

    pub fn applies_to(&self, level: usize, levels: usize) -> bool {
        level >= 2 && level < levels
    }
}

/// Channel weights `(w_S, w_GP)` after strength scaling.
///
/// `w_GP = clamp(s * (1 - M_C), 0, 1)` and `w_S = 1 - w_GP`. At `s = 1` the
/// pair `(M_C, 1 - M_C)` is returned as computed by the plain forward.
pub fn strength_adjust<'t, T: Element>(channel_mask: Var<'t, T>, factor: f64) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let spec = StrengthSpec::new(factor)?;
    if spec.is_identity() {
        return Ok((channel_mask, channel_mask.one_minus()));
    }
    let w_gp = channel_mask.one_minus().mul_scalar(factor).clamp(0.0, 1.0);
    Ok((w_gp.one_minus(), w_gp))
}

/// Mask `M` of a two-way softmax over paired logits `(a, b)`; the partner
/// output is `1 - M`.
pub fn two_way_softmax<'t, T: Element>(a: Var<'t, T>, b: Var<'t, T>) -> Var<'t, T> {
    a.sub(b).sigmoid()
}

/// Masks and strength applied to a pair of feature maps.
///
/// `spatial_mask` is `(N, 1, H, W)`, `channel_mask` `(N, C, 1, 1)`; a
/// missing branch drops its factors from the blend.
pub fn masked_blend<'t, T: Element>(
    semantic: Var<'t, T>,
    prior: Var<'t, T>,
    spatial_mask: Option<Var<'t, T>>,
    channel_mask: Option<Var<'t, T>>,
    strength: Option<f64>,
) -> Result<Var<'t, T>> {
    let channel = match channel_mask {
        Some(m) => Some(strength_adjust(m, strength.unwrap_or(1.0))?),
        None => None,
    };
    let blend = match (spatial_mask, channel) {
        (Some(ms), Some((w_s, w_gp))) => {
            semantic.mul(ms.mul(w_s)).add(prior.mul(ms.one_minus().mul(w_gp)))
        }
        (Some(ms), None) => semantic.mul(ms).add(prior.mul(ms.one_minus())),
        (None, Some((w_s, w_gp))) => semantic.mul(w_s).add(prior.mul(w_gp)),
        (None, None) => return Err(Error::Config("masked blend needs at least one mask".into())),
    };
    Ok(blend)
}

/// Output of one fusion unit.
pub struct BafsOutput<'t, T: Element> {
    pub blend: Var<'t, T>,
    pub spatial_mask: Option<Var<'t, T>>,
    pub channel_mask: Option<Var<'t, T>>,
}

#[derive(Clone, Debug)]
pub struct BafsUnit {
    level: usize,
    channels: usize,
    mode: BlendMode,
    fuse: EqualConv,
    channel_fc1: EqualLinear,
    channel_fc2: EqualLinear,
    spatial_conv1: EqualConv,
    spatial_conv2: EqualConv,
    concat: EqualConv,
}

impl BafsUnit {
    pub fn new(level: usize, channels: usize, mode: BlendMode) -> Self {
        let p = format!("bafs{level}");
        let hidden = (channels / 2).max(8);
        let spatial_hidden = (channels / 2).max(4);
        Self {
            level,
            channels,
            mode,
            fuse: EqualConv::new(format!("{p}.fuse"), 2 * channels, channels, 3),
            channel_fc1: EqualLinear::new(format!("{p}.channel.fc1"), channels, hidden),
            channel_fc2: EqualLinear::new(format!("{p}.channel.fc2"), hidden, 2 * channels),
            spatial_conv1: EqualConv::new(format!("{p}.spatial.conv1"), channels, spatial_hidden, 3),
            spatial_conv2: EqualConv::new(format!("{p}.spatial.conv2"), spatial_hidden, 2, 3),
            concat: EqualConv::new(format!("{p}.concat"), 2 * channels, channels, 1),
        }
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn mode(&self) -> BlendMode {
        self.mode
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        if self.mode == BlendMode::Concat {
            self.concat.specs(&mut out);
            return out;
        }
        self.fuse.specs(&mut out);
        if self.mode.has_channel() {
            self.channel_fc1.specs(&mut out);
            self.channel_fc2.specs(&mut out);
        }
        if self.mode.has_spatial() {
            self.spatial_conv1.specs(&mut out);
            self.spatial_conv2.specs(&mut out);
        }
        out
    }

    /// Paired channel logits `(a, b)`, each `(N, C, 1, 1)`.
    fn channel_logits<'t, T: Element>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        h: Var<'t, T>,
    ) -> (Var<'t, T>, Var<'t, T>) {
        let (n, c, _, _) = h.dims4();
        let pooled = h.mean_axes(&[2, 3]).reshape(&[n, c]);
        let z = lrelu(self.channel_fc1.forward(tape, store, pooled));
        let logits = self.channel_fc2.forward(tape, store, z);
        (logits.narrow(1, 0, c).reshape(&[n, c, 1, 1]), logits.narrow(1, c, c).reshape(&[n, c, 1, 1]))
    }

    /// Paired spatial logits `(a, b)`, each `(N, 1, H, W)`.
    fn spatial_logits<'t, T: Element>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        h: Var<'t, T>,
    ) -> (Var<'t, T>, Var<'t, T>) {
        let z = lrelu(self.spatial_conv1.forward(tape, store, h));
        let logits = self.spatial_conv2.forward(tape, store, z);
        (logits.narrow(1, 0, 1), logits.narrow(1, 1, 1))
    }

    /// Fuses `F_S` and `F_I`. `strength` is applied only when the caller
    /// passes it (the retoucher does so at levels `2..=L-1`).
    pub fn forward<'t, T: Element>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        semantic: Var<'t, T>,
        prior: Var<'t, T>,
        strength: Option<f64>,
    ) -> Result<BafsOutput<'t, T>> {
        let s_shape = semantic.shape();
        let p_shape = prior.shape();
        if s_shape.len() != 4 {
            return Err(Error::contract(format!("BAFS {} semantic input", self.level), "NCHW", &s_shape));
        }
        expect_shape(
            format!("BAFS {} semantic input", self.level),
            &[s_shape[0], self.channels, s_shape[2], s_shape[3]],
            &s_shape,
        )?;
        expect_shape(format!("BAFS {} backbone input", self.level), &s_shape, &p_shape)?;
        let pair = tape.concat(&[semantic, prior], 1);
        if self.mode == BlendMode::Concat {
            let blend = self.concat.forward(tape, store, pair);
            return Ok(BafsOutput { blend, spatial_mask: None, channel_mask: None });
        }
        let h = lrelu(self.fuse.forward(tape, store, pair));
        let channel_mask = self.mode.has_channel().then(|| {
            let (a, b) = self.channel_logits(tape, store, h);
            two_way_softmax(a, b)
        });
        let spatial_mask = self.mode.has_spatial().then(|| {
            let (a, b) = self.spatial_logits(tape, store, h);
            two_way_softmax(a, b)
        });
        let blend = masked_blend(semantic, prior, spatial_mask, channel_mask, strength)?;
        Ok(BafsOutput { blend, spatial_mask, channel_mask })
    }
}

/// Writes spatial mask `(N, 1, H, W)` of batch item `index` as an 8-bit
/// grayscale PNG (`0` ↦ 0, `1` ↦ 255).
pub fn save_spatial_mask_png<T: Element>(mask: &Array<T>, index: usize, path: &Path) -> Result<()> {
    let (n, c, h, w) = mask.dims4();
    if c != 1 || index >= n {
        return Err(Error::contract("spatial mask", format!("(>{index}, 1, H, W)"), mask.shape()));
    }
    let plane = &mask.data()[index * h * w..(index + 1) * h * w];
    let raw = plane.iter().map(|v| (v.to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer matches dimensions");
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })
}

/// Channel masks `(N, C, 1, 1)` of batch item `index` as a JSON object
/// `{"level<i>": [..]}`.
pub fn channel_masks_json<T: Element>(masks: &BTreeMap<usize, Array<T>>, index: usize) -> Result<serde_json::Value> {
    let mut out = serde_json::Map::new();
    for (level, m) in masks {
        let (n, c, _, _) = m.dims4();
        if index >= n {
            return Err(Error::contract("channel mask", format!("batch > {index}"), m.shape()));
        }
        let v: Vec<f64> = m.data()[index * c..(index + 1) * c].iter().map(|x| x.to_f64_lossy()).collect();
        out.insert(format!("level{level}"), serde_json::json!(v));
    }
    Ok(serde_json::Value::Object(out))
}

/// Dumps every spatial mask as `spatial_level<i>.png` and the channel masks
/// as `channel_masks.json` into `dir`.
pub fn dump_masks<T: Element>(
    spatial: &BTreeMap<usize, Array<T>>,
    channel: &BTreeMap<usize, Array<T>>,
    index: usize,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (level, m) in spatial {
        let path = dir.join(format!("spatial_level{level}.png"));
        save_spatial_mask_png(m, index, &path)?;
        written.push(path);
    }
    if !channel.is_empty() {
        let path = dir.join("channel_masks.json");
        let text = serde_json::to_string_pretty(&channel_masks_json(channel, index)?)? + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use retouch_tensor::Array;

    use super::*;

    fn scalar<'t>(tape: &'t Tape<f64>, v: f64) -> Var<'t, f64> {
        tape.constant(Array::from_f64_slice(&[1, 1, 1, 1], &[v]))
    }

    #[test]
    fn scalar_hand_case() {
        // 0.75 * 0.5 * 2 + 0.25 * 0.5 * 4 = 1.25
        let tape = Tape::new();
        let out = masked_blend(
            scalar(&tape, 2.0),
            scalar(&tape, 4.0),
            Some(scalar(&tape, 0.75)),
            Some(scalar(&tape, 0.5)),
            None,
        )
        .unwrap();
        assert_eq!(out.item(), 1.25);
    }

    #[test]
    fn strength_examples() {
        let tape = Tape::new();
        let m = scalar(&tape, 0.7);
        let (ws, wg) = strength_adjust(m, 1.0).unwrap();
        assert_eq!((ws.item(), wg.item()), (0.7, 1.0 - 0.7));
        let (ws, wg) = strength_adjust(m, 2.0).unwrap();
        assert!((ws.item() - 0.4).abs() < 1e-12 && (wg.item() - 0.6).abs() < 1e-12);
        let (ws, wg) = strength_adjust(scalar(&tape, 0.1), 3.0).unwrap();
        assert_eq!((ws.item(), wg.item()), (0.0, 1.0));
        assert!(strength_adjust(m, -0.5).is_err());
    }

    #[test]
    fn equal_logits_give_half_masks() {
        let tape = Tape::new();
        let a = tape.constant(Array::<f64>::full(&[2, 3, 1, 1], 0.37));
        assert!(two_way_softmax(a, a).value().data().iter().all(|&m| m == 0.5));
    }

    #[test]
    fn parses_mode_labels() {
        for m in BlendMode::ALL {
            assert_eq!(m.label().parse::<BlendMode>().unwrap(), m);
        }
        assert!("blend".parse::<BlendMode>().is_err());
    }

    #[test]
    fn concat_has_no_mask_params() {
        let specs = BafsUnit::new(2, 16, BlendMode::Concat).specs();
        assert_eq!(specs.len(), 2);
        let sc = BafsUnit::new(2, 16, BlendMode::SpatialChannel).specs();
        assert!(sc.iter().any(|s| s.name.contains("channel")) && sc.iter().any(|s| s.name.contains("spatial")));
    }
}
