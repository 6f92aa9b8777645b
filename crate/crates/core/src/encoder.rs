//! Semantic extraction stack and latent extraction head.
//!
//! Unit 1 is a resolution-preserving stem; units 2..L each halve the
//! resolution, so `I^L` is 4x4. Every unit from the second on ends in an
//! extra convolution producing the semantic map `F^(i-1)_S` that is fused
//! with the backbone's level-`i` features. The head maps `I^L` to the W+
//! code.

use retouch_tensor::{Element, ParamStore, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{expect_shape, Error, Result};
use crate::gp::{GpConfig, RGB_CHANNELS};
use crate::layers::{lrelu, EqualConv, EqualLinear, ParamSpec};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Width of unit `i` is `min(channel_max, channel_base * 2^(i-1))`.
    pub channel_base: usize,
    pub channel_max: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { channel_base: 32, channel_max: 256 }
    }
}

impl EncoderConfig {
    pub fn width(&self, unit: usize) -> usize {
        (self.channel_base << (unit - 1)).min(self.channel_max)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_base == 0 || self.channel_max < self.channel_base {
            return Err(Error::Config(format!(
                "encoder channels need 0 < channel_base <= channel_max, got {} / {}",
                self.channel_base, self.channel_max
            )));
        }
        Ok(())
    }
}

/// Intermediates of one encoder pass.
pub struct EncoderState<'t, T: Element> {
    /// `I^i_I` for `i` in `[1, L]` (index 0 holds `I^1_I`).
    pub intermediates: Vec<Var<'t, T>>,
    /// `F^i_S` for `i` in `[1, L-1]` (index 0 holds `F^1_S`).
    pub semantic: Vec<Var<'t, T>>,
}

impl<'t, T: Element> EncoderState<'t, T> {
    pub fn semantic_map(&self, level: usize) -> Var<'t, T> {
        self.semantic[level - 1]
    }

    pub fn top(&self) -> Var<'t, T> {
        *self.intermediates.last().expect("encoder has at least one unit")
    }
}

#[derive(Clone, Debug)]
struct SeUnit {
    conv1: EqualConv,
    conv2: EqualConv,
    /// Produces `F^(i-1)_S`; absent on the stem.
    semantic: Option<EqualConv>,
}

#[derive(Clone, Debug)]
pub struct SemanticEncoder {
    levels: usize,
    latent_dim: usize,
    units: Vec<SeUnit>,
    head_conv: EqualConv,
    head_fc: EqualLinear,
}

impl SemanticEncoder {
    pub fn new(config: &EncoderConfig, gp: &GpConfig) -> Result<Self> {
        config.validate()?;
        gp.validate()?;
        let l = gp.levels;
        let units = (1..=l)
            .map(|i| {
                let w = config.width(i);
                if i == 1 {
                    SeUnit {
                        conv1: EqualConv::new("se.unit1.conv1", RGB_CHANNELS, w, 3),
                        conv2: EqualConv::new("se.unit1.conv2", w, w, 3),
                        semantic: None,
                    }
                } else {
                    SeUnit {
                        conv1: EqualConv::new(format!("se.unit{i}.conv1"), config.width(i - 1), w, 3).strided(2),
                        conv2: EqualConv::new(format!("se.unit{i}.conv2"), w, w, 3),
                        semantic: Some(EqualConv::new(format!("se.semantic{}", i - 1), w, gp.channels(i), 3)),
                    }
                }
            })
            .collect();
        let top = config.width(l);
        Ok(Self {
            levels: l,
            latent_dim: gp.latent_dim,
            units,
            head_conv: EqualConv::new("leh.conv", top, top, 3),
            head_fc: EqualLinear::new("leh.fc", top * 16, gp.num_slices() * gp.latent_dim),
        })
    }

    pub fn input_resolution(&self) -> usize {
        1 << (self.levels + 1)
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        for u in &self.units {
            u.conv1.specs(&mut out);
            u.conv2.specs(&mut out);
            if let Some(s) = &u.semantic {
                s.specs(&mut out);
            }
        }
        self.head_conv.specs(&mut out);
        self.head_fc.specs(&mut out);
        out
    }

    /// Runs the stack on a batch `(N, 3, R, R)`, `R = 2^(L+1)`.
    pub fn forward<'t, T: Element>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        image: Var<'t, T>,
    ) -> Result<EncoderState<'t, T>> {
        let shape = image.shape();
        let r = self.input_resolution();
        if shape.len() != 4 {
            return Err(Error::contract("encoder input", "rank-4 NCHW batch", &shape));
        }
        expect_shape("encoder input", &[shape[0], RGB_CHANNELS, r, r], &shape)?;
        let mut intermediates = Vec::with_capacity(self.levels);
        let mut semantic = Vec::with_capacity(self.levels - 1);
        let mut x = image;
        for u in &self.units {
            x = lrelu(u.conv1.forward(tape, store, x));
            x = lrelu(u.conv2.forward(tape, store, x));
            intermediates.push(x);
            if let Some(s) = &u.semantic {
                semantic.push(s.forward(tape, store, x));
            }
        }
        Ok(EncoderState { intermediates, semantic })
    }

    /// Latent extraction head: `I^L (N, C, 4, 4) -> (N, S*d)`.
    pub fn latent_head<'t, T: Element>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        top: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let shape = top.shape();
        let c = self.head_conv.in_ch;
        expect_shape("latent head input", &[shape[0], c, 4, 4], &shape)?;
        let h = lrelu(self.head_conv.forward(tape, store, top));
        let flat = h.reshape(&[shape[0], c * 16]);
        let code = self.head_fc.forward(tape, store, flat);
        debug_assert_eq!(code.shape()[1], 2 * self.levels * self.latent_dim);
        Ok(code)
    }
}
