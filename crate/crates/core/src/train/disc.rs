use retouch_tensor::{Element, ParamStore, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{expect_shape, Error, Result};
use crate::gp::RGB_CHANNELS;
use crate::layers::{lrelu, EqualConv, EqualLinear, ParamSpec};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscConfig {
    pub channel_base: usize,
    pub channel_max: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self { channel_base: 16, channel_max: 128 }
    }
}

/// Convolutional downsampling stack ending in one logit per image.
///
/// A 1x1 input projection is followed by blocks of (3x3 conv, strided 3x3
/// conv) halving the resolution down to 4x4, then two affine layers.
#[derive(Clone, Debug)]
pub struct Discriminator {
    resolution: usize,
    from_rgb: EqualConv,
    blocks: Vec<(EqualConv, EqualConv)>,
    fc: EqualLinear,
    out: EqualLinear,
}

pub const PREFIX: &str = "disc.";

impl Discriminator {
    pub fn new(config: &DiscConfig, resolution: usize) -> Result<Self> {
        if resolution < 8 || !resolution.is_power_of_two() {
            return Err(Error::Config(format!("discriminator resolution {resolution} must be a power of two >= 8")));
        }
        if config.channel_base == 0 || config.channel_max < config.channel_base {
            return Err(Error::Config("discriminator channels need 0 < channel_base <= channel_max".into()));
        }
        let width = |k: usize| (config.channel_base << k).min(config.channel_max);
        let n_blocks = (resolution / 4).trailing_zeros() as usize;
        let blocks = (0..n_blocks)
            .map(|k| {
                (
                    EqualConv::new(format!("disc.block{k}.conv1"), width(k), width(k), 3),
                    EqualConv::new(format!("disc.block{k}.conv2"), width(k), width(k + 1), 3).strided(2),
                )
            })
            .collect();
        let top = width(n_blocks);
        Ok(Self {
            resolution,
            from_rgb: EqualConv::new("disc.from_rgb", RGB_CHANNELS, width(0), 1),
            blocks,
            fc: EqualLinear::new("disc.fc", top * 16, top),
            out: EqualLinear::new("disc.out", top, 1),
        })
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        self.from_rgb.specs(&mut out);
        for (a, b) in &self.blocks {
            a.specs(&mut out);
            b.specs(&mut out);
        }
        self.fc.specs(&mut out);
        self.out.specs(&mut out);
        out
    }

    /// Logits `(N, 1)` for images `(N, 3, R, R)`.
    pub fn forward<'t, T: Element>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        images: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let shape = images.shape();
        let n = shape.first().copied().unwrap_or(0);
        expect_shape("discriminator input", &[n, RGB_CHANNELS, self.resolution, self.resolution], &shape)?;
        let mut x = lrelu(self.from_rgb.forward(tape, store, images));
        for (a, b) in &self.blocks {
            x = lrelu(a.forward(tape, store, x));
            x = lrelu(b.forward(tape, store, x));
        }
        let flat = x.reshape(&[n, self.fc.in_features]);
        let h = lrelu(self.fc.forward(tape, store, flat));
        Ok(self.out.forward(tape, store, h))
    }
}
