//! Paired samples, residual-scaling augmentation and a procedural
//! portrait/blemish synthesizer.
//!
//! The synthesizer draws a clean "portrait" (smooth background, shaded face
//! ellipse, fine skin texture and a few dark features that belong to the
//! face) and composites blemishes onto the skin: dark reddish spots,
//! scratches and specular reflections. Both images are quantized to 8 bits;
//! pixels whose composite changes by at most one level are restored, so the
//! blemish mask is exactly the set of pixels where the pair differs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use retouch_tensor::Array;
use serde::{Deserialize, Serialize};

use super::image::{BinaryMask, ImageTensor};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// A raw (blemished) image and its retouched counterpart.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub raw: ImageTensor,
    pub clean: ImageTensor,
    pub blemish_mask: Option<BinaryMask>,
}

impl PairedSample {
    pub fn new(id: impl Into<String>, raw: ImageTensor, clean: ImageTensor, blemish_mask: Option<BinaryMask>) -> Result<Self> {
        let id = id.into();
        if raw.array().shape() != clean.array().shape() {
            return Err(Error::Sample {
                id,
                message: format!("raw {:?} and clean {:?} differ in shape", raw.array().shape(), clean.array().shape()),
            });
        }
        if let Some(m) = &blemish_mask {
            if (m.width(), m.height()) != (raw.width(), raw.height()) {
                return Err(Error::Sample { id, message: "mask size differs from image size".into() });
            }
        }
        Ok(Self { id, raw, clean, blemish_mask })
    }
}

/// `clean + λ·(raw − clean)`, evaluated as `(1 − λ)·clean + λ·raw` so both
/// endpoints are reproduced exactly.
pub fn augment(sample: &PairedSample, lambda: f64) -> Result<ImageTensor> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Argument(format!("augmentation factor must lie in [0, 1], got {lambda}")));
    }
    let data = sample
        .clean
        .data()
        .iter()
        .zip(sample.raw.data())
        .map(|(&c, &r)| ((1.0 - lambda) * c as f64 + lambda * r as f64) as f32)
        .collect();
    ImageTensor::new(Array::from_vec(sample.clean.array().shape(), data))
}

/// Random residual scaling applied during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationSpec {
    pub enabled: bool,
    pub seed: u64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self { enabled: true, seed: 0 }
    }
}

impl AugmentationSpec {
    /// Factor for one visit of one sample; uniform on `[0, 1)`, or 1 when
    /// augmentation is disabled.
    pub fn draw(&self, visit: u64, sample: u64) -> f64 {
        if !self.enabled {
            return 1.0;
        }
        ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[visit, sample])).random::<f64>()
    }
}

/// Counts and size ranges of the blemish primitives. Sizes are fractions of
/// the image side; ranges are inclusive `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlemishSpec {
    pub spots: [usize; 2],
    pub spot_radius: [f64; 2],
    /// Darkening amplitude of spots, in `[0, 1]` intensity units.
    pub spot_strength: [f64; 2],
    pub scratches: [usize; 2],
    pub scratch_length: [f64; 2],
    pub scratch_width: [f64; 2],
    pub reflections: [usize; 2],
    pub reflection_radius: [f64; 2],
    pub reflection_strength: [f64; 2],
    /// Standard deviation of the fine skin texture, in intensity units.
    pub texture: f64,
    pub seed: u64,
}

impl Default for BlemishSpec {
    fn default() -> Self {
        Self {
            spots: [3, 7],
            spot_radius: [0.035, 0.07],
            spot_strength: [0.25, 0.5],
            scratches: [0, 2],
            scratch_length: [0.12, 0.25],
            scratch_width: [0.03, 0.045],
            reflections: [0, 1],
            reflection_radius: [0.05, 0.09],
            reflection_strength: [0.12, 0.25],
            texture: 0.003,
            seed: 0,
        }
    }
}

impl BlemishSpec {
    /// No blemishes at all; raw equals clean.
    pub fn none() -> Self {
        Self { spots: [0, 0], scratches: [0, 0], reflections: [0, 0], ..Self::default() }
    }

    /// Exactly `n` spots and nothing else.
    pub fn spots_only(n: usize) -> Self {
        Self { spots: [n, n], ..Self::none() }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [("spots", self.spots), ("scratches", self.scratches), ("reflections", self.reflections)];
        for (name, [lo, hi]) in counts {
            if lo > hi {
                return Err(Error::Config(format!("blemish {name} count range [{lo}, {hi}] is empty")));
            }
        }
        let ranges = [
            ("spot_radius", self.spot_radius, 0.5),
            ("spot_strength", self.spot_strength, 1.0),
            ("scratch_length", self.scratch_length, 1.0),
            ("scratch_width", self.scratch_width, 0.5),
            ("reflection_radius", self.reflection_radius, 0.5),
            ("reflection_strength", self.reflection_strength, 1.0),
        ];
        for (name, [lo, hi], max) in ranges {
            if !(lo > 0.0 && lo <= hi && hi <= max) {
                return Err(Error::Config(format!("blemish {name} range [{lo}, {hi}] must satisfy 0 < lo <= hi <= {max}")));
            }
        }
        if !(0.0..=0.1).contains(&self.texture) {
            return Err(Error::Config(format!("texture {} outside [0, 0.1]", self.texture)));
        }
        Ok(())
    }
}

/// Planar float image in `[0, 1]` intensity units.
struct Canvas {
    r: usize,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn at(&mut self, x: usize, y: usize) -> &mut [f64; 3] {
        &mut self.px[y * self.r + x]
    }

    fn to_levels(&self) -> Vec<[u8; 3]> {
        self.px.iter().map(|p| p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)).collect()
    }
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn count(rng: &mut ChaCha8Rng, [lo, hi]: [usize; 2]) -> usize {
    rng.random_range(lo..=hi)
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

/// Face ellipse in pixel units: centre, radii.
struct Face {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Face {
    /// `< 1` inside.
    fn radial(&self, x: f64, y: f64) -> f64 {
        (((x - self.cx) / self.rx).powi(2) + ((y - self.cy) / self.ry).powi(2)).sqrt()
    }

    /// Uniform point at least `margin` pixels inside the boundary.
    fn sample_inside(&self, rng: &mut ChaCha8Rng, margin: f64) -> (f64, f64) {
        let (rx, ry) = ((self.rx - margin).max(1.0), (self.ry - margin).max(1.0));
        loop {
            let u = rng.random_range(-1.0..1.0f64);
            let v = rng.random_range(-1.0..1.0f64);
            if u * u + v * v <= 1.0 {
                // Snap to a pixel centre.
                return ((self.cx + u * rx).floor() + 0.5, (self.cy + v * ry).floor() + 0.5);
            }
        }
    }
}

fn draw_clean(rng: &mut ChaCha8Rng, r: usize, texture: f64) -> (Canvas, Face) {
    let rf = r as f64;
    let bg_a: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.75));
    let bg_b: [f64; 3] = std::array::from_fn(|c| (bg_a[c] + rng.random_range(-0.15..0.15f64)).clamp(0.05, 0.9));
    let skin_shift = rng.random_range(-0.08..0.08);
    let skin = [0.80 + skin_shift, 0.60 + skin_shift * 0.9, 0.50 + skin_shift * 0.8]
        .map(|v: f64| v + rng.random_range(-0.03..0.03));
    let face = Face {
        cx: rf * rng.random_range(0.46..0.54),
        cy: rf * rng.random_range(0.50..0.58),
        rx: rf * rng.random_range(0.30..0.36),
        ry: rf * rng.random_range(0.38..0.44),
    };
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.015..0.04),
            )
        })
        .collect();
    let light = (rng.random_range(-0.6..0.6f64), rng.random_range(-0.6..0.6f64));
    let grain = Normal::new(0.0, texture.max(1e-12)).expect("finite std");
    let mut canvas = Canvas { r, px: vec![[0.0; 3]; r * r] };
    for y in 0..r {
        for x in 0..r {
            let (u, v) = ((x as f64 + 0.5) / rf, (y as f64 + 0.5) / rf);
            let t = 0.5 * (u + v);
            let bg: [f64; 3] = std::array::from_fn(|c| bg_a[c] * (1.0 - t) + bg_b[c] * t);
            let field: f64 = waves
                .iter()
                .map(|&(fx, fy, ph, amp)| amp * (std::f64::consts::TAU * (fx * u + fy * v) + ph).cos())
                .sum();
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let rad = face.radial(px, py);
            let shade = 1.0 + 0.08 * ((px - face.cx) / face.rx * light.0 + (py - face.cy) / face.ry * light.1) - 0.12 * rad * rad;
            let noise = if texture > 0.0 { grain.sample(rng) } else { 0.0 };
            let skin_px: [f64; 3] = std::array::from_fn(|c| skin[c] * shade + field * (1.0 - 0.1 * c as f64) + noise);
            // Anti-aliased boundary about one pixel wide.
            let edge = ((1.0 - rad) * face.rx.min(face.ry) + 0.5).clamp(0.0, 1.0);
            *canvas.at(x, y) = std::array::from_fn(|c| edge * skin_px[c] + (1.0 - edge) * bg[c]);
        }
    }
    // Persistent features: brows and mouth, neutral dark.
    let feats = [
        ((-0.55, -0.25), (-0.15, -0.28)),
        ((0.15, -0.28), (0.55, -0.25)),
        ((-0.35, 0.45), (0.35, 0.45)),
    ];
    let width = (rf * 0.025).max(0.8);
    let darkness = rng.random_range(0.45..0.6);
    for ((ax, ay), (bx, by)) in feats {
        let a = (face.cx + ax * face.rx, face.cy + ay * face.ry);
        let b = (face.cx + bx * face.rx, face.cy + by * face.ry);
        for y in 0..r {
            for x in 0..r {
                let d = segment_distance((x as f64 + 0.5, y as f64 + 0.5), a, b);
                let cover = (width + 0.5 - d).clamp(0.0, 1.0);
                if cover > 0.0 {
                    let p = canvas.at(x, y);
                    *p = p.map(|v| v * (1.0 - darkness * cover));
                }
            }
        }
    }
    (canvas, face)
}

fn composite_blemishes(rng: &mut ChaCha8Rng, canvas: &mut Canvas, face: &Face, spec: &BlemishSpec) {
    let rf = canvas.r as f64;
    let r = canvas.r;
    // Spots: hard-edged discs whose opacity never drops below one half.
    let mut placed: Vec<(f64, f64, f64)> = Vec::new();
    for _ in 0..count(rng, spec.spots) {
        let radius = (uniform(rng, spec.spot_radius) * rf).max(1.0);
        let amp = uniform(rng, spec.spot_strength);
        let mut centre = face.sample_inside(rng, radius + 1.0);
        for _ in 0..200 {
            if placed.iter().all(|&(x, y, pr)| ((x - centre.0).powi(2) + (y - centre.1).powi(2)).sqrt() > pr + radius + 2.0) {
                break;
            }
            centre = face.sample_inside(rng, radius + 1.0);
        }
        placed.push((centre.0, centre.1, radius));
        let shift = [-0.35 * amp, -amp, -0.8 * amp];
        for y in 0..r {
            for x in 0..r {
                let d = ((x as f64 + 0.5 - centre.0).powi(2) + (y as f64 + 0.5 - centre.1).powi(2)).sqrt();
                if d <= radius {
                    let alpha = 1.0 - 0.5 * (d / radius).powi(2);
                    let p = canvas.at(x, y);
                    *p = std::array::from_fn(|c| p[c] + alpha * shift[c]);
                }
            }
        }
    }
    for _ in 0..count(rng, spec.scratches) {
        let len = uniform(rng, spec.scratch_length) * rf;
        let half_w = (uniform(rng, spec.scratch_width) * rf).max(1.0) / 2.0;
        let amp = uniform(rng, spec.spot_strength) * 0.8;
        let a = face.sample_inside(rng, 1.0);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let b = (a.0 + len * theta.cos(), a.1 + len * theta.sin());
        let shift = [-0.2 * amp, -0.75 * amp, -0.6 * amp];
        for y in 0..r {
            for x in 0..r {
                let p0 = (x as f64 + 0.5, y as f64 + 0.5);
                if segment_distance(p0, a, b) <= half_w && face.radial(p0.0, p0.1) < 1.0 {
                    let p = canvas.at(x, y);
                    *p = std::array::from_fn(|c| p[c] + shift[c]);
                }
            }
        }
    }
    for _ in 0..count(rng, spec.reflections) {
        let radius = (uniform(rng, spec.reflection_radius) * rf).max(1.0);
        let gain = uniform(rng, spec.reflection_strength);
        let centre = face.sample_inside(rng, radius);
        for y in 0..r {
            for x in 0..r {
                let d = ((x as f64 + 0.5 - centre.0).powi(2) + (y as f64 + 0.5 - centre.1).powi(2)).sqrt();
                if d <= radius {
                    let alpha = gain * (1.0 - (d / radius).powi(2));
                    let p = canvas.at(x, y);
                    *p = p.map(|v| v + alpha * (1.0 - v));
                }
            }
        }
    }
}

fn to_image(levels: &[[u8; 3]], r: usize) -> ImageTensor {
    let flat: Vec<u8> = levels.iter().flatten().copied().collect();
    ImageTensor::from_rgb8(r, r, &flat).expect("square canvas")
}

/// Generates one deterministic blemished/clean pair at `resolution`.
pub fn synth_pair(seed: u64, spec: &BlemishSpec, resolution: usize) -> Result<PairedSample> {
    spec.validate()?;
    if resolution < 8 {
        return Err(Error::Config(format!("synthetic resolution {resolution} is below 8")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[seed]));
    let (mut canvas, face) = draw_clean(&mut rng, resolution, spec.texture);
    let clean = canvas.to_levels();
    composite_blemishes(&mut rng, &mut canvas, &face, spec);
    let mut raw = canvas.to_levels();
    let mut bits = vec![false; resolution * resolution];
    for ((r, c), bit) in raw.iter_mut().zip(&clean).zip(&mut bits) {
        let delta = (0..3).map(|k| r[k].abs_diff(c[k])).max().unwrap_or(0);
        if delta <= 1 {
            *r = *c;
        } else {
            *bit = true;
        }
    }
    PairedSample::new(
        format!("synth-{seed}"),
        to_image(&raw, resolution),
        to_image(&clean, resolution),
        Some(BinaryMask::new(resolution, resolution, bits)?),
    )
}
