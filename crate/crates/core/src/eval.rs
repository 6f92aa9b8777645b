//! Retouching-quality metrics and dataset reports.
//!
//! All metrics work on the `[0, 1]` scale obtained from the internal
//! `[-1, 1]` range.

use std::fs;
use std::path::{Path, PathBuf};

use retouch_tensor::{Array, Tape};
use serde::{Deserialize, Serialize};

use crate::bafs::StrengthSpec;
use crate::data::{ImageTensor, PairedSample};
use crate::error::{Error, Result};
use crate::model::Retoucher;
use crate::perceptual::{feature_mse, FeatureExtractor};

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Default changed-pixel threshold: one 8-bit level.
pub const CHANGE_TAU: f64 = 1.0 / 255.0;
pub const REPORT_SCHEMA: u32 = 1;

fn same_shape(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.array().shape() != b.array().shape() {
        return Err(Error::contract("metric inputs", a.array().shape(), b.array().shape()));
    }
    Ok(())
}

fn unit(v: f32) -> f64 {
    (v as f64 + 1.0) / 2.0
}

/// Mean squared error on the `[0, 1]` scale.
pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_shape(a, b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (unit(x) - unit(y)).powi(2)).sum();
    Ok(sum / a.data().len() as f64)
}

/// `10·log10(1 / mse)`, capped at 100 dB.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// Luma plane `0.299 R + 0.587 G + 0.114 B` on the `[0, 1]` scale.
pub fn luma(img: &ImageTensor) -> Vec<f64> {
    let plane = img.width() * img.height();
    let d = img.data();
    (0..plane).map(|p| 0.299 * unit(d[p]) + 0.587 * unit(d[plane + p]) + 0.114 * unit(d[2 * plane + p])).collect()
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        *t = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.map(|t| t / s)
}

/// Valid-mode separable filtering of a `w x h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all valid 11x11 Gaussian windows of the luma planes.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_shape(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Argument(format!("SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}")));
    }
    let (x, y) = (luma(a), luma(b));
    let taps = gaussian_taps();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mu_x = filter_valid(&x, w, h, &taps);
    let mu_y = filter_valid(&y, w, h, &taps);
    let xx = filter_valid(&prod(&x, &x), w, h, &taps);
    let yy = filter_valid(&prod(&y, &y), w, h, &taps);
    let xy = filter_valid(&prod(&x, &y), w, h, &taps);
    let (c1, c2) = ((SSIM_K1).powi(2), (SSIM_K2).powi(2));
    let n = mu_x.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let (vx, vy, cxy) = (xx[i] - mx * mx, yy[i] - my * my, xy[i] - mx * my);
            ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Feature-space distance under `extractor`; symmetric and zero for equal
/// features.
pub fn perceptual_distance(a: &ImageTensor, b: &ImageTensor, extractor: &dyn FeatureExtractor<f32>) -> Result<f64> {
    same_shape(a, b)?;
    let tape = Tape::new();
    let shape = [1, 3, a.height(), a.width()];
    let va = tape.constant(a.array().clone().reshape(&shape));
    let vb = tape.constant(b.array().clone().reshape(&shape));
    Ok(feature_mse(extractor, &tape, va, vb)?.item() as f64)
}

/// Fraction of pixels whose largest channel change exceeds `tau` (on the
/// `[0, 1]` scale). A tolerance of 1e-4 levels absorbs float rounding, so a
/// change of exactly `tau` does not count.
pub fn changed_pixel_ratio(input: &ImageTensor, output: &ImageTensor, tau: f64) -> Result<f64> {
    same_shape(input, output)?;
    let plane = input.width() * input.height();
    let (a, b) = (input.data(), output.data());
    let limit = tau + 1e-4 / 255.0;
    let changed = (0..plane)
        .filter(|&p| (0..3).any(|c| (unit(a[c * plane + p]) - unit(b[c * plane + p])).abs() > limit))
        .count();
    Ok(changed as f64 / plane as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub perc_dist: f64,
    pub changed_ratio: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub psnr_db: f64,
    pub ssim: f64,
    pub perc_dist: f64,
    pub changed_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRows {
    pub rows: Vec<SampleMetrics>,
    pub mean: Aggregate,
    pub std: Aggregate,
}

impl MetricRows {
    pub fn new(rows: Vec<SampleMetrics>) -> Self {
        let (mean, std) = aggregate(&rows);
        Self { rows, mean, std }
    }
}

fn aggregate(rows: &[SampleMetrics]) -> (Aggregate, Aggregate) {
    let n = rows.len().max(1) as f64;
    let fields: [fn(&SampleMetrics) -> f64; 4] = [|r| r.psnr_db, |r| r.ssim, |r| r.perc_dist, |r| r.changed_ratio];
    let stats: Vec<(f64, f64)> = fields
        .iter()
        .map(|f| {
            let mean = rows.iter().map(f).sum::<f64>() / n;
            let var = rows.iter().map(|r| (f(r) - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        })
        .collect();
    (
        Aggregate { psnr_db: stats[0].0, ssim: stats[1].0, perc_dist: stats[2].0, changed_ratio: stats[3].0 },
        Aggregate { psnr_db: stats[0].1, ssim: stats[1].1, perc_dist: stats[2].1, changed_ratio: stats[3].1 },
    )
}

/// Model row (output vs clean, change measured against the input) beside
/// the baseline row (input vs clean).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub fingerprint: String,
    pub strength: f64,
    pub model: MetricRows,
    pub baseline: MetricRows,
}

/// 64-bit FNV-1a, hex encoded.
pub fn fingerprint(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

fn sample_metrics(
    id: &str,
    candidate: &ImageTensor,
    clean: &ImageTensor,
    input: &ImageTensor,
    extractor: &dyn FeatureExtractor<f32>,
) -> Result<SampleMetrics> {
    Ok(SampleMetrics {
        id: id.to_string(),
        psnr_db: psnr(candidate, clean)?,
        ssim: ssim(candidate, clean)?,
        perc_dist: perceptual_distance(candidate, clean, extractor)?,
        changed_ratio: changed_pixel_ratio(input, candidate, CHANGE_TAU)?,
    })
}

/// Retouches every sample's raw image and scores it against the clean one.
pub fn evaluate_samples(
    model: &Retoucher<f32>,
    samples: &[PairedSample],
    extractor: &dyn FeatureExtractor<f32>,
    strength: &StrengthSpec,
    fingerprint_source: &str,
) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::Argument("cannot evaluate an empty dataset".into()));
    }
    let mut model_rows = Vec::with_capacity(samples.len());
    let mut base_rows = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(16) {
        let batch = ImageTensor::stack(&chunk.iter().map(|s| &s.raw).collect::<Vec<_>>())?;
        let (out, _) = model.retouch(&batch, strength, false)?;
        for (k, s) in chunk.iter().enumerate() {
            // Scored as saved: rounded to 8 bits like every written image.
            let output = ImageTensor::from_batch(&out, k)?.quantized();
            model_rows.push(sample_metrics(&s.id, &output, &s.clean, &s.raw, extractor)?);
            base_rows.push(sample_metrics(&s.id, &s.raw, &s.clean, &s.clean, extractor)?);
        }
    }
    Ok(MetricReport {
        schema_version: REPORT_SCHEMA,
        fingerprint: fingerprint(fingerprint_source),
        strength: strength.factor,
        model: MetricRows::new(model_rows),
        baseline: MetricRows::new(base_rows),
    })
}

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,id,psnr_db,ssim,perc_dist,changed_ratio\n");
        for (label, rows) in [("model", &self.model), ("baseline", &self.baseline)] {
            for r in &rows.rows {
                out += &format!("{label},{},{:.6},{:.6},{:.6},{:.6}\n", r.id, r.psnr_db, r.ssim, r.perc_dist, r.changed_ratio);
            }
        }
        for (label, rows) in [("model", &self.model), ("baseline", &self.baseline)] {
            for (stat, a) in [("mean", &rows.mean), ("std", &rows.std)] {
                out += &format!(
                    "{label}_{stat},*,{:.6},{:.6},{:.6},{:.6}\n",
                    a.psnr_db, a.ssim, a.perc_dist, a.changed_ratio
                );
            }
        }
        out
    }

    /// Writes `<stem>.json` and `<stem>.csv`; returns both paths.
    pub fn write(&self, stem: &Path) -> Result<(PathBuf, PathBuf)> {
        let json = stem.with_extension("json");
        let csv = stem.with_extension("csv");
        if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&json, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&json, e))?;
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        Ok((json, csv))
    }
}

/// Mean absolute difference between two batches.
pub fn mean_abs_diff(a: &Array<f32>, b: &Array<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::contract("mean_abs_diff inputs", a.shape(), b.shape()));
    }
    Ok(a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum::<f64>() / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_reference_points() {
        let zeros = ImageTensor::filled(4, 4, -1.0);
        let ones = ImageTensor::filled(4, 4, 1.0);
        assert_eq!(psnr(&zeros, &zeros).unwrap(), 100.0);
        assert_eq!(psnr(&zeros, &ones).unwrap(), 0.0);
        assert_eq!(psnr_from_mse(0.01), 20.0);
    }

    #[test]
    fn ssim_constant_images() {
        let zeros = ImageTensor::filled(16, 16, -1.0);
        let ones = ImageTensor::filled(16, 16, 1.0);
        assert!((ssim(&zeros, &zeros).unwrap() - 1.0).abs() < 1e-12);
        let c1 = SSIM_K1 * SSIM_K1;
        assert!((ssim(&zeros, &ones).unwrap() - c1 / (1.0 + c1)).abs() < 1e-12);
        assert!(ssim(&ImageTensor::filled(8, 8, 0.0), &ImageTensor::filled(8, 8, 0.0)).is_err());
    }

    #[test]
    fn changed_ratio_extremes() {
        let a = ImageTensor::filled(4, 4, -1.0);
        let b = ImageTensor::filled(4, 4, 1.0);
        assert_eq!(changed_pixel_ratio(&a, &a, CHANGE_TAU).unwrap(), 0.0);
        assert_eq!(changed_pixel_ratio(&a, &b, CHANGE_TAU).unwrap(), 1.0);
    }

    #[test]
    fn fingerprint_is_stable() {
        assert_eq!(fingerprint(""), "cbf29ce484222325");
        assert_ne!(fingerprint("a"), fingerprint("b"));
    }
}
