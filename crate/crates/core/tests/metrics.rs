//! Metric oracles and report behaviour.

mod common;

use retouch_core::data::{synth_pair, BlemishSpec, ImageTensor, PairedSample};
use retouch_core::eval::{
    changed_pixel_ratio, evaluate_samples, perceptual_distance, psnr, ssim, MetricRows, CHANGE_TAU,
};
use retouch_core::perceptual::ConvPyramid;
use retouch_core::tensor::Array;
use retouch_core::{Retoucher, StrengthSpec};

#[test]
fn ssim_matches_brute_force_oracle() {
    assert_eq!(common::check_ssim_oracle(7, 20), Ok(()));
}

#[test]
fn ssim_closed_forms() {
    let a = ImageTensor::filled(16, 16, -1.0);
    let b = ImageTensor::filled(16, 16, 1.0);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    // Constant patches: SSIM = (2·0·1 + C1)/(0 + 1 + C1) · (C2/C2).
    let c1 = 0.01f64.powi(2);
    let v = ssim(&a, &b).unwrap();
    assert!((v - c1 / (1.0 + c1)).abs() < 1e-12);
    assert!(v > 0.0 && v < 2e-4);
    assert!(ssim(&ImageTensor::filled(8, 8, 0.0), &ImageTensor::filled(8, 8, 0.0)).is_err());
}

#[test]
fn psnr_reference_points() {
    assert_eq!(common::check_psnr_reference(), Ok(()));
    let a = ImageTensor::filled(4, 4, -1.0);
    let b = ImageTensor::filled(4, 4, 1.0);
    assert_eq!(psnr(&a, &a).unwrap(), 100.0);
    assert_eq!(psnr(&a, &b).unwrap(), 0.0);
    let mut r = common::rng(3);
    let (x, y) = (common::random_image(8, 8, &mut r), common::random_image(8, 8, &mut r));
    assert_eq!(psnr(&x, &y).unwrap(), psnr(&y, &x).unwrap());
}

#[test]
fn changed_ratio_equals_mask_area() {
    assert_eq!(common::check_changed_ratio_matches_mask(0..30), Ok(()));
    let a = ImageTensor::filled(4, 4, -1.0);
    assert_eq!(changed_pixel_ratio(&a, &a, CHANGE_TAU).unwrap(), 0.0);
    let inverted = ImageTensor::new(a.array().map(|v| -v)).unwrap();
    assert_eq!(changed_pixel_ratio(&a, &inverted, CHANGE_TAU).unwrap(), 1.0);
}

#[test]
fn perceptual_distance_properties() {
    let ex = ConvPyramid::default();
    let mut r = common::rng(5);
    let a = common::random_image(32, 32, &mut r);
    let b = common::random_image(32, 32, &mut r);
    assert_eq!(perceptual_distance(&a, &a, &ex).unwrap(), 0.0);
    let (ab, ba) = (perceptual_distance(&a, &b, &ex).unwrap(), perceptual_distance(&b, &a, &ex).unwrap());
    assert!(ab > 0.0);
    assert!((ab - ba).abs() <= 1e-6 * ab);
}

/// Fixed noise pattern at amplitudes 0.02..0.1 on a smooth synthetic face.
#[test]
fn perceptual_distance_monotone_in_noise() {
    let ex = ConvPyramid::default();
    let base = synth_pair(1, &BlemishSpec::none(), 32).unwrap().clean;
    let noise = common::uniform(&[3, 32, 32], -1.0, 1.0, &mut common::rng(9));
    let mut prev = 0.0;
    for k in 1..=5 {
        let amp = 0.02 * k as f64;
        let data: Vec<f32> =
            base.data().iter().zip(noise.data()).map(|(&x, &n)| (x as f64 + amp * n).clamp(-1.0, 1.0) as f32).collect();
        let noisy = ImageTensor::new(Array::from_vec(&[3, 32, 32], data)).unwrap();
        let d = perceptual_distance(&base, &noisy, &ex).unwrap();
        assert!(d > prev, "amplitude {amp}: {d} <= {prev}");
        prev = d;
    }
}

#[test]
fn report_aggregates_and_baseline() {
    let samples: Vec<PairedSample> =
        (0..5).map(|k| synth_pair(k, &BlemishSpec::default(), 16).unwrap()).collect();
    let model = Retoucher::<f32>::new(common::tiny_model_config(3), 0).unwrap();
    let ex = ConvPyramid::default();
    let report = evaluate_samples(&model, &samples, &ex, &StrengthSpec::default(), "cfg").unwrap();
    assert_eq!(report.model.rows.len(), 5);
    let recomputed = MetricRows::new(report.model.rows.clone());
    assert_eq!(recomputed.mean, report.model.mean);
    for (row, s) in report.baseline.rows.iter().zip(&samples) {
        assert_eq!(row.psnr_db, psnr(&s.raw, &s.clean).unwrap());
    }
    let again = evaluate_samples(&model, &samples, &ex, &StrengthSpec::default(), "cfg").unwrap();
    assert_eq!(report, again);
    assert!(evaluate_samples(&model, &[], &ex, &StrengthSpec::default(), "cfg").is_err());
    let dir = tempfile::tempdir().unwrap();
    let (json, csv) = report.write(&dir.path().join("r")).unwrap();
    assert!(json.exists());
    let text = std::fs::read_to_string(csv).unwrap();
    assert!(text.starts_with("row,id,psnr_db"));
    assert!(text.contains("baseline_mean"));
}
