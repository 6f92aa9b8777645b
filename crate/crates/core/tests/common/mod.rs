//! Independent oracles and check routines shared by the integration tests
//! and the acceptance harness. Each check returns `Err(description)` on the
//! first violation.

#![allow(dead_code)]

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use retouch_core::bafs::{masked_blend, strength_adjust, two_way_softmax, BafsUnit};
use retouch_core::data::{augment, synth_pair, BlemishSpec, ImageTensor};
use retouch_core::encoder::SemanticEncoder;
use retouch_core::eval::{changed_pixel_ratio, psnr, psnr_from_mse, ssim, CHANGE_TAU};
use retouch_core::gp::{GanPrior, GpConfig};
use retouch_core::layers::init_params;
use retouch_core::perceptual::ConvPyramid;
use retouch_core::tensor::gradcheck::{check_inputs, check_params, check_params_split, GradCheckOptions, GradCheckReport};
use retouch_core::tensor::{Array, ParamStore, Tape, Var};
use retouch_core::train::{
    loss_adversarial_d, loss_adversarial_g, loss_l1, loss_perceptual, r1_penalty, r1_step, r1_surrogate, DiscConfig,
    Discriminator,
};
use retouch_core::{BlendMode, EncoderConfig, ModelConfig, Retoucher, StrengthSpec};

pub type Check = Result<(), String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Array<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Array::from_f64_slice(shape, &v)
}

pub fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> ImageTensor {
    let px: Vec<u8> = (0..h * w * 3).map(|_| rng.random()).collect();
    ImageTensor::from_rgb8(w, h, &px).unwrap()
}

/// Tiny model used by the shape and bit-exactness checks.
pub fn tiny_model_config(levels: usize) -> ModelConfig {
    ModelConfig {
        gp: GpConfig { levels, latent_dim: 4, channel_base: 2, channel_max: 4, ..GpConfig::default() },
        encoder: EncoderConfig { channel_base: 2, channel_max: 4 },
        ..ModelConfig::default()
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- masks

/// The pair `(σ(a−b), σ(b−a))` produced by swapping logits sums to one, and
/// matches a direct two-element softmax.
pub fn check_mask_complementarity(seed: u64, cases: usize) -> Check {
    let mut r = rng(seed);
    for _ in 0..cases {
        let a = uniform(&[2, 5, 3, 3], -12.0, 12.0, &mut r);
        let b = uniform(&[2, 5, 3, 3], -12.0, 12.0, &mut r);
        let tape = Tape::<f64>::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let m = two_way_softmax(va, vb).value();
        let partner = two_way_softmax(vb, va).value();
        for i in 0..a.len() {
            let (x, y) = (a.data()[i], b.data()[i]);
            let direct = x.exp() / (x.exp() + y.exp());
            let (mi, pi) = (m.data()[i], partner.data()[i]);
            ensure(mi > 0.0 && mi < 1.0, || format!("mask {mi} not strictly inside (0,1)"))?;
            ensure((mi + pi - 1.0).abs() <= 2.0 * f64::EPSILON, || format!("{mi} + {pi} != 1"))?;
            ensure((mi - direct).abs() <= 1e-15, || format!("mask {mi} vs softmax {direct}"))?;
        }
    }
    Ok(())
}

/// Effective weights of `F_S` and `F_I` recovered from the blend itself.
fn blend_weights(ms: f64, mc: f64, strength: Option<f64>) -> (f64, f64) {
    let tape = Tape::<f64>::new();
    let c = |v: f64| tape.constant(Array::from_f64_slice(&[1, 1, 1, 1], &[v]));
    let run = |s: f64, i: f64| {
        masked_blend(c(s), c(i), Some(c(ms)), Some(c(mc)), strength).unwrap().item()
    };
    (run(1.0, 0.0), run(0.0, 1.0))
}

/// Both weights lie in [0,1] and sum to `1 − M_S − M_C + 2 M_S M_C ∈ (0,1]`.
pub fn check_blend_weight_bounds(seed: u64, cases: usize) -> Check {
    let mut r = rng(seed);
    for _ in 0..cases {
        let ms: f64 = r.random_range(1e-9..1.0);
        let mc: f64 = r.random_range(1e-9..1.0);
        let (ws, wi) = blend_weights(ms, mc, None);
        ensure((0.0..=1.0).contains(&ws) && (0.0..=1.0).contains(&wi), || format!("weights {ws}, {wi} for {ms}, {mc}"))?;
        let identity = 1.0 - ms - mc + 2.0 * ms * mc;
        ensure((ws + wi - identity).abs() <= 4.0 * f64::EPSILON, || format!("sum {} vs {identity}", ws + wi))?;
        ensure(identity > 0.0 && identity <= 1.0, || format!("sum identity {identity} outside (0,1]"))?;
    }
    Ok(())
}

pub fn check_scalar_hand_case() -> Check {
    let tape = Tape::<f64>::new();
    let c = |v: f64| tape.constant(Array::from_f64_slice(&[1, 1, 1, 1], &[v]));
    let out = masked_blend(c(2.0), c(4.0), Some(c(0.75)), Some(c(0.5)), None).map_err(|e| e.to_string())?.item();
    ensure(out == 1.25, || format!("scalar blend {out} != 1.25"))
}

/// `w_GP(s)` is non-decreasing in `s`, and on the unclamped range the blend
/// is affine in `w_GP`.
pub fn check_strength_monotonicity(seed: u64, cases: usize) -> Check {
    let mut r = rng(seed);
    let grid: Vec<f64> = (0..=40).map(|k| k as f64 * 0.1).collect();
    for _ in 0..cases {
        let mc = uniform(&[1, 6, 1, 1], 0.0, 1.0, &mut r);
        let mut prev: Option<Array<f64>> = None;
        for &s in &grid {
            let tape = Tape::<f64>::new();
            let (_, w_gp) = strength_adjust(tape.constant(mc.clone()), s).map_err(|e| e.to_string())?;
            let w = w_gp.value().as_ref().clone();
            if let Some(p) = &prev {
                for (a, b) in p.data().iter().zip(w.data()) {
                    ensure(b >= a, || format!("w_GP decreased from {a} to {b} at s={s}"))?;
                }
            }
            prev = Some(w);
        }
        // Affinity: on scalars with s(1−M_C) < 1, F_Blend = M_S·(1−w)·F_S + (1−M_S)·w·F_I.
        let (ms, m): (f64, f64) = (r.random_range(0.0..1.0), r.random_range(0.5..1.0));
        let (fs, fi): (f64, f64) = (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
        for s in [0.0, 0.5, 1.5, 1.9] {
            let tape = Tape::<f64>::new();
            let c = |v: f64| tape.constant(Array::from_f64_slice(&[1, 1, 1, 1], &[v]));
            let out = masked_blend(c(fs), c(fi), Some(c(ms)), Some(c(m)), Some(s)).unwrap().item();
            let w = s * (1.0 - m);
            let expect = ms * (1.0 - w) * fs + (1.0 - ms) * w * fi;
            ensure((out - expect).abs() < 1e-12, || format!("blend {out} vs affine {expect} at s={s}"))?;
        }
    }
    Ok(())
}

/// `augment` is exact at λ = 0 and 1 on synthesized pairs.
pub fn check_augment_endpoints(seeds: std::ops::Range<u64>) -> Check {
    for seed in seeds {
        let s = synth_pair(seed, &BlemishSpec::default(), 32).map_err(|e| e.to_string())?;
        let a0 = augment(&s, 0.0).map_err(|e| e.to_string())?;
        let a1 = augment(&s, 1.0).map_err(|e| e.to_string())?;
        ensure(a0 == s.clean, || format!("λ=0 differs from clean for seed {seed}"))?;
        ensure(a1 == s.raw, || format!("λ=1 differs from raw for seed {seed}"))?;
    }
    Ok(())
}

/// Full-model output at strength 1 equals the plain forward bit for bit.
pub fn check_strength_one_bit_exact(seed: u64) -> Check {
    let model = Retoucher::<f32>::new(tiny_model_config(4), seed).map_err(|e| e.to_string())?;
    let mut r = rng(seed);
    let img = random_image(32, 32, &mut r);
    let batch = ImageTensor::stack(&[&img]).unwrap();
    let plain = model.infer_raw(&batch, None).map_err(|e| e.to_string())?;
    let via_some = model.infer_raw(&batch, Some(1.0)).map_err(|e| e.to_string())?;
    ensure(plain == via_some, || "forward with strength 1 differs from the plain forward".into())?;
    let (a, _) = model.retouch(&batch, &StrengthSpec::new(1.0).unwrap(), false).map_err(|e| e.to_string())?;
    let (b, _) = model.retouch(&batch, &StrengthSpec::default(), false).map_err(|e| e.to_string())?;
    ensure(a == b, || "retouch at strength 1 differs from the default".into())?;
    let (c, _) = model.retouch(&batch, &StrengthSpec::new(2.0).unwrap(), false).map_err(|e| e.to_string())?;
    ensure(c != a, || "strength 2 has no effect".into())
}

/// Feature, mask and output shapes follow `2^(L+2−i)` for L ∈ {4, 5} with a
/// real forward, and for L = 9 from the configuration alone.
pub fn check_shape_pyramid(levels: usize) -> Check {
    let expect_res = |i: usize| 1usize << (levels + 2 - i);
    if levels == 9 {
        let g = GpConfig::stylegan2_ffhq_1024();
        ensure(g.num_slices() == 18 && g.latent_dim == 512, || "L=9 latent is not 18x512".into())?;
        ensure(g.output_resolution() == 1024, || "L=9 output is not 1024".into())?;
        for i in 1..=9 {
            ensure(g.feature_shape(i)[1] == expect_res(i), || format!("L=9 level {i} resolution"))?;
            ensure(g.resolution(9) == 4, || "top level is not 4x4".into())?;
        }
        let enc = SemanticEncoder::new(&EncoderConfig::default(), &g).map_err(|e| e.to_string())?;
        ensure(enc.input_resolution() == 1024, || "L=9 encoder input".into())?;
        return Ok(());
    }
    let config = tiny_model_config(levels);
    let model = Retoucher::<f32>::new(config.clone(), 1).map_err(|e| e.to_string())?;
    let r = 1usize << (levels + 1);
    let mut g = rng(levels as u64);
    let img = random_image(r, r, &mut g);
    let batch = ImageTensor::stack(&[&img, &img]).unwrap();
    let tape = Tape::<f32>::new();
    let x = tape.constant(batch.clone());
    let enc = model.encoder().forward(&tape, model.params(), x).map_err(|e| e.to_string())?;
    for i in 1..levels {
        let s = enc.semantic_map(i).shape();
        ensure(s == vec![2, config.gp.channels(i + 1), r >> i, r >> i], || format!("F^{i}_S shape {s:?}"))?;
    }
    ensure(enc.top().shape()[2..] == [4, 4], || "top encoder map is not 4x4".into())?;
    let latent = model.encoder().latent_head(&tape, model.params(), enc.top()).map_err(|e| e.to_string())?;
    ensure(latent.shape() == vec![2, 2 * levels * 4], || format!("latent shape {:?}", latent.shape()))?;
    let injected: BTreeMap<usize, Var<'_, f32>> = (1..levels)
        .map(|i| {
            let [c, h, w] = config.gp.unit_input_shape(i);
            (i, tape.constant(Array::zeros(&[2, c, h, w])))
        })
        .collect();
    let out = model.gp().forward(&tape, model.params(), latent, &injected).map_err(|e| e.to_string())?;
    for (&i, f) in &out.features {
        let s = f.shape();
        ensure(s == vec![2, config.gp.channels(i), expect_res(i), expect_res(i)], || format!("F^{i}_I shape {s:?}"))?;
    }
    ensure(out.image.shape() == vec![2, 3, r, r], || "image shape".into())?;
    let (_, diag) = model.retouch(&batch, &StrengthSpec::default(), false).map_err(|e| e.to_string())?;
    ensure(diag.spatial_masks.len() == levels - 1, || "spatial mask count".into())?;
    for (&i, m) in &diag.spatial_masks {
        ensure(m.shape() == [2, 1, r >> i, r >> i], || format!("M^{i}_S shape {:?}", m.shape()))?;
    }
    for (&i, m) in &diag.channel_masks {
        ensure(m.shape() == [2, config.gp.channels(i + 1), 1, 1], || format!("M^{i}_C shape {:?}", m.shape()))?;
    }
    Ok(())
}

// ---------------------------------------------------------------- gradients

pub const GRAD_TIGHT: f64 = 1e-3;
pub const GRAD_FRACTION: f64 = 0.95;
pub const GRAD_LOOSE: f64 = 1e-2;

pub fn grad_opts() -> GradCheckOptions {
    GradCheckOptions { step: 1e-5, floor: 1e-7, max_coords: 24 }
}

pub fn verdict(label: &str, report: &GradCheckReport) -> Check {
    // Guards against a vacuous pass where both sides are zero.
    let live = report.coords.iter().filter(|c| c.numeric.abs() > 1e-6).count();
    if live * 2 < report.coords.len() {
        return Err(format!("{label}: only {live}/{} coordinates have a non-zero gradient", report.coords.len()));
    }
    if report.passes(GRAD_TIGHT, GRAD_FRACTION, GRAD_LOOSE) {
        Ok(())
    } else {
        Err(format!(
            "{label}: {:.3} within {GRAD_TIGHT}, max rel err {:.3e} at {:?}",
            report.fraction_within(GRAD_TIGHT),
            report.max_rel_error(),
            report.worst()
        ))
    }
}

/// Fixed random projection turning a tensor into a scalar loss.
fn project<'t>(tape: &'t Tape<f64>, v: Var<'t, f64>, seed: u64) -> Var<'t, f64> {
    let shape = v.shape();
    let w = uniform(&shape, -1.0, 1.0, &mut rng(seed));
    v.mul(tape.constant(w)).sum_all()
}

fn store_for(specs: &[retouch_core::layers::ParamSpec], seed: u64) -> ParamStore<f64> {
    let mut store: ParamStore<f64> = init_params(specs, &mut rng(seed));
    // Non-zero biases so their gradients are exercised too.
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut r = rng(seed ^ 0xb1a5);
    for n in names {
        if n.ends_with(".bias") {
            let a = store.get_mut(&n).unwrap();
            for v in a.data_mut() {
                *v += r.random_range(-0.3..0.3);
            }
        }
    }
    store
}

pub fn check_bafs_gradients(mode: BlendMode, strength: Option<f64>) -> Check {
    let unit = BafsUnit::new(2, 3, mode);
    let store = store_for(&unit.specs(), 11);
    let mut r = rng(12);
    let fs = uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut r);
    let fi = uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut r);
    let mut report = check_params(&store, &[], grad_opts(), |tape, s| {
        let out = unit.forward(tape, s, tape.constant(fs.clone()), tape.constant(fi.clone()), strength).unwrap();
        project(tape, out.blend, 5)
    });
    let p = store.clone();
    report.merge(check_inputs(&[fs.clone(), fi.clone()], grad_opts(), |tape, v| {
        let out = unit.forward(tape, &p, v[0], v[1], strength).unwrap();
        project(tape, out.blend, 5)
    }));
    verdict(&format!("bafs_fuse {mode}"), &report)
}

fn tiny_gp() -> GpConfig {
    GpConfig { levels: 3, latent_dim: 4, channel_base: 2, channel_max: 3, ..GpConfig::default() }
}

/// Level-2 unit of a 3-level backbone: weights, latents, input and the RGB
/// accumulator.
pub fn check_gp_unit_gradients() -> Check {
    let g = tiny_gp();
    let gp = GanPrior::new(g.clone()).map_err(|e| e.to_string())?;
    let store = store_for(&gp.specs(), 21);
    let names: Vec<String> = store.names().filter(|n| n.starts_with("gp.level2.")).map(str::to_string).collect();
    ensure(!names.is_empty(), || "no level-2 parameters".into())?;
    let level = 2;
    let [c, h, w] = g.unit_input_shape(level);
    let mut r = rng(22);
    let x = uniform(&[2, c, h, w], -1.0, 1.0, &mut r);
    let la = uniform(&[2, 4], -1.0, 1.0, &mut r);
    let lb = uniform(&[2, 4], -1.0, 1.0, &mut r);
    let acc = uniform(&[2, 3, h, w], -1.0, 1.0, &mut r);
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut report = check_params(&store, &name_refs, grad_opts(), |tape, s| {
        let out = gp
            .unit_forward(
                tape,
                s,
                level,
                tape.constant(x.clone()),
                tape.constant(la.clone()),
                tape.constant(lb.clone()),
                Some(tape.constant(acc.clone())),
            )
            .unwrap();
        project(tape, out.features, 7).add(project(tape, out.rgb, 8))
    });
    report.merge(check_inputs(&[x.clone(), la.clone(), lb.clone(), acc.clone()], grad_opts(), |tape, v| {
        let out = gp.unit_forward(tape, &store, level, v[0], v[1], v[2], Some(v[3])).unwrap();
        project(tape, out.features, 7).add(project(tape, out.rgb, 8))
    }));
    verdict("GP unit", &report)
}

/// Unit 2 of a 3-level encoder (stride-2 convs and the semantic head), plus
/// the latent head.
pub fn check_se_unit_gradients() -> Check {
    let g = tiny_gp();
    let enc = SemanticEncoder::new(&EncoderConfig { channel_base: 2, channel_max: 3 }, &g).map_err(|e| e.to_string())?;
    let store = store_for(&enc.specs(), 31);
    let names: Vec<String> = store
        .names()
        .filter(|n| n.starts_with("se.unit2.") || n.starts_with("se.semantic1.") || n.starts_with("leh."))
        .map(str::to_string)
        .collect();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let img = uniform(&[2, 3, 16, 16], -1.0, 1.0, &mut rng(32));
    let mut report = check_params(&store, &name_refs, grad_opts(), |tape, s| {
        let st = enc.forward(tape, s, tape.constant(img.clone())).unwrap();
        let code = enc.latent_head(tape, s, st.top()).unwrap();
        project(tape, st.semantic_map(1), 9).add(project(tape, code, 10))
    });
    report.merge(check_inputs(&[img.clone()], grad_opts(), |tape, v| {
        let st = enc.forward(tape, &store, v[0]).unwrap();
        project(tape, st.semantic_map(1), 9)
    }));
    verdict("SE unit", &report)
}

pub fn check_l1_gradients() -> Check {
    let mut r = rng(41);
    let a = uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut r);
    let b = uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut r);
    let report = check_inputs(&[a, b], grad_opts(), |_, v| loss_l1(v[0], v[1]).unwrap());
    verdict("l1 loss", &report)
}

pub fn check_perceptual_gradients() -> Check {
    let ex = ConvPyramid::new(&[3, 4], 5);
    let mut r = rng(42);
    let a = uniform(&[2, 3, 8, 8], -1.0, 1.0, &mut r);
    let b = uniform(&[2, 3, 8, 8], -1.0, 1.0, &mut r);
    let report = check_inputs(&[a, b], grad_opts(), |_, v| loss_perceptual(v[0], v[1], &ex).unwrap());
    verdict("perceptual loss", &report)
}

fn tiny_disc() -> (Discriminator, ParamStore<f64>) {
    let d = Discriminator::new(&DiscConfig { channel_base: 2, channel_max: 4 }, 8).unwrap();
    let store = store_for(&d.specs(), 51);
    (d, store)
}

pub fn check_adversarial_gradients() -> Check {
    let mut r = rng(52);
    let logits = uniform(&[4, 1], -3.0, 3.0, &mut r);
    let real = uniform(&[4, 1], -3.0, 3.0, &mut r);
    verdict("adv_g (logits)", &check_inputs(&[logits.clone()], grad_opts(), |_, v| loss_adversarial_g(v[0]).unwrap()))?;
    verdict(
        "adv_d (logits)",
        &check_inputs(&[real, logits], grad_opts(), |_, v| loss_adversarial_d(v[0], v[1]).unwrap()),
    )?;
    let (d, store) = tiny_disc();
    let xr = uniform(&[2, 3, 8, 8], -1.0, 1.0, &mut r);
    let xf = uniform(&[2, 3, 8, 8], -1.0, 1.0, &mut r);
    let report = check_params(&store, &[], grad_opts(), |tape, s| {
        let lr = d.forward(tape, s, tape.constant(xr.clone())).unwrap();
        let lf = d.forward(tape, s, tape.constant(xf.clone())).unwrap();
        loss_adversarial_d(lr, lf).unwrap()
    });
    verdict("adv_d (discriminator weights)", &report)?;
    let report = check_inputs(&[xf.clone()], grad_opts(), |tape, v| {
        loss_adversarial_g(d.forward(tape, &store, v[0]).unwrap()).unwrap()
    });
    verdict("adv_g (generated image)", &report)
}

/// The surrogate's parameter gradient against finite differences of the
/// exact R1 value.
pub fn check_r1_gradients() -> Check {
    let (d, store) = tiny_disc();
    let real = uniform(&[2, 3, 8, 8], -1.0, 1.0, &mut rng(53));
    let report = check_params_split(
        &store,
        &[],
        grad_opts(),
        |tape, s| {
            let (_, v) = r1_penalty(&d, s, &real).unwrap();
            let eps = r1_step(&v, 1e-4);
            r1_surrogate(tape, &d, s, &real, &v, eps).unwrap()
        },
        |s| r1_penalty(&d, s, &real).unwrap().0,
    );
    verdict("r1 penalty", &report)
}

// ---------------------------------------------------------------- metrics

/// Brute-force SSIM: every 11x11 window evaluated directly with a 2-D
/// Gaussian built from its own formula.
pub fn ssim_oracle(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let (w, h) = (a.width(), a.height());
    let lum = |img: &ImageTensor, x: usize, y: usize| {
        let d = img.data();
        let p = w * h;
        let v = |c: usize| (d[c * p + y * w + x] as f64 + 1.0) / 2.0;
        0.299 * v(0) + 0.587 * v(1) + 0.114 * v(2)
    };
    let mut kernel = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in kernel.iter_mut().enumerate() {
        for (j, k) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *k = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *k;
        }
    }
    let (c1, c2) = (0.01f64 * 0.01, 0.03f64 * 0.03);
    let mut sum = 0.0;
    let mut count = 0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = kernel[i][j] / total;
                    let (p, q) = (lum(a, x0 + j, y0 + i), lum(b, x0 + j, y0 + i));
                    mx += k * p;
                    my += k * q;
                    sxx += k * p * p;
                    syy += k * q * q;
                    sxy += k * p * q;
                }
            }
            let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    sum / count as f64
}

pub fn check_ssim_oracle(seed: u64, pairs: usize) -> Check {
    let mut r = rng(seed);
    for k in 0..pairs {
        let a = random_image(16, 16, &mut r);
        // Correlated partner so SSIM values spread over a useful range.
        let noise = random_image(16, 16, &mut r);
        let t = k as f32 / pairs as f32;
        let mixed: Vec<f32> = a.data().iter().zip(noise.data()).map(|(x, y)| (1.0 - t) * x + t * y).collect();
        let b = ImageTensor::new(Array::from_vec(&[3, 16, 16], mixed)).unwrap();
        let got = ssim(&a, &b).map_err(|e| e.to_string())?;
        let want = ssim_oracle(&a, &b);
        ensure((got - want).abs() <= 1e-6, || format!("pair {k}: ssim {got} vs oracle {want}"))?;
    }
    Ok(())
}

pub fn check_psnr_reference() -> Check {
    ensure(psnr_from_mse(0.01) == 20.0, || format!("psnr(mse=0.01) = {}", psnr_from_mse(0.01)))?;
    // Images 0.1 apart on the [0,1] scale: 0 and 0.1 map to -1 and -0.8.
    let a = ImageTensor::filled(8, 8, -1.0);
    let b = ImageTensor::filled(8, 8, -0.8);
    let p = psnr(&a, &b).map_err(|e| e.to_string())?;
    ensure((p - 20.0).abs() < 1e-5, || format!("psnr of a 0.1 offset = {p}"))
}

pub fn check_changed_ratio_matches_mask(seeds: std::ops::Range<u64>) -> Check {
    for seed in seeds {
        let s = synth_pair(seed, &BlemishSpec::default(), 64).map_err(|e| e.to_string())?;
        let mask = s.blemish_mask.as_ref().ok_or("synthesized pair has no mask")?;
        let ratio = changed_pixel_ratio(&s.clean, &s.raw, CHANGE_TAU).map_err(|e| e.to_string())?;
        ensure(ratio == mask.area_ratio(), || format!("seed {seed}: ratio {ratio} vs mask area {}", mask.area_ratio()))?;
    }
    Ok(())
}

/// 8-connected components of a boolean raster, by breadth-first search.
pub fn connected_components(on: &[bool], w: usize, h: usize) -> usize {
    let mut seen = vec![false; on.len()];
    let mut count = 0;
    for start in 0..on.len() {
        if !on[start] || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            let (x, y) = ((p % w) as i64, (p / w) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if on[q] && !seen[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
    }
    count
}

/// Pixels whose largest channel difference exceeds one 8-bit level.
pub fn diff_raster(a: &ImageTensor, b: &ImageTensor) -> Vec<bool> {
    let (pa, pb) = (a.to_rgb8(), b.to_rgb8());
    pa.chunks(3).zip(pb.chunks(3)).map(|(x, y)| x.iter().zip(y).any(|(u, v)| u.abs_diff(*v) > 1)).collect()
}
