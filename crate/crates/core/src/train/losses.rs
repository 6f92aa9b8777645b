//! Reconstruction, perceptual and adversarial objectives.

use retouch_tensor::{Array, Element, ParamStore, Tape, Var};

use super::disc::Discriminator;
use crate::error::{Error, Result};
use crate::perceptual::{feature_mse, FeatureExtractor};

fn check_pair<T: Element>(context: &str, a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::contract(context, a.shape(), b.shape()));
    }
    Ok(())
}

fn check_finite<T: Element>(context: &str, v: &Var<'_, T>) -> Result<()> {
    if !v.value().all_finite() {
        return Err(Error::Numeric(format!("{context} has non-finite values")));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn loss_l1<'t, T: Element>(output: Var<'t, T>, target: Var<'t, T>) -> Result<Var<'t, T>> {
    check_pair("l1 loss inputs", &output, &target)?;
    Ok(output.sub(target).abs().mean_all())
}

/// Sum over feature levels of the mean squared feature difference.
pub fn loss_perceptual<'t, T: Element>(
    output: Var<'t, T>,
    target: Var<'t, T>,
    extractor: &dyn FeatureExtractor<T>,
) -> Result<Var<'t, T>> {
    feature_mse(extractor, output.tape(), output, target)
}

/// Non-saturating generator loss `mean softplus(-D(fake))`.
pub fn loss_adversarial_g<'t, T: Element>(fake_logits: Var<'t, T>) -> Result<Var<'t, T>> {
    check_finite("fake logits", &fake_logits)?;
    Ok(fake_logits.neg().softplus().mean_all())
}

/// Logistic discriminator loss `mean softplus(-D(real)) + mean softplus(D(fake))`.
pub fn loss_adversarial_d<'t, T: Element>(real_logits: Var<'t, T>, fake_logits: Var<'t, T>) -> Result<Var<'t, T>> {
    check_finite("real logits", &real_logits)?;
    check_finite("fake logits", &fake_logits)?;
    Ok(real_logits.neg().softplus().mean_all().add(fake_logits.softplus().mean_all()))
}

/// R1 value `mean_n ‖∇_x D(x_n)‖²` and the input gradient `∇_x D`.
pub fn r1_penalty<T: Element>(disc: &Discriminator, store: &ParamStore<T>, real: &Array<T>) -> Result<(f64, Array<T>)> {
    let tape = Tape::new();
    let x = tape.leaf(real.clone());
    let logits = disc.forward(&tape, store, x)?;
    check_finite("real logits", &logits)?;
    let grad = tape.backward(logits.sum_all()).get_or_zeros(x);
    let n = real.dim(0) as f64;
    let value = grad.data().iter().map(|g| g.to_f64_lossy().powi(2)).sum::<f64>() / n;
    Ok((value, grad))
}

/// Finite-difference step `ε` such that `ε·rms(direction) = scale`.
pub fn r1_step<T: Element>(direction: &Array<T>, scale: f64) -> f64 {
    let ms = direction.data().iter().map(|g| g.to_f64_lossy().powi(2)).sum::<f64>() / direction.len().max(1) as f64;
    scale / ms.sqrt().max(1e-12)
}

/// Graph whose parameter gradient approximates that of the R1 value:
/// `(1/N) Σ_n [D(x_n + ε v_n) − D(x_n − ε v_n)] / ε` with `v = ∇_x D`
/// held fixed. Its θ-gradient is `(2/N) Σ_n v_nᵀ ∂_θ ∇_x D(x_n) + O(ε²)`,
/// which is the gradient of `mean_n ‖∇_x D(x_n)‖²`.
pub fn r1_surrogate<'t, T: Element>(
    tape: &'t Tape<T>,
    disc: &Discriminator,
    store: &ParamStore<T>,
    real: &Array<T>,
    input_grad: &Array<T>,
    eps: f64,
) -> Result<Var<'t, T>> {
    let step = input_grad.map(|g| g * T::from_f64_lossy(eps));
    let plus = tape.constant(real.zip_map(&step, |x, s| x + s));
    let minus = tape.constant(real.zip_map(&step, |x, s| x - s));
    let dp = disc.forward(tape, store, plus)?;
    let dm = disc.forward(tape, store, minus)?;
    let n = real.dim(0) as f64;
    Ok(dp.sub(dm).sum_all().mul_scalar(1.0 / (n * eps)))
}
