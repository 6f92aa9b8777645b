//! Central finite-difference verification of analytic gradients.

use crate::{Array, ParamStore, Tape, Var};

/// Tolerances and sampling for a gradient check.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Denominator floor in `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Coordinates examined per tensor (evenly strided when exceeded).
    pub max_coords: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-6, floor: 1e-6, max_coords: 48 }
    }
}

/// One compared coordinate.
#[derive(Clone, Debug)]
pub struct CoordCheck {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub coords: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn fraction_within(&self, tol: f64) -> f64 {
        if self.coords.is_empty() {
            return 0.0;
        }
        self.coords.iter().filter(|c| c.rel_error <= tol).count() as f64 / self.coords.len() as f64
    }

    pub fn max_rel_error(&self) -> f64 {
        self.coords.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    /// `frac` of coordinates within `tight`, all within `loose`.
    pub fn passes(&self, tight: f64, frac: f64, loose: f64) -> bool {
        !self.coords.is_empty() && self.fraction_within(tight) >= frac && self.max_rel_error() <= loose
    }

    pub fn worst(&self) -> Option<&CoordCheck> {
        self.coords.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.coords.extend(other.coords);
    }
}

fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn sampled(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        (0..max).map(|k| k * len / max).collect()
    }
}

/// Checks `d f / d inputs` for a scalar function of leaf tensors.
pub fn check_inputs<F>(inputs: &[Array<f64>], opts: GradCheckOptions, f: F) -> GradCheckReport
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let eval = |vals: &[Array<f64>]| {
        let tape = Tape::new();
        let vars: Vec<_> = vals.iter().map(|v| tape.constant(v.clone())).collect();
        f(&tape, &vars).item()
    };
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = f(&tape, &vars);
    let grads = tape.backward(out);
    let mut report = GradCheckReport::default();
    for (t, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var);
        for idx in sampled(inputs[t].len(), opts.max_coords) {
            let mut plus = inputs.to_vec();
            plus[t].data_mut()[idx] += opts.step;
            let mut minus = inputs.to_vec();
            minus[t].data_mut()[idx] -= opts.step;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * opts.step);
            let a = analytic.data()[idx];
            report.coords.push(CoordCheck {
                tensor: format!("input{t}"),
                index: idx,
                analytic: a,
                numeric,
                rel_error: rel_error(a, numeric, opts.floor),
            });
        }
    }
    report
}

/// Checks gradients of a scalar function with respect to named parameters.
///
/// `names` selects which store tensors to probe; an empty slice probes all.
pub fn check_params<F>(
    store: &ParamStore<f64>,
    names: &[&str],
    opts: GradCheckOptions,
    f: F,
) -> GradCheckReport
where
    F: for<'t> Fn(&'t Tape<f64>, &ParamStore<f64>) -> Var<'t, f64>,
{
    check_params_split(store, names, opts, &f, |s| {
        let tape = Tape::new();
        f(&tape, s).item()
    })
}

/// Like [`check_params`], but the analytic gradient comes from `surrogate`
/// (a graph whose parameter gradient should equal that of the value) while
/// finite differences probe `value`.
pub fn check_params_split<F, G>(
    store: &ParamStore<f64>,
    names: &[&str],
    opts: GradCheckOptions,
    surrogate: F,
    value: G,
) -> GradCheckReport
where
    F: for<'t> Fn(&'t Tape<f64>, &ParamStore<f64>) -> Var<'t, f64>,
    G: Fn(&ParamStore<f64>) -> f64,
{
    let tape = Tape::new();
    tape.train(store);
    let out = surrogate(&tape, store);
    let grads = tape.backward(out).for_store(&tape, store);
    let selected: Vec<String> = if names.is_empty() {
        store.names().map(str::to_string).collect()
    } else {
        names.iter().map(|s| s.to_string()).collect()
    };
    let mut report = GradCheckReport::default();
    for name in selected {
        let len = store.get(&name).unwrap_or_else(|| panic!("no parameter `{name}`")).len();
        let analytic = grads.get(&name).cloned();
        for idx in sampled(len, opts.max_coords) {
            let probe = |delta: f64| {
                let mut s = store.clone();
                s.get_mut(&name).unwrap().data_mut()[idx] += delta;
                value(&s)
            };
            let numeric = (probe(opts.step) - probe(-opts.step)) / (2.0 * opts.step);
            let a = analytic.as_ref().map_or(0.0, |g| g.data()[idx]);
            report.coords.push(CoordCheck {
                tensor: name.clone(),
                index: idx,
                analytic: a,
                numeric,
                rel_error: rel_error(a, numeric, opts.floor),
            });
        }
    }
    report
}
