//! Central finite-difference checks for the hand-written backward passes.
//!
//! These only ever call forward code, so they stay independent of the
//! gradients they check.

use crate::nn::{Grads, ParamStore};
use crate::tensor::FeatureArray;

/// Outcome of comparing one matrix of analytic gradients against
/// numerical ones.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    /// `‖a − n‖ / max(‖a‖, ‖n‖)` over the checked entries.
    pub rel_err: f64,
    pub max_abs_err: f64,
    pub analytic_norm: f64,
}

impl GradCheck {
    /// Passes if the relative error is below `tol`, or if both gradients are
    /// numerically zero.
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_err < tol || (self.analytic_norm < 1e-10 && self.max_abs_err < 1e-8)
    }
}

fn compare(name: &str, analytic: &[f64], numeric: &[f64]) -> GradCheck {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let an = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    let denom = an.max(nn).max(1e-12);
    let max_abs_err = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    GradCheck {
        name: name.to_string(),
        checked: analytic.len(),
        rel_err: diff / denom,
        max_abs_err,
        analytic_norm: an,
    }
}

/// Picks up to `max_entries` evenly spaced entries of a length-`len` buffer.
fn entry_subset(len: usize, max_entries: usize) -> Vec<usize> {
    if len <= max_entries {
        return (0..len).collect();
    }
    let stride = len as f64 / max_entries as f64;
    (0..max_entries).map(|k| (k as f64 * stride) as usize).collect()
}

/// Checks every parameter matrix of `store` against central differences of
/// `loss`, probing at most `max_entries` entries per matrix.
pub fn check_params<F>(store: &ParamStore, grads: &Grads, mut loss: F, eps: f64, max_entries: usize) -> Vec<GradCheck>
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut work = store.clone();
    let mut out = Vec::with_capacity(store.len());
    for (t, name) in store.names().iter().enumerate() {
        let len = store.tensors()[t].data().len();
        let entries = entry_subset(len, max_entries);
        let mut analytic = Vec::with_capacity(entries.len());
        let mut numeric = Vec::with_capacity(entries.len());
        for &e in &entries {
            let orig = work.tensors()[t].data()[e];
            work.tensors_mut()[t].data_mut()[e] = orig + eps;
            let lp = loss(&work);
            work.tensors_mut()[t].data_mut()[e] = orig - eps;
            let lm = loss(&work);
            work.tensors_mut()[t].data_mut()[e] = orig;
            numeric.push((lp - lm) / (2.0 * eps));
            analytic.push(grads.tensors()[t].data()[e]);
        }
        out.push(compare(name, &analytic, &numeric));
    }
    out
}

/// Checks the gradient with respect to an input array.
pub fn check_input<F>(name: &str, x: &FeatureArray, analytic: &FeatureArray, mut loss: F, eps: f64) -> GradCheck
where
    F: FnMut(&FeatureArray) -> f64,
{
    let mut work = x.clone();
    let mut numeric = Vec::with_capacity(x.data().len());
    for e in 0..x.data().len() {
        let orig = work.data()[e];
        work.data_mut()[e] = orig + eps;
        let lp = loss(&work);
        work.data_mut()[e] = orig - eps;
        let lm = loss(&work);
        work.data_mut()[e] = orig;
        numeric.push((lp - lm) / (2.0 * eps));
    }
    compare(name, analytic.data(), &numeric)
}
