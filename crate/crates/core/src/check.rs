//! Numeric checking helpers: central-difference gradient verification against
//! the tape, shared by unit tests and the `verify` battery.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::tape::{ParamId, ParamStore};

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct FdReport {
    /// Elements compared.
    pub checked: usize,
    /// Largest absolute difference between tape and central-difference grads.
    pub worst_abs: f64,
    /// Largest relative difference.
    pub worst_rel: f64,
    /// Largest over elements of `min(abs_err, rel_err)`; small whenever every
    /// element passes either criterion.
    pub score: f64,
}

/// Relative gap with an absolute floor so near-zero pairs compare cleanly.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Compares stored gradients against central differences of `loss`.
///
/// Gradients must already be populated (run backward first); `loss` is called
/// with perturbed parameter values and must rebuild its tape from the store
/// each time. Large tensors are strided down to `max_per_param` elements.
pub fn finite_diff_check<T: Scalar>(
    store: &mut ParamStore<T>,
    ids: &[ParamId],
    eps: f64,
    max_per_param: usize,
    mut loss: impl FnMut(&ParamStore<T>) -> Result<f64>,
) -> Result<FdReport> {
    let mut report = FdReport { checked: 0, worst_abs: 0.0, worst_rel: 0.0, score: 0.0 };
    for &id in ids {
        let grads = store.grad(id).to_f64_vec();
        let n = grads.len();
        let picks: Vec<usize> = if n <= max_per_param {
            (0..n).collect()
        } else {
            (0..max_per_param).map(|k| k * n / max_per_param).collect()
        };
        for k in picks {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + T::cst(eps);
            let up = loss(store)?;
            store.value_mut(id).data_mut()[k] = orig - T::cst(eps);
            let down = loss(store)?;
            store.value_mut(id).data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * eps);
            let abs = (fd - grads[k]).abs();
            let rel = rel_err(fd, grads[k]);
            report.checked += 1;
            report.worst_abs = report.worst_abs.max(abs);
            report.worst_rel = report.worst_rel.max(rel);
            report.score = report.score.max(abs.min(rel));
        }
    }
    Ok(report)
}
