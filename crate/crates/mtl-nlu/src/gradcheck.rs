//! Central finite-difference gradient checking.
//!
//! Used by the test suites to validate every analytic backward rule. The
//! numeric side only ever calls the forward pass, so it stays independent
//! of the backward code it is checking.

use crate::autograd::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Central finite differences of `loss` w.r.t. each listed parameter.
pub fn finite_diff_grads<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    eps: f64,
    mut loss: F,
) -> Vec<Tensor>
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut out = Vec::with_capacity(params.len());
    for &id in params {
        let (rows, cols) = store.value(id).shape();
        let mut grad = Tensor::zeros(rows, cols);
        for i in 0..rows * cols {
            let orig = store.value(id).values()[i];
            store.entry_mut(id).value.values_mut()[i] = orig + eps;
            let up = loss(store);
            store.entry_mut(id).value.values_mut()[i] = orig - eps;
            let down = loss(store);
            store.entry_mut(id).value.values_mut()[i] = orig;
            grad.values_mut()[i] = (up - down) / (2.0 * eps);
        }
        // frozen elements have no effective degree of freedom
        if let Some(mask) = &store.entry(id).frozen {
            for (g, &f) in grad.values_mut().iter_mut().zip(mask) {
                if f {
                    *g = 0.0;
                }
            }
        }
        out.push(grad);
    }
    out
}

/// Relative error between analytic and numeric gradients. Values below
/// `tiny` on both sides are compared absolutely so finite-difference noise
/// on near-zero entries does not blow up the ratio.
pub fn max_rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert!(analytic.same_shape(numeric), "gradcheck shape mismatch");
    let tiny = 1e-6;
    let mut worst: f64 = 0.0;
    for (&a, &n) in analytic.values().iter().zip(numeric.values()) {
        let scale = a.abs().max(n.abs());
        let err = if scale < tiny { (a - n).abs() } else { (a - n).abs() / scale };
        worst = worst.max(err);
    }
    worst
}

/// Convenience: check all listed params of a scalar loss against central
/// finite differences; panics with the failing parameter name.
pub fn assert_grads_close<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    analytic: &[Tensor],
    eps: f64,
    tol: f64,
    loss: F,
) where
    F: FnMut(&ParamStore) -> f64,
{
    let numeric = finite_diff_grads(store, params, eps, loss);
    for ((&id, a), n) in params.iter().zip(analytic).zip(&numeric) {
        let err = max_rel_err(a, n);
        assert!(
            err < tol,
            "gradient mismatch for {}: rel err {err:.3e} >= {tol:.1e}",
            store.name(id)
        );
    }
}
