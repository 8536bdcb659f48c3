//! Central finite-difference gradient checks.
//!
//! The numerical side only ever evaluates forward passes, so it stays
//! independent of the backward rules it is used to verify.

use crate::array::Array;
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::Real;

/// Worst-case discrepancy found by [`check_params`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: Real,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Relative error with an absolute floor so vanishing gradients compare by
/// absolute difference.
pub fn relative_error(analytic: Real, numeric: Real, floor: Real) -> Real {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central differences of a scalar function of a flat vector.
pub fn numeric_gradient(f: &mut impl FnMut(&[Real]) -> Real, point: &[Real], eps: Real) -> Vec<Real> {
    let mut x = point.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + eps;
            let fp = f(&x);
            x[i] = orig - eps;
            let fm = f(&x);
            x[i] = orig;
            (fp - fm) / (2.0 * eps)
        })
        .collect()
}

/// Compares backward-pass gradients of `loss` with central differences for
/// every scalar in `ids` (all parameters when `ids` is empty).
///
/// `loss` must be a pure function of the store; `analytic` must fill the
/// store's gradients for the current values (typically one tape + backward).
pub fn check_params(
    store: &mut ParamStore,
    ids: &[ParamId],
    eps: Real,
    floor: Real,
    mut analytic: impl FnMut(&mut ParamStore) -> Result<()>,
    mut loss: impl FnMut(&ParamStore) -> Result<Real>,
) -> Result<GradReport> {
    store.zero_grads();
    analytic(store)?;
    let ids: Vec<ParamId> = if ids.is_empty() { store.ids().collect() } else { ids.to_vec() };
    let mut report = GradReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for id in ids {
        let grad = store
            .grad(id)
            .cloned()
            .unwrap_or_else(|| Array::zeros(store.value(id).shape().to_vec()));
        for i in 0..store.value(id).len() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + eps;
            let fp = loss(store)?;
            store.value_mut(id).data_mut()[i] = orig - eps;
            let fm = loss(store)?;
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let err = relative_error(grad.data()[i], numeric, floor);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = store.get(id).name.clone();
                report.worst_index = i;
            }
        }
    }
    store.zero_grads();
    Ok(report)
}
