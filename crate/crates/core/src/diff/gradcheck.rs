use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{DiffError, Gradients, ParamStore};

/// Denominator floor for the relative error, so that exactly-zero analytic
/// gradients are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub max_rel_err: f64,
    pub h: f64,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = libm::fmax(libm::fmax(libm::fabs(analytic), libm::fabs(numeric)), REL_ERR_FLOOR);
    libm::fabs(analytic - numeric) / scale
}

/// Compares the analytic gradients returned by `loss` against central
/// differences `(f(x+h) - f(x-h)) / 2h` for every scalar of every parameter.
///
/// `passed` requires every relative error to be strictly below `tol`.
pub fn grad_check<F>(loss: F, params: &ParamStore, h: f64, tol: f64) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&ParamStore) -> Result<(f64, Gradients), DiffError>,
{
    let (base, grads) = loss(params)?;
    let (again, grads_again) = loss(params)?;
    if base.to_bits() != again.to_bits() || grads != grads_again {
        return Err(DiffError::NonDeterministic);
    }
    let mut probe = params.clone();
    let mut groups = Vec::with_capacity(params.len());
    for (id, p) in params.iter() {
        let analytic = grads.get_or_zeros(id, p.value.len());
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for k in 0..p.value.len() {
            let orig = p.value.data()[k];
            probe.value_mut(id).data_mut()[k] = orig + h;
            let (plus, _) = loss(&probe)?;
            probe.value_mut(id).data_mut()[k] = orig - h;
            let (minus, _) = loss(&probe)?;
            probe.value_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = relative_error(analytic[k], numeric);
            if !rel.is_finite() {
                max_rel = f64::INFINITY;
            } else {
                max_rel = max_rel.max(rel);
            }
            max_abs = max_abs.max(libm::fabs(analytic[k] - numeric));
        }
        groups.push(GroupReport {
            name: p.name.clone(),
            numel: p.value.len(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
        });
    }
    let max_rel_err = groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: groups.iter().all(|g| g.max_rel_err < tol),
        groups,
        max_rel_err,
        h,
        tol,
    })
}
