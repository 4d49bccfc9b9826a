//! Central-difference verification of analytic gradients.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    /// Finite-difference step `h`.
    pub step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so that two
    /// gradients that are both numerically zero compare equal.
    pub denominator_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            denominator_floor: 1e-6,
        }
    }
}

/// Worst disagreement found inside one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub name: String,
    pub count: usize,
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub tolerance: f64,
    pub max_relative_error: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = libm::fabs(analytic).max(libm::fabs(numeric)).max(floor);
    libm::fabs(analytic - numeric) / denom
}

/// Compares `analytic[g]` against `(f(θ + h) - f(θ - h)) / 2h` for every
/// scalar of every parameter group. `f` is called with the full parameter
/// list, one scalar perturbed at a time.
pub fn grad_check<F>(
    mut f: F,
    params: &[Tensor],
    analytic: &[Tensor],
    names: &[String],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if params.len() != analytic.len() || params.len() != names.len() {
        return Err(Error::shape("grad_check", &[params.len()], &[analytic.len(), names.len()]));
    }
    let mut probe: Vec<Tensor> = params.to_vec();
    let mut groups = Vec::with_capacity(params.len());
    let h = opts.step;
    for (g, (p, a)) in params.iter().zip(analytic).enumerate() {
        if p.shape() != a.shape() {
            return Err(Error::shape("grad_check", p.shape(), a.shape()));
        }
        let mut report = GroupReport {
            name: names[g].clone(),
            count: p.len(),
            max_relative_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..p.len() {
            let base = p.data()[i];
            probe[g].data_mut()[i] = base + h;
            let plus = f(&probe)?;
            probe[g].data_mut()[i] = base - h;
            let minus = f(&probe)?;
            probe[g].data_mut()[i] = base;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "objective at {}[{i}] ± {h}: {plus}, {minus}",
                    names[g]
                )));
            }
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(a.data()[i], numeric, opts.denominator_floor);
            if err > report.max_relative_error || i == 0 {
                report.max_relative_error = err;
                report.worst_index = i;
                report.analytic = a.data()[i];
                report.numeric = numeric;
            }
        }
        groups.push(report);
    }
    let max = groups.iter().map(|g| g.max_relative_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        groups,
        tolerance: opts.tolerance,
        max_relative_error: max,
        passed: max <= opts.tolerance,
    })
}
