//! Central finite differences against an analytic gradient.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominator floor of the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// One function evaluation for a piecewise-smooth function.
///
/// `region` fingerprints the smooth piece the point lies in (for example the
/// sign pattern of every ReLU input). Coordinates whose two probes land in
/// different regions straddle a kink and are skipped.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Probe {
    pub value: f64,
    pub region: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate of the worst relative error, if any coordinate was checked.
    pub worst_index: Option<usize>,
    pub numeric: Vec<f64>,
    pub checked: usize,
    pub skipped: usize,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `analytic` with `(f(x + eps·e_i) - f(x - eps·e_i)) / (2·eps)`
/// for every coordinate `i`.
///
/// `f` receives the probe point in `f64`; it may evaluate in 32-bit by
/// rebuilding a [`Tensor`] or through a wider reference implementation.
pub fn finite_diff_check<F>(mut f: F, x: &Tensor, analytic: &[f32], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    finite_diff_check_piecewise(
        |p| Probe {
            value: f(p),
            region: 0,
        },
        x,
        analytic,
        eps,
    )
}

pub fn finite_diff_check_piecewise<F>(mut f: F, x: &Tensor, analytic: &[f32], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Probe,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    if analytic.len() != x.numel() {
        return Err(Error::shape(
            "finite_diff_check",
            "gradient length",
            format!("{} analytic values for {} coordinates", analytic.len(), x.numel()),
        ));
    }
    let mut point: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        numeric: vec![f64::NAN; point.len()],
        checked: 0,
        skipped: 0,
    };
    for i in 0..point.len() {
        let orig = point[i];
        point[i] = orig + eps;
        let plus = f(&point);
        point[i] = orig - eps;
        let minus = f(&point);
        point[i] = orig;
        if plus.region != minus.region {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus.value - minus.value) / (2.0 * eps);
        report.numeric[i] = numeric;
        report.checked += 1;
        let err = relative_error(analytic[i] as f64, numeric);
        if report.worst_index.is_none() || err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = err;
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}
