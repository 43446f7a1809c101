use super::{GradientBundle, Parameters};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub checked: usize,
    /// `(analytic, numeric)` for every scalar, in parameter order.
    pub pairs: Vec<(f64, f64)>,
}

/// Relative error used by the checker.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `loss` for every
/// scalar parameter. `loss` must be deterministic (fixed dropout seed).
pub fn finite_diff_grad_check<P, F>(
    params: &P,
    analytic: &GradientBundle,
    step: f64,
    loss: F,
) -> Result<GradCheckReport>
where
    P: Parameters + Clone,
    F: Fn(&P) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must lie in [1e-7, 1e-3], got {step}"
        )));
    }
    analytic.check_matches(params)?;
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        checked: 0,
        pairs: Vec::new(),
    };
    let mut probe = params.clone();
    for (t, (name, grad)) in analytic.entries().iter().enumerate() {
        for i in 0..grad.len() {
            let original = probe.tensors()[t].1.as_slice()[i];
            probe.tensors_mut()[t].1.as_mut_slice()[i] = original + step;
            let plus = loss(&probe)?;
            probe.tensors_mut()[t].1.as_mut_slice()[i] = original - step;
            let minus = loss(&probe)?;
            probe.tensors_mut()[t].1.as_mut_slice()[i] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(grad.as_slice()[i], numeric);
            report.max_absolute_error = report
                .max_absolute_error
                .max((grad.as_slice()[i] - numeric).abs());
            report.pairs.push((grad.as_slice()[i], numeric));
            report.checked += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_tensor = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
