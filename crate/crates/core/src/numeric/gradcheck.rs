use super::graph::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over entries of `|analytic - numeric| / max(1, |numeric|)`
    pub max_rel_error: f64,
    /// `(param index, element index)` of the worst entry
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Central-difference gradient check.
///
/// `f` evaluates the objective and returns its analytic gradient, with slot
/// `i` holding the gradient for `params[i]` (absent slots mean zero). Each
/// entry is perturbed by `±h` in turn; the actual f32 step is used as the
/// denominator.
pub fn finite_diff_check<F>(mut f: F, params: &[Tensor], h: f32) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<(f64, Gradients)>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Config(format!("finite difference step must be positive, got {h}")));
    }
    let (base, analytic) = f(params)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("objective at base point".into()));
    }

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for p in 0..params.len() {
        for e in 0..params[p].len() {
            let x0 = params[p].data()[e];
            let (xp, xm) = (x0 + h, x0 - h);
            work[p].data_mut()[e] = xp;
            let (fp, _) = f(&work)?;
            work[p].data_mut()[e] = xm;
            let (fm, _) = f(&work)?;
            work[p].data_mut()[e] = x0;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite(format!("objective near param {p}[{e}]")));
            }
            let numeric = (fp - fm) / (f64::from(xp) - f64::from(xm));
            let a = analytic.get(p).map_or(0.0, |g| f64::from(g[e]));
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((p, e));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
