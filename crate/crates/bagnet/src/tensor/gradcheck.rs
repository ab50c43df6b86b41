//! Central-finite-difference verification of analytic gradients.
//!
//! This oracle never touches the reverse pass: it only re-evaluates the loss
//! at perturbed parameter vectors, so it stays independent of the code it
//! checks.

use super::Scalar;
use crate::error::{Error, Result};

/// One checked coordinate.
#[derive(Clone, Debug)]
pub struct CoordCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Outcome of [`finite_diff_check`] over a set of sampled coordinates.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checks: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&CoordCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Compare `analytic` gradients against central differences of `evaluate`
/// at the sampled `indices` of the flat parameter vector `theta`.
///
/// The relative error of a coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)` and the report
/// carries the maximum over all sampled coordinates.
///
/// `evaluate` must be deterministic; this is verified by evaluating the
/// unperturbed vector twice before any differencing.
pub fn finite_diff_check<T: Scalar, F>(
    mut evaluate: F,
    theta: &[T],
    analytic: &[T],
    indices: &[usize],
    eps: T,
) -> Result<GradCheckReport>
where
    F: FnMut(&[T]) -> Result<T>,
{
    if eps <= T::zero() {
        return Err(Error::Config(format!("finite_diff_check: eps must be > 0, got {eps}")));
    }
    if analytic.len() != theta.len() {
        return Err(Error::Config(format!(
            "finite_diff_check: {} analytic gradients for {} parameters",
            analytic.len(),
            theta.len()
        )));
    }
    let base_a = evaluate(theta)?;
    let base_b = evaluate(theta)?;
    if base_a != base_b {
        return Err(Error::OracleInvalid(format!(
            "evaluate is not deterministic: {base_a} vs {base_b} on identical input"
        )));
    }

    let mut work = theta.to_vec();
    let mut checks = Vec::with_capacity(indices.len());
    let mut max_rel_err = 0.0f64;
    for &index in indices {
        if index >= theta.len() {
            return Err(Error::Config(format!(
                "finite_diff_check: coordinate {index} out of range ({} parameters)",
                theta.len()
            )));
        }
        let orig = theta[index];
        work[index] = orig + eps;
        let up = evaluate(&work)?.as_f64();
        work[index] = orig - eps;
        let down = evaluate(&work)?.as_f64();
        work[index] = orig;

        let numeric = (up - down) / (2.0 * eps.as_f64());
        let a = analytic[index].as_f64();
        let rel_err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        max_rel_err = max_rel_err.max(rel_err);
        checks.push(CoordCheck {
            index,
            analytic: a,
            numeric,
            rel_err,
        });
    }
    Ok(GradCheckReport {
        max_rel_err,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_under_central_differences() {
        let theta = [3.0f64];
        let analytic = [6.0f64];
        let report = finite_diff_check(
            |t: &[f64]| Ok(t[0] * t[0]),
            &theta,
            &analytic,
            &[0],
            1e-3,
        )
        .unwrap();
        assert!((report.checks[0].numeric - 6.0).abs() < 1e-9);
        assert!(report.max_rel_err < 1e-9);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let theta = [1.0f64, 2.0];
        let analytic = [0.0f64, 0.0];
        let report =
            finite_diff_check(|_: &[f64]| Ok(7.5), &theta, &analytic, &[0, 1], 1e-3).unwrap();
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn nondeterministic_evaluate_is_rejected() {
        let mut calls = 0u32;
        let theta = [1.0f64];
        let analytic = [0.0f64];
        let err = finite_diff_check(
            move |_: &[f64]| {
                calls += 1;
                Ok(calls as f64)
            },
            &theta,
            &analytic,
            &[0],
            1e-3,
        )
        .unwrap_err();
        assert!(matches!(err, Error::OracleInvalid(_)));
    }

    #[test]
    fn bad_eps_and_bad_index_are_config_errors() {
        let theta = [1.0f64];
        let analytic = [0.0f64];
        assert!(matches!(
            finite_diff_check(|_: &[f64]| Ok(0.0), &theta, &analytic, &[0], 0.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            finite_diff_check(|_: &[f64]| Ok(0.0), &theta, &analytic, &[5], 1e-3),
            Err(Error::Config(_))
        ));
    }
}
