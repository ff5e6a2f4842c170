//! Central finite-difference gradient verification.

use crate::error::Result;

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over checked components of
    /// `|analytic − numeric| / max(|analytic|, |numeric|, floor)`, the floor defaulting to 1e-8.
    pub max_rel_error: f64,
    /// Component index attaining the maximum.
    pub worst_index: usize,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

/// Default lower bound on the relative-error denominator.
pub const DEFAULT_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, DEFAULT_FLOOR)
}

/// `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
pub fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Compares `analytic` with central differences of `f` around `point`.
///
/// `indices` restricts the check to a subset of components (all when
/// `None`). `f` must be deterministic.
pub fn grad_check<F>(
    f: F,
    point: &[f64],
    analytic: &[f64],
    indices: Option<&[usize]>,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    grad_check_floored(f, point, analytic, indices, step, tol, DEFAULT_FLOOR)
}

/// [`grad_check`] with an explicit denominator floor, for functions whose
/// large value makes tiny components unresolvable by differencing.
pub fn grad_check_floored<F>(
    mut f: F,
    point: &[f64],
    analytic: &[f64],
    indices: Option<&[usize]>,
    step: f64,
    tol: f64,
    floor: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    assert_eq!(point.len(), analytic.len(), "gradient length");
    assert!(tol > 0.0 && step > 0.0);
    let all: Vec<usize>;
    let indices = match indices {
        Some(ix) => ix,
        None => {
            all = (0..point.len()).collect();
            &all
        }
    };
    let mut x = point.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: 0,
        tol,
    };
    for &i in indices {
        let orig = x[i];
        x[i] = orig + step;
        let up = f(&x)?;
        x[i] = orig - step;
        let down = f(&x)?;
        x[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let err = relative_error_floored(analytic[i], numeric, floor);
        if report.checked == 0 || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_slope_at_two() {
        let r = grad_check(|x| Ok(x[0].max(0.0)), &[2.0], &[1.0], None, DEFAULT_STEP, 1e-9).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn wrong_gradient_fails() {
        let r = grad_check(|x| Ok(x[0] * x[0]), &[3.0], &[5.0], None, DEFAULT_STEP, 1e-6).unwrap();
        assert!(!r.passed());
        assert!((r.max_rel_error - 1.0 / 6.0).abs() < 1e-6);
    }
}
