//! Analytic derivatives of the delay terms checked against central finite
//! differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Result;
use crate::model::{mu_floor, CommunityConfig};

/// Largest tolerated relative error between analytic and numerical derivatives.
pub const DERIVATIVE_REL_TOL: f64 = 1e-5;
/// Every sampled Hessian eigenvalue must sit below this.
pub const EIGENVALUE_CEILING: f64 = -1e-12;
/// Finite-difference step relative to the coordinate.
const STEP_SCALE: f64 = 1e-5;

/// `e^{-a/x - a/y}`, the rate-dependent part of the core-mediated term.
fn joint(alpha: f64, x: f64, y: f64) -> f64 {
    (-alpha / x - alpha / y).exp()
}

fn joint_gradient(alpha: f64, x: f64, y: f64) -> [f64; 2] {
    let g = joint(alpha, x, y);
    [alpha / (x * x) * g, alpha / (y * y) * g]
}

fn joint_hessian(alpha: f64, x: f64, y: f64) -> [[f64; 2]; 2] {
    let g = joint(alpha, x, y);
    let h11 = alpha / x.powi(3) * (alpha / x - 2.0) * g;
    let h22 = alpha / y.powi(3) * (alpha / y - 2.0) * g;
    let h12 = alpha * alpha / (x * x * y * y) * g;
    [[h11, h12], [h12, h22]]
}

/// Second derivative of `e^{-a/x}`.
pub fn delay_second_derivative(alpha: f64, x: f64) -> f64 {
    alpha / x.powi(3) * (alpha / x - 2.0) * (-alpha / x).exp()
}

fn delay_first_derivative(alpha: f64, x: f64) -> f64 {
    alpha / (x * x) * (-alpha / x).exp()
}

/// Largest eigenvalue of a symmetric 2x2 matrix.
fn max_eigenvalue(h: &[[f64; 2]; 2]) -> f64 {
    let mean = 0.5 * (h[0][0] + h[1][1]);
    let half_diff = 0.5 * (h[0][0] - h[1][1]);
    mean + half_diff.hypot(h[0][1])
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeSample {
    pub core_rate: f64,
    pub link_rate: f64,
    pub gradient_rel_error: f64,
    pub hessian_rel_error: f64,
    pub second_derivative_rel_error: f64,
    pub max_eigenvalue: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeReport {
    pub passed: bool,
    pub samples: usize,
    pub mu_floor: f64,
    pub max_gradient_rel_error: f64,
    pub max_hessian_rel_error: f64,
    pub max_second_derivative_rel_error: f64,
    /// Largest Hessian eigenvalue seen across all samples.
    pub max_eigenvalue: f64,
    pub failures: Vec<DerivativeSample>,
}

fn sample_at(alpha: f64, x: f64, y: f64) -> DerivativeSample {
    let (hx, hy) = (STEP_SCALE * x, STEP_SCALE * y);

    let grad = joint_gradient(alpha, x, y);
    let fd_grad = [
        (joint(alpha, x + hx, y) - joint(alpha, x - hx, y)) / (2.0 * hx),
        (joint(alpha, x, y + hy) - joint(alpha, x, y - hy)) / (2.0 * hy),
    ];
    let gradient_rel_error = rel_err(grad[0], fd_grad[0]).max(rel_err(grad[1], fd_grad[1]));

    let hess = joint_hessian(alpha, x, y);
    let (gxp, gxm) = (joint_gradient(alpha, x + hx, y), joint_gradient(alpha, x - hx, y));
    let (gyp, gym) = (joint_gradient(alpha, x, y + hy), joint_gradient(alpha, x, y - hy));
    let fd_hess = [
        [(gxp[0] - gxm[0]) / (2.0 * hx), (gyp[0] - gym[0]) / (2.0 * hy)],
        [(gxp[1] - gxm[1]) / (2.0 * hx), (gyp[1] - gym[1]) / (2.0 * hy)],
    ];
    let mut hessian_rel_error: f64 = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            hessian_rel_error = hessian_rel_error.max(rel_err(hess[i][j], fd_hess[i][j]));
        }
    }

    // The direct and outside terms are scaled copies of e^{-a/x}.
    let mut second_derivative_rel_error: f64 = 0.0;
    for t in [x, y] {
        let h = STEP_SCALE * t;
        let fd = (delay_first_derivative(alpha, t + h) - delay_first_derivative(alpha, t - h)) / (2.0 * h);
        second_derivative_rel_error = second_derivative_rel_error.max(rel_err(delay_second_derivative(alpha, t), fd));
    }

    DerivativeSample {
        core_rate: x,
        link_rate: y,
        gradient_rel_error,
        hessian_rel_error,
        second_derivative_rel_error,
        max_eigenvalue: max_eigenvalue(&hess),
    }
}

/// Compares analytic gradients and Hessians against finite differences at
/// the box corners plus `samples` random points of
/// `[mu0, M_c] x [mu0, M_p]`.
pub fn check_derivatives(config: &CommunityConfig, samples: usize, seed: u64) -> Result<DerivativeReport> {
    config.validate()?;
    let floor = mu_floor(config)?;
    let alpha = config.alpha;
    let (mc, mp) = (config.budget_core.max(floor), config.budget_periphery.max(floor));

    let mut points = vec![(floor, floor), (floor, mp), (mc, floor), (mc, mp)];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    points.extend((0..samples).map(|_| (rng.random_range(floor..=mc), rng.random_range(floor..=mp))));

    let mut report = DerivativeReport {
        passed: true,
        samples: points.len(),
        mu_floor: floor,
        max_gradient_rel_error: 0.0,
        max_hessian_rel_error: 0.0,
        max_second_derivative_rel_error: 0.0,
        max_eigenvalue: f64::NEG_INFINITY,
        failures: Vec::new(),
    };
    for (x, y) in points {
        let s = sample_at(alpha, x, y);
        report.max_gradient_rel_error = report.max_gradient_rel_error.max(s.gradient_rel_error);
        report.max_hessian_rel_error = report.max_hessian_rel_error.max(s.hessian_rel_error);
        report.max_second_derivative_rel_error =
            report.max_second_derivative_rel_error.max(s.second_derivative_rel_error);
        report.max_eigenvalue = report.max_eigenvalue.max(s.max_eigenvalue);
        let ok = s.gradient_rel_error <= DERIVATIVE_REL_TOL
            && s.hessian_rel_error <= DERIVATIVE_REL_TOL
            && s.second_derivative_rel_error <= DERIVATIVE_REL_TOL
            && s.max_eigenvalue <= EIGENVALUE_CEILING;
        if !ok {
            report.passed = false;
            report.failures.push(s);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_partial_at_twice_alpha() {
        let alpha = 1.0;
        let s = sample_at(alpha, 2.0 * alpha, 2.0 * alpha);
        assert!(s.hessian_rel_error <= DERIVATIVE_REL_TOL);
        let h = joint_hessian(alpha, 2.0, 2.0);
        // a^2 / (x^2 y^2) e^{-1}
        assert!((h[0][1] - (-1.0f64).exp() / 16.0).abs() < 1e-15);
    }

    #[test]
    fn second_derivative_vanishes_at_half_alpha() {
        for alpha in [0.5, 1.0, 3.0] {
            assert_eq!(delay_second_derivative(alpha, alpha / 2.0), 0.0);
        }
        assert!(delay_second_derivative(1.0, 0.4) > 0.0);
        assert!(delay_second_derivative(1.0, 0.6) < 0.0);
    }

    #[test]
    fn hessian_indefinite_when_rates_too_small() {
        // Determinant is proportional to 4 - 2a/x - 2a/y.
        let h = joint_hessian(1.0, 0.9, 0.9);
        assert!(max_eigenvalue(&h) > 0.0);
    }

    #[test]
    fn default_config_passes() {
        let r = check_derivatives(&CommunityConfig::desk_default(), 200, 7).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.samples, 204);
        assert!(r.max_eigenvalue <= EIGENVALUE_CEILING);
    }

    #[test]
    fn eigenvalue_formula_matches_diagonal() {
        assert_eq!(max_eigenvalue(&[[-3.0, 0.0], [0.0, -1.0]]), -1.0);
        assert!((max_eigenvalue(&[[0.0, 1.0], [1.0, 0.0]]) - 1.0).abs() < 1e-15);
    }
}
