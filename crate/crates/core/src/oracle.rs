//! Closed-form ground truth for the retraining problem.
//!
//! For quadratic loss the population minimizer under `D(theta)` is the mean
//! `m0 + M theta`, so the retraining fixed point is `(I - M)^{-1} m0` for every
//! linear shift, covariance shift or not. The performative risk itself is a
//! quadratic in `theta`:
//!
//! `PR(theta) = 1/2 [ (theta - m(theta))^T A (theta - m(theta)) + tr(A C(theta)) ]`
//!
//! with `m`, `C` the mean and covariance of `D(theta)`. The scalar
//! covariance-shift case has closed forms for the optimum, the risk gap and the
//! ridge weight whose fixed point is the optimum; those live in
//! [`solve_scalar`]. [`theta_po_numeric_scalar`] recomputes the optimum by
//! direct search so the closed forms can be cross-checked.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::loss::QuadraticLoss;
use crate::shift_model::{LinearShiftModel, ScalarShiftModel};
use crate::stats::StatSummary;
use crate::stream::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeFlags {
    pub contractive: bool,
    pub lambda_star_valid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionReport {
    pub theta_ps: Vec<f64>,
    pub theta_stat: Vec<f64>,
    pub theta_po: Vec<f64>,
    pub pr_at_ps: f64,
    pub pr_at_po: f64,
    /// `PR(theta_ps) - PR(theta_po)`
    pub gap: f64,
    pub lambda_star: Option<f64>,
    pub regime_flags: RegimeFlags,
}

/// Retraining fixed point `(I - M)^{-1} m0` of any linear shift.
pub fn fixed_point(model: &LinearShiftModel) -> Result<DVector<f64>> {
    let d = model.dim();
    let lhs = DMatrix::identity(d, d) - model.mu();
    lhs.lu()
        .solve(model.mu0())
        .ok_or_else(|| Error::Singular("I - mu".into()))
}

/// Fixed point of retraining for a mean-only shift. Also the performative
/// optimum and the unique stationary point of the risk.
pub fn theta_ps_mean_shift(model: &LinearShiftModel, loss: &QuadraticLoss) -> Result<DVector<f64>> {
    check_dim(model.dim(), loss.dim())?;
    if !model.is_mean_shift() {
        return Err(Error::WrongRegime("covariance map must be identically zero".into()));
    }
    let norm = model.mu_norm();
    if norm >= 1.0 {
        return Err(Error::NonContractive { norm });
    }
    fixed_point(model)
}

/// Exact performative risk from the first two moments of `D(theta)`.
pub fn pr_exact(model: &LinearShiftModel, loss: &QuadraticLoss, theta: &DVector<f64>) -> Result<f64> {
    check_dim(model.dim(), loss.dim())?;
    let m = model.mean_of(theta)?;
    let c = model.cov_of(theta)?;
    let r = theta - m;
    let a = loss.matrix();
    Ok(0.5 * (r.dot(&(a * &r)) + (a * c).trace()))
}

pub fn pr_analytic_scalar(model: &ScalarShiftModel, theta: f64) -> f64 {
    let spread = model.sigma0 + model.sigma * theta;
    let bias = (1.0 - model.mu) * theta - model.mu0;
    (spread * spread + bias * bias) / 2.0
}

/// Scalar performative optimum; equals the stationary point because the risk
/// is a strongly convex quadratic.
pub fn theta_po_scalar(model: &ScalarShiftModel) -> f64 {
    let (s0, s, m0, m) = (model.sigma0, model.sigma, model.mu0, model.mu);
    ((1.0 - m) * m0 - s0 * s) / ((1.0 - m) * (1.0 - m) + s * s)
}

/// Ridge weight whose regularized fixed point `mu0 / (1 - mu + lambda)` is the
/// performative optimum. `None` when the denominator vanishes.
pub fn lambda_star(model: &ScalarShiftModel) -> Option<f64> {
    let (s0, s, m0, m) = (model.sigma0, model.sigma, model.mu0, model.mu);
    let denom = m0 * (1.0 - m) - s0 * s;
    (denom != 0.0).then(|| s * (m0 * s + (1.0 - m) * s0) / denom)
}

pub fn solve_scalar(model: &ScalarShiftModel) -> Result<SolutionReport> {
    if model.mu >= 1.0 {
        return Err(Error::NonContractive { norm: model.mu.abs() });
    }
    let ps = model.mu0 / (1.0 - model.mu);
    let po = theta_po_scalar(model);
    let pr_at_ps = pr_analytic_scalar(model, ps);
    let pr_at_po = pr_analytic_scalar(model, po);
    let lstar = lambda_star(model);
    let denom = model.mu0 * (1.0 - model.mu) - model.sigma0 * model.sigma;
    let lambda_star_valid = matches!(lstar, Some(l) if l >= 0.0 && denom > 0.0);
    Ok(SolutionReport {
        theta_ps: vec![ps],
        theta_stat: vec![po],
        theta_po: vec![po],
        pr_at_ps,
        pr_at_po,
        gap: pr_at_ps - pr_at_po,
        lambda_star: lstar,
        regime_flags: RegimeFlags {
            contractive: model.contractive(),
            lambda_star_valid,
        },
    })
}

/// Solution concepts for a mean-only shift, where all three coincide.
pub fn solve_mean_shift(model: &LinearShiftModel, loss: &QuadraticLoss) -> Result<SolutionReport> {
    let ps = theta_ps_mean_shift(model, loss)?;
    let pr = pr_exact(model, loss, &ps)?;
    let v: Vec<f64> = ps.iter().copied().collect();
    Ok(SolutionReport {
        theta_ps: v.clone(),
        theta_stat: v.clone(),
        theta_po: v,
        pr_at_ps: pr,
        pr_at_po: pr,
        gap: 0.0,
        lambda_star: None,
        regime_flags: RegimeFlags {
            contractive: true,
            lambda_star_valid: false,
        },
    })
}

/// Sample mean of the loss over `n` draws from `D(theta)`, with its standard
/// error.
pub fn pr_monte_carlo(
    model: &LinearShiftModel,
    loss: &QuadraticLoss,
    theta: &DVector<f64>,
    n: usize,
    stream: &mut RngStream,
) -> Result<StatSummary> {
    if n < 2 {
        return Err(Error::InvalidParameter("Monte Carlo needs n >= 2".into()));
    }
    check_dim(model.dim(), loss.dim())?;
    let factor = model.cov_factor(theta)?;
    let mean = model.mean_of(theta)?;
    let d = model.dim();
    let mut z0 = DVector::zeros(d);
    let mut losses = Vec::with_capacity(n);
    for _ in 0..n {
        model.draw_base(stream, &mut z0);
        let z = &factor * &z0 + &mean;
        losses.push(loss.value(&z, theta)?);
    }
    Ok(StatSummary::from_values(&losses))
}

/// `PR(a) - PR(b)` by Monte Carlo with common random numbers: each base draw
/// is pushed through both `D(a)` and `D(b)`, and the standard error comes from
/// the paired differences.
pub fn pr_difference_monte_carlo(
    model: &LinearShiftModel,
    loss: &QuadraticLoss,
    a: &DVector<f64>,
    b: &DVector<f64>,
    n: usize,
    stream: &mut RngStream,
) -> Result<StatSummary> {
    if n < 2 {
        return Err(Error::InvalidParameter("Monte Carlo needs n >= 2".into()));
    }
    check_dim(model.dim(), loss.dim())?;
    let (fa, ma) = (model.cov_factor(a)?, model.mean_of(a)?);
    let (fb, mb) = (model.cov_factor(b)?, model.mean_of(b)?);
    let mut z0 = DVector::zeros(model.dim());
    let mut diffs = Vec::with_capacity(n);
    for _ in 0..n {
        model.draw_base(stream, &mut z0);
        let za = &fa * &z0 + &ma;
        let zb = &fb * &z0 + &mb;
        diffs.push(loss.value(&za, a)? - loss.value(&zb, b)?);
    }
    Ok(StatSummary::from_values(&diffs))
}

/// Central finite-difference gradient of a scalar function of one variable.
pub fn pr_grad_fd_scalar(f: impl Fn(f64) -> f64, theta: f64, step: f64) -> f64 {
    assert!(step > 0.0, "finite-difference step must be positive");
    (f(theta + step) - f(theta - step)) / (2.0 * step)
}

/// Central finite-difference gradient of a scalar function of a vector.
pub fn pr_grad_fd(f: impl Fn(&DVector<f64>) -> f64, theta: &DVector<f64>, step: f64) -> DVector<f64> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut probe = theta.clone();
    DVector::from_fn(theta.len(), |i, _| {
        probe[i] = theta[i] + step;
        let up = f(&probe);
        probe[i] = theta[i] - step;
        let down = f(&probe);
        probe[i] = theta[i];
        (up - down) / (2.0 * step)
    })
}

/// Finite-difference gradient of the Monte Carlo risk, one summary per
/// coordinate.
///
/// Every sample's base draw is shared by all `2d` perturbed parameters, so each
/// per-sample central difference is an unbiased estimate of the true partial
/// derivative and the reported standard errors are those of the paired
/// differences.
pub fn pr_grad_monte_carlo(
    model: &LinearShiftModel,
    loss: &QuadraticLoss,
    theta: &DVector<f64>,
    n: usize,
    step: f64,
    stream: &mut RngStream,
) -> Result<Vec<StatSummary>> {
    if n < 2 {
        return Err(Error::InvalidParameter("Monte Carlo needs n >= 2".into()));
    }
    if !(step > 0.0) {
        return Err(Error::InvalidParameter("finite-difference step must be positive".into()));
    }
    check_dim(model.dim(), loss.dim())?;
    let d = model.dim();

    // (theta', factor(theta'), mean(theta')) for theta +/- step e_i
    let mut probes = Vec::with_capacity(2 * d);
    for i in 0..d {
        for sign in [1.0, -1.0] {
            let mut t = theta.clone();
            t[i] += sign * step;
            let f = model.cov_factor(&t)?;
            let m = model.mean_of(&t)?;
            probes.push((t, f, m));
        }
    }
    let a = loss.matrix();
    let mut z0 = DVector::zeros(d);
    let mut r = DVector::zeros(d);
    let mut ar = DVector::zeros(d);
    let mut per_coord = vec![Vec::with_capacity(n); d];
    let mut values = vec![0.0; 2 * d];
    for _ in 0..n {
        model.draw_base(stream, &mut z0);
        for (k, (t, f, m)) in probes.iter().enumerate() {
            // r = t - (f z0 + m)
            r.copy_from(t);
            r -= m;
            r.gemv(-1.0, f, &z0, 1.0);
            ar.gemv(1.0, a, &r, 0.0);
            values[k] = 0.5 * r.dot(&ar);
        }
        for (i, out) in per_coord.iter_mut().enumerate() {
            out.push((values[2 * i] - values[2 * i + 1]) / (2.0 * step));
        }
    }
    Ok(per_coord.iter().map(|v| StatSummary::from_values(v)).collect())
}

/// Minimizes the scalar risk by golden-section search on
/// `[-B, B]`, `B = 10 (|mu0| + sigma0 + 1) / (1 - mu)`, without using the
/// closed-form optimum.
///
/// Golden section cannot resolve a quadratic's vertex below roughly
/// `sqrt(eps)` relative, so the bracket it returns is finished with one
/// parabolic-vertex step through three well-separated evaluations.
pub fn theta_po_numeric_scalar(model: &ScalarShiftModel) -> Result<f64> {
    if model.mu >= 1.0 {
        return Err(Error::NonContractive { norm: model.mu.abs() });
    }
    let f = |t: f64| pr_analytic_scalar(model, t);
    let bound = 10.0 * (model.mu0.abs() + model.sigma0 + 1.0) / (1.0 - model.mu);
    let x = golden_section(&f, -bound, bound, 1e-10);
    let h = 1e-2 * (1.0 + x.abs());
    let (f0, f1, f2) = (f(x - h), f(x), f(x + h));
    let curvature = f0 - 2.0 * f1 + f2;
    if curvature > 0.0 {
        Ok(x + h * (f0 - f2) / (2.0 * curvature))
    } else {
        Ok(x)
    }
}

fn golden_section(f: &impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while hi - lo > tol {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = f(d);
        }
        if c >= d {
            break;
        }
    }
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shift_model::BaseNoise;
    use approx::assert_abs_diff_eq;

    fn sm(sigma0: f64, sigma: f64, mu0: f64, mu: f64) -> ScalarShiftModel {
        ScalarShiftModel::new(sigma0, sigma, mu0, mu).unwrap()
    }

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn theta_ps_mean_shift_examples() {
        let sq1 = QuadraticLoss::squared(1);
        let zero = sm(1.0, 0.0, 0.0, 0.5).to_linear(BaseNoise::StandardGaussian);
        assert_eq!(theta_ps_mean_shift(&zero, &sq1).unwrap(), v(&[0.0]));
        let m = sm(1.0, 0.0, 1.0, 0.5).to_linear(BaseNoise::StandardGaussian);
        assert_abs_diff_eq!(theta_ps_mean_shift(&m, &sq1).unwrap()[0], 2.0, epsilon = 1e-15);

        let m2 = LinearShiftModel::isotropic_mean_shift(1.0, v(&[1.0, 2.0]), 0.5).unwrap();
        let ps = theta_ps_mean_shift(&m2, &QuadraticLoss::squared(2)).unwrap();
        assert!((ps - v(&[2.0, 4.0])).amax() < 1e-15);
    }

    #[test]
    fn theta_ps_mean_shift_errors() {
        let sq1 = QuadraticLoss::squared(1);
        let div = sm(1.0, 0.0, 1.0, 1.5).to_linear(BaseNoise::StandardGaussian);
        assert!(matches!(theta_ps_mean_shift(&div, &sq1), Err(Error::NonContractive { .. })));
        let cov = sm(1.0, 0.5, 1.0, 0.5).to_linear(BaseNoise::StandardGaussian);
        assert!(matches!(theta_ps_mean_shift(&cov, &sq1), Err(Error::WrongRegime(_))));
    }

    #[test]
    fn solve_scalar_worked_instance() {
        let r = solve_scalar(&sm(0.5, 0.5, 1.0, 0.0)).unwrap();
        assert_abs_diff_eq!(r.theta_ps[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.theta_po[0], 0.6, epsilon = 1e-15);
        assert_eq!(r.theta_po, r.theta_stat);
        assert_abs_diff_eq!(r.pr_at_ps, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(r.pr_at_po, 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(r.gap, 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(r.lambda_star.unwrap(), 2.0 / 3.0, epsilon = 1e-15);
        assert!(r.regime_flags.contractive && r.regime_flags.lambda_star_valid);
    }

    #[test]
    fn solve_scalar_without_covariance_shift() {
        for (s0, m0, mu) in [(1.0, 1.0, 0.5), (0.3, -2.0, -0.4), (2.0, 0.7, 0.9)] {
            let r = solve_scalar(&sm(s0, 0.0, m0, mu)).unwrap();
            assert!((r.theta_ps[0] - r.theta_po[0]).abs() <= 1e-12);
            assert_abs_diff_eq!(r.theta_ps[0], m0 / (1.0 - mu), epsilon = 1e-12);
            assert!(r.gap.abs() <= 1e-12);
        }
    }

    #[test]
    fn solve_scalar_second_instance() {
        let r = solve_scalar(&sm(1.0, 0.5, 1.0, 0.5)).unwrap();
        assert_abs_diff_eq!(r.theta_ps[0], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.theta_po[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(pr_analytic_scalar(&sm(1.0, 0.5, 1.0, 0.5), 0.0), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.gap, 1.0, epsilon = 1e-12);
        // denominator mu0 (1 - mu) - sigma0 sigma = 0
        assert_eq!(r.lambda_star, None);
        assert!(!r.regime_flags.lambda_star_valid);
    }

    #[test]
    fn solve_scalar_regimes() {
        assert!(matches!(solve_scalar(&sm(1.0, 0.0, 1.0, 1.5)), Err(Error::NonContractive { .. })));
        assert!(matches!(solve_scalar(&sm(1.0, 0.0, 1.0, 1.0)), Err(Error::NonContractive { .. })));
        let r = solve_scalar(&sm(1.0, 0.2, 1.0, -1.5)).unwrap();
        assert!(!r.regime_flags.contractive);
        // negative lambda* reported but flagged invalid
        let r = solve_scalar(&sm(1.0, 1.0, -1.0, 0.0)).unwrap();
        assert!(r.lambda_star.is_some());
        assert!(!r.regime_flags.lambda_star_valid);
    }

    #[test]
    fn pr_analytic_examples() {
        assert_abs_diff_eq!(pr_analytic_scalar(&sm(1.0, 0.7, 1.0, 0.3), 0.0), 1.0, epsilon = 1e-15);
        let m = sm(0.8, 0.3, 1.2, 0.4);
        let ps = m.mu0 / (1.0 - m.mu);
        let spread = m.sigma0 + m.sigma * ps;
        assert_abs_diff_eq!(pr_analytic_scalar(&m, ps), spread * spread / 2.0, epsilon = 1e-12);
        assert_eq!(pr_analytic_scalar(&sm(1.0, 0.0, 0.0, 0.0), 0.0), 0.5);
    }

    #[test]
    fn pr_exact_matches_scalar_formula() {
        let m = sm(0.8, 0.3, 1.2, 0.4);
        let lin = m.to_linear(BaseNoise::StandardGaussian);
        for t in [-2.0, 0.0, 0.5, 3.0] {
            let a = pr_exact(&lin, &QuadraticLoss::squared(1), &v(&[t])).unwrap();
            assert_abs_diff_eq!(a, pr_analytic_scalar(&m, t), epsilon = 1e-13);
        }
    }

    #[test]
    fn pr_monte_carlo_examples() {
        // ((0.5 + 0.3)^2 + 0.4^2) / 2
        let opt = sm(0.5, 0.5, 1.0, 0.0).to_linear(BaseNoise::StandardGaussian);
        let sq = QuadraticLoss::squared(1);
        let est = pr_monte_carlo(&opt, &sq, &v(&[0.6]), 1_000_000, &mut RngStream::new(5, 0, 0)).unwrap();
        assert!((est.mean - 0.4).abs() < 3.0 * est.std_error, "{est:?}");

        // ((1 + 0.3)^2 + 0.7^2) / 2
        let lin = sm(1.0, 0.5, 1.0, 0.5).to_linear(BaseNoise::StandardGaussian);
        let est = pr_monte_carlo(&lin, &sq, &v(&[0.6]), 1_000_000, &mut RngStream::new(5, 0, 0)).unwrap();
        assert!((est.mean - 1.09).abs() < 3.0 * est.std_error, "{est:?}");

        let theta = 0.8;
        let mu = 0.5;
        let tight = sm(1e-6, 0.0, theta * (1.0 - mu), mu).to_linear(BaseNoise::StandardGaussian);
        let est = pr_monte_carlo(&tight, &sq, &v(&[theta]), 1_000_000, &mut RngStream::new(6, 0, 0)).unwrap();
        assert!(est.mean.abs() < 1e-10);

        let a = pr_monte_carlo(&lin, &sq, &v(&[0.6]), 1000, &mut RngStream::new(7, 0, 0)).unwrap();
        let b = pr_monte_carlo(&lin, &sq, &v(&[0.6]), 1000, &mut RngStream::new(7, 0, 0)).unwrap();
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        assert!(pr_monte_carlo(&lin, &sq, &v(&[0.6]), 1, &mut RngStream::new(7, 0, 0)).is_err());
    }

    #[test]
    fn fd_gradient_examples() {
        let m = sm(0.5, 0.5, 1.0, 0.0);
        let r = solve_scalar(&m).unwrap();
        let f = |t: f64| pr_analytic_scalar(&m, t);
        assert!(pr_grad_fd_scalar(f, r.theta_po[0], 1e-6).abs() < 1e-6);

        let m = sm(1.0, 0.5, 1.0, 0.5);
        let r = solve_scalar(&m).unwrap();
        let f = |t: f64| pr_analytic_scalar(&m, t);
        let g = pr_grad_fd_scalar(f, r.theta_ps[0], 1e-6);
        let want = (m.sigma * m.sigma + (1.0 - m.mu).powi(2)) * (r.theta_ps[0] - r.theta_po[0]);
        assert!(g.abs() > 0.0);
        assert!((g - want).abs() < 1e-4, "{g} vs {want}");

        assert!(pr_grad_fd_scalar(|t| t * t, 0.0, 1e-6).abs() < 1e-9);
        let g = pr_grad_fd(|t: &DVector<f64>| t.dot(t), &v(&[1.0, -2.0]), 1e-6);
        assert!((g - v(&[2.0, -4.0])).amax() < 1e-8);
    }

    #[test]
    fn numeric_optimum_examples() {
        assert_abs_diff_eq!(theta_po_numeric_scalar(&sm(0.5, 0.5, 1.0, 0.0)).unwrap(), 0.6, epsilon = 1e-8);
        assert_abs_diff_eq!(theta_po_numeric_scalar(&sm(1.0, 0.0, 1.0, 0.5)).unwrap(), 2.0, epsilon = 1e-8);
        assert_abs_diff_eq!(theta_po_numeric_scalar(&sm(1.0, 1.0, 0.0, 0.0)).unwrap(), -0.5, epsilon = 1e-8);
        assert!(theta_po_numeric_scalar(&sm(1.0, 0.0, 1.0, 1.0)).is_err());
    }

    #[test]
    fn mc_gradient_vanishes_at_mean_shift_fixed_point() {
        let model = LinearShiftModel::mean_shift(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 0.7]),
            v(&[1.0, -0.5]),
            DMatrix::from_row_slice(2, 2, &[0.3, 0.1, -0.2, 0.4]),
            BaseNoise::StandardGaussian,
        )
        .unwrap();
        let loss = QuadraticLoss::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0])).unwrap();
        let ps = theta_ps_mean_shift(&model, &loss).unwrap();
        let g = pr_grad_monte_carlo(&model, &loss, &ps, 200_000, 1e-4, &mut RngStream::new(8, 0, 0)).unwrap();
        for s in &g {
            assert!(s.mean.abs() <= 5.0 * s.std_error, "{s:?}");
        }
        // away from the fixed point the same estimator sees the true gradient
        let off = &ps + v(&[0.5, 0.0]);
        let g = pr_grad_monte_carlo(&model, &loss, &off, 20_000, 1e-4, &mut RngStream::new(8, 0, 1)).unwrap();
        let exact = pr_grad_fd(|t| pr_exact(&model, &loss, t).unwrap(), &off, 1e-5);
        for (s, e) in g.iter().zip(exact.iter()) {
            assert!((s.mean - e).abs() <= 5.0 * s.std_error + 1e-6, "{s:?} vs {e}");
        }
    }
}
