//! Linear-shift distribution maps.
//!
//! A deployed parameter `theta` induces the data law
//! `z = (S0 + S(theta)) z0 + m0 + M theta`, where `S(.)` is linear in `theta`
//! and `z0` is a zero-mean, identity-covariance base draw. Only the first two
//! moments of `z0` matter for every closed form in this crate, which is why
//! both Gaussian and Rademacher base noise are offered.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::stream::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseNoise {
    #[default]
    StandardGaussian,
    Rademacher,
}

impl BaseNoise {
    #[inline]
    pub fn draw(self, stream: &mut RngStream) -> f64 {
        match self {
            BaseNoise::StandardGaussian => stream.standard_normal(),
            BaseNoise::Rademacher => stream.rademacher(),
        }
    }
}

/// Distribution map `theta -> D(theta)` for a linear shift in dimension `d`.
///
/// The covariance map is stored as `d` coefficient matrices, one per
/// coordinate of `theta`: `S(theta) = sum_k theta_k * sigma_coeffs[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearShiftModel {
    sigma0: DMatrix<f64>,
    sigma_coeffs: Vec<DMatrix<f64>>,
    mu0: DVector<f64>,
    mu: DMatrix<f64>,
    base: BaseNoise,
}

impl LinearShiftModel {
    pub fn new(
        sigma0: DMatrix<f64>,
        sigma_coeffs: Vec<DMatrix<f64>>,
        mu0: DVector<f64>,
        mu: DMatrix<f64>,
        base: BaseNoise,
    ) -> Result<Self> {
        let d = mu0.len();
        if d == 0 {
            return Err(Error::InvalidParameter("dimension must be positive".into()));
        }
        check_square(&sigma0, d, "sigma0")?;
        check_square(&mu, d, "mu")?;
        check_dim(d, sigma_coeffs.len())?;
        for s in &sigma_coeffs {
            check_square(s, d, "sigma")?;
        }
        let finite = sigma0.iter().all(|x| x.is_finite())
            && mu0.iter().all(|x| x.is_finite())
            && mu.iter().all(|x| x.is_finite())
            && sigma_coeffs.iter().flat_map(|s| s.iter()).all(|x| x.is_finite());
        if !finite {
            return Err(Error::InvalidParameter("non-finite model coefficient".into()));
        }
        Ok(Self {
            sigma0,
            sigma_coeffs,
            mu0,
            mu,
            base,
        })
    }

    /// Mean-only shift: `S(.) = 0`.
    pub fn mean_shift(
        sigma0: DMatrix<f64>,
        mu0: DVector<f64>,
        mu: DMatrix<f64>,
        base: BaseNoise,
    ) -> Result<Self> {
        let d = mu0.len();
        Self::new(sigma0, vec![DMatrix::zeros(d, d); d], mu0, mu, base)
    }

    /// `S0 = sigma0 I`, `M = mu I`, no covariance shift.
    pub fn isotropic_mean_shift(sigma0: f64, mu0: DVector<f64>, mu: f64) -> Result<Self> {
        let d = mu0.len();
        Self::mean_shift(
            DMatrix::identity(d, d) * sigma0,
            mu0,
            DMatrix::identity(d, d) * mu,
            BaseNoise::StandardGaussian,
        )
    }

    pub fn with_base(mut self, base: BaseNoise) -> Self {
        self.base = base;
        self
    }

    pub fn dim(&self) -> usize {
        self.mu0.len()
    }

    pub fn base(&self) -> BaseNoise {
        self.base
    }

    pub fn sigma0(&self) -> &DMatrix<f64> {
        &self.sigma0
    }

    pub fn sigma_coeffs(&self) -> &[DMatrix<f64>] {
        &self.sigma_coeffs
    }

    pub fn mu0(&self) -> &DVector<f64> {
        &self.mu0
    }

    pub fn mu(&self) -> &DMatrix<f64> {
        &self.mu
    }

    pub fn is_mean_shift(&self) -> bool {
        self.sigma_coeffs
            .iter()
            .all(|s| s.iter().all(|&x| x == 0.0))
    }

    /// Largest singular value of the mean map.
    pub fn mu_norm(&self) -> f64 {
        operator_norm(&self.mu)
    }

    pub fn is_contractive(&self) -> bool {
        self.mu_norm() < 1.0
    }

    /// Returns the scalar view when `d = 1`.
    pub fn as_scalar(&self) -> Option<(f64, f64, f64, f64)> {
        (self.dim() == 1).then(|| {
            (
                self.sigma0[(0, 0)],
                self.sigma_coeffs[0][(0, 0)],
                self.mu0[0],
                self.mu[(0, 0)],
            )
        })
    }

    pub fn mean_of(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), theta.len())?;
        Ok(&self.mu0 + &self.mu * theta)
    }

    /// `S0 + S(theta)`.
    pub fn cov_factor(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_dim(self.dim(), theta.len())?;
        let mut f = self.sigma0.clone();
        for (k, s) in self.sigma_coeffs.iter().enumerate() {
            if theta[k] != 0.0 {
                f += s * theta[k];
            }
        }
        Ok(f)
    }

    pub fn cov_of(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        let f = self.cov_factor(theta)?;
        Ok(&f * f.transpose())
    }

    /// Lazily checks the full-rank condition on `S0 + S(theta)`.
    pub fn is_full_rank_at(&self, theta: &DVector<f64>) -> Result<bool> {
        let f = self.cov_factor(theta)?;
        let sv = f.singular_values();
        let max = sv.max();
        let min = sv.min();
        Ok(min > max.max(1.0) * f64::EPSILON * self.dim() as f64)
    }

    /// Draws `n` i.i.d. rows from `D(theta)`.
    pub fn sample(&self, theta: &DVector<f64>, n: usize, stream: &mut RngStream) -> Result<DMatrix<f64>> {
        if n == 0 {
            return Err(Error::InvalidParameter("sample count must be at least 1".into()));
        }
        let factor = self.cov_factor(theta)?;
        let mean = self.mean_of(theta)?;
        let d = self.dim();
        let mut out = DMatrix::zeros(n, d);
        let mut z0 = DVector::zeros(d);
        for i in 0..n {
            self.draw_base(stream, &mut z0);
            let z = &factor * &z0 + &mean;
            out.row_mut(i).copy_from(&z.transpose());
        }
        Ok(out)
    }

    pub(crate) fn draw_base(&self, stream: &mut RngStream, z0: &mut DVector<f64>) {
        for v in z0.iter_mut() {
            *v = self.base.draw(stream);
        }
    }

    /// Upper bound on the Wasserstein-1 sensitivity of the map.
    ///
    /// Couples `D(theta)` and `D(theta')` through the same `z0`, so
    /// `W1 <= E|S(theta - theta') z0| + |M (theta - theta')|`. The first term is
    /// bounded by the Frobenius norm of `S(theta - theta')`, whose worst case
    /// over unit directions is the operator norm of the stacked coefficients.
    /// Exact for mean-only shifts.
    pub fn sensitivity_bound(&self) -> f64 {
        let d = self.dim();
        let mut stacked = DMatrix::zeros(d * d, d);
        for (k, s) in self.sigma_coeffs.iter().enumerate() {
            for (i, v) in s.iter().enumerate() {
                stacked[(i, k)] = *v;
            }
        }
        self.mu_norm() + operator_norm(&stacked)
    }
}

/// Scalar linear shift `z = (sigma0 + sigma theta) z0 + mu0 + mu theta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarShiftModel {
    pub sigma0: f64,
    pub sigma: f64,
    pub mu0: f64,
    pub mu: f64,
}

impl ScalarShiftModel {
    pub fn new(sigma0: f64, sigma: f64, mu0: f64, mu: f64) -> Result<Self> {
        if ![sigma0, sigma, mu0, mu].iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidParameter("non-finite scalar model parameter".into()));
        }
        if sigma0 <= 0.0 {
            return Err(Error::InvalidParameter(format!("sigma0 must be > 0, got {sigma0}")));
        }
        if sigma < 0.0 {
            return Err(Error::InvalidParameter(format!("sigma must be >= 0, got {sigma}")));
        }
        Ok(Self {
            sigma0,
            sigma,
            mu0,
            mu,
        })
    }

    /// `|mu| < 1`. Not enforced; diverging regimes are simulable.
    pub fn contractive(&self) -> bool {
        self.mu.abs() < 1.0
    }

    pub fn to_linear(&self, base: BaseNoise) -> LinearShiftModel {
        let m = |x: f64| DMatrix::from_element(1, 1, x);
        LinearShiftModel {
            sigma0: m(self.sigma0),
            sigma_coeffs: vec![m(self.sigma)],
            mu0: DVector::from_element(1, self.mu0),
            mu: m(self.mu),
            base,
        }
    }
}

impl From<ScalarShiftModel> for LinearShiftModel {
    fn from(s: ScalarShiftModel) -> Self {
        s.to_linear(BaseNoise::StandardGaussian)
    }
}

pub(crate) fn operator_norm(m: &DMatrix<f64>) -> f64 {
    if m.iter().all(|&x| x == 0.0) {
        return 0.0;
    }
    if m.nrows() == 1 && m.ncols() == 1 {
        return m[(0, 0)].abs();
    }
    m.singular_values().max()
}

fn check_square(m: &DMatrix<f64>, d: usize, what: &str) -> Result<()> {
    if m.nrows() != d || m.ncols() != d {
        return Err(Error::InvalidParameter(format!(
            "{what} must be {d}x{d}, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}
