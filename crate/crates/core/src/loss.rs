//! Quadratic (Mahalanobis) loss `l(z; theta) = 1/2 (theta - z)^T A (theta - z)`
//! with closed-form empirical and regularized minimizers.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticLoss {
    a: DMatrix<f64>,
    gamma: f64,
    beta_z: f64,
    /// `Some(c)` when `A = c I`.
    isotropic: Option<f64>,
}

/// Penalty added to a retraining objective, always 1-strongly convex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    /// `1/2 |theta - anchor|^2`
    #[default]
    Proximal,
    /// `1/2 |theta|^2`
    Ridge,
}

impl QuadraticLoss {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        let d = a.nrows();
        if d == 0 || a.ncols() != d {
            return Err(Error::InvalidParameter(format!(
                "loss matrix must be square and non-empty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if !a.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidParameter("non-finite loss matrix".into()));
        }
        if (&a - a.transpose()).amax() > 1e-12 {
            return Err(Error::InvalidParameter("loss matrix is not symmetric".into()));
        }
        let eig = a.clone().symmetric_eigenvalues();
        let (gamma, beta_z) = (eig.min(), eig.max());
        if gamma <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "loss matrix is not positive definite (min eigenvalue {gamma})"
            )));
        }
        let c = a[(0, 0)];
        let isotropic = (a == DMatrix::identity(d, d) * c).then_some(c);
        Ok(Self {
            a,
            gamma,
            beta_z,
            isotropic,
        })
    }

    /// Plain squared loss, `A = I`.
    pub fn squared(d: usize) -> Self {
        Self {
            a: DMatrix::identity(d, d),
            gamma: 1.0,
            beta_z: 1.0,
            isotropic: Some(1.0),
        }
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    /// Strong-convexity modulus in `theta`: smallest eigenvalue of `A`.
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Smoothness constant in `z`: largest eigenvalue of `A`.
    pub fn beta_z(&self) -> f64 {
        self.beta_z
    }

    pub fn value(&self, z: &DVector<f64>, theta: &DVector<f64>) -> Result<f64> {
        check_dim(self.dim(), z.len())?;
        check_dim(self.dim(), theta.len())?;
        let r = theta - z;
        Ok(0.5 * r.dot(&(&self.a * &r)))
    }

    pub fn grad_theta(&self, z: &DVector<f64>, theta: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), z.len())?;
        check_dim(self.dim(), theta.len())?;
        Ok(&self.a * (theta - z))
    }

    /// Minimizer of the average loss over the rows of `samples`: the sample
    /// mean, whatever `A` is.
    pub fn erm_minimizer(&self, samples: &DMatrix<f64>) -> Result<DVector<f64>> {
        if samples.nrows() == 0 {
            return Err(Error::EmptySamples);
        }
        check_dim(self.dim(), samples.ncols())?;
        Ok(sample_mean(samples))
    }

    pub fn reg_erm_minimizer(
        &self,
        samples: &DMatrix<f64>,
        lambda: f64,
        anchor: &DVector<f64>,
        reg: Regularizer,
    ) -> Result<DVector<f64>> {
        let mean = self.erm_minimizer(samples)?;
        self.reg_minimizer_from_mean(&mean, lambda, anchor, reg)
    }

    /// Solves `(A + lambda I) theta = A zbar + lambda r` with `r` the anchor
    /// (proximal) or zero (ridge). `lambda = 0` returns `zbar` unchanged.
    pub fn reg_minimizer_from_mean(
        &self,
        mean: &DVector<f64>,
        lambda: f64,
        anchor: &DVector<f64>,
        reg: Regularizer,
    ) -> Result<DVector<f64>> {
        check_dim(self.dim(), mean.len())?;
        check_dim(self.dim(), anchor.len())?;
        if !(lambda >= 0.0) {
            return Err(Error::NegativeLambda(lambda));
        }
        if lambda == 0.0 {
            return Ok(mean.clone());
        }
        if let Some(c) = self.isotropic {
            let out = match (reg, c == 1.0) {
                (Regularizer::Proximal, true) => (mean + anchor * lambda) / (1.0 + lambda),
                (Regularizer::Ridge, true) => mean / (1.0 + lambda),
                (Regularizer::Proximal, false) => (mean * c + anchor * lambda) / (c + lambda),
                (Regularizer::Ridge, false) => mean * (c / (c + lambda)),
            };
            return Ok(out);
        }
        let d = self.dim();
        let lhs = &self.a + DMatrix::identity(d, d) * lambda;
        let mut rhs = &self.a * mean;
        if reg == Regularizer::Proximal {
            rhs += anchor * lambda;
        }
        let chol = lhs
            .cholesky()
            .ok_or_else(|| Error::Singular("A + lambda I".into()))?;
        Ok(chol.solve(&rhs))
    }
}

pub(crate) fn sample_mean(samples: &DMatrix<f64>) -> DVector<f64> {
    let n = samples.nrows();
    let mut sum = DVector::zeros(samples.ncols());
    for row in samples.row_iter() {
        sum += row.transpose();
    }
    sum / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn diag14() -> QuadraticLoss {
        QuadraticLoss::new(DMatrix::from_diagonal(&v(&[1.0, 4.0]))).unwrap()
    }

    #[test]
    fn value_examples() {
        let sq = QuadraticLoss::squared(1);
        assert_eq!(sq.value(&v(&[1.5]), &v(&[1.5])).unwrap(), 0.0);
        assert_eq!(sq.value(&v(&[0.0]), &v(&[2.0])).unwrap(), 2.0);
        assert_eq!(diag14().value(&v(&[0.0, 0.0]), &v(&[1.0, 1.0])).unwrap(), 2.5);
    }

    #[test]
    fn grad_examples() {
        let sq = QuadraticLoss::squared(1);
        assert_eq!(sq.grad_theta(&v(&[0.3]), &v(&[0.3])).unwrap(), v(&[0.0]));
        assert_eq!(sq.grad_theta(&v(&[1.0]), &v(&[3.0])).unwrap(), v(&[2.0]));
        assert_eq!(diag14().grad_theta(&v(&[0.0, 0.0]), &v(&[1.0, 1.0])).unwrap(), v(&[1.0, 4.0]));
        assert!(diag14().grad_theta(&v(&[0.0]), &v(&[1.0, 1.0])).is_err());
    }

    #[test]
    fn construction_rejects_bad_matrices() {
        assert!(QuadraticLoss::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0])).is_err());
        assert!(QuadraticLoss::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])).is_err());
        assert!(QuadraticLoss::new(DMatrix::zeros(0, 0)).is_err());
        let l = QuadraticLoss::new(DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0])).unwrap();
        assert_abs_diff_eq!(l.gamma(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l.beta_z(), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn erm_examples() {
        let sq = QuadraticLoss::squared(1);
        assert_eq!(sq.erm_minimizer(&DMatrix::from_column_slice(2, 1, &[0.0, 2.0])).unwrap(), v(&[1.0]));
        assert_eq!(sq.erm_minimizer(&DMatrix::from_column_slice(1, 1, &[0.7])).unwrap(), v(&[0.7]));
        assert_eq!(sq.erm_minimizer(&DMatrix::zeros(0, 1)), Err(Error::EmptySamples));

        let samples = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 3.0, 4.0]);
        let a = QuadraticLoss::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0])).unwrap();
        let theta = a.erm_minimizer(&samples).unwrap();
        assert_eq!(theta, v(&[2.0, 2.0]));
        let mut g = DVector::zeros(2);
        for r in samples.row_iter() {
            g += a.grad_theta(&r.transpose(), &theta).unwrap();
        }
        assert!(g.amax() < 1e-10);
    }

    #[test]
    fn reg_erm_examples() {
        let sq = QuadraticLoss::squared(1);
        let one = DMatrix::from_column_slice(1, 1, &[1.0]);
        let two = DMatrix::from_column_slice(1, 1, &[2.0]);
        assert_eq!(sq.reg_erm_minimizer(&one, 1.0, &v(&[3.0]), Regularizer::Proximal).unwrap(), v(&[2.0]));
        assert_eq!(sq.reg_erm_minimizer(&two, 1.0, &v(&[3.0]), Regularizer::Ridge).unwrap(), v(&[1.0]));
        let s = DMatrix::from_column_slice(3, 1, &[0.1, 0.7, -2.3]);
        for reg in [Regularizer::Proximal, Regularizer::Ridge] {
            assert_eq!(
                sq.reg_erm_minimizer(&s, 0.0, &v(&[9.0]), reg).unwrap(),
                sq.erm_minimizer(&s).unwrap()
            );
        }
        assert_eq!(
            sq.reg_erm_minimizer(&one, -0.5, &v(&[0.0]), Regularizer::Ridge),
            Err(Error::NegativeLambda(-0.5))
        );
        assert_eq!(
            sq.reg_erm_minimizer(&DMatrix::zeros(0, 1), 1.0, &v(&[0.0]), Regularizer::Ridge),
            Err(Error::EmptySamples)
        );
    }

    #[test]
    fn general_a_matches_isotropic_path() {
        // c I handled by the closed form and by the linear solve must agree
        let iso = QuadraticLoss::new(DMatrix::identity(2, 2) * 3.0).unwrap();
        let mut general = iso.clone();
        general.isotropic = None;
        let mean = v(&[0.4, -1.2]);
        let anchor = v(&[2.0, 0.5]);
        for reg in [Regularizer::Proximal, Regularizer::Ridge] {
            let a = iso.reg_minimizer_from_mean(&mean, 0.7, &anchor, reg).unwrap();
            let b = general.reg_minimizer_from_mean(&mean, 0.7, &anchor, reg).unwrap();
            assert!((a - b).amax() < 1e-14);
        }
    }

    mod props {
        use super::*;
        use crate::stream::RngStream;
        use proptest::prelude::*;

        fn random_pd(d: usize, s: &mut RngStream) -> DMatrix<f64> {
            let b = DMatrix::from_fn(d, d, |_, _| s.uniform(-1.0, 1.0));
            let a = &b * b.transpose() + DMatrix::identity(d, d) * 0.1;
            (&a + a.transpose()) * 0.5
        }

        fn random_vec(d: usize, s: &mut RngStream) -> DVector<f64> {
            DVector::from_fn(d, |_, _| s.uniform(-2.0, 2.0))
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn erm_is_invariant_to_a(d in 1usize..=10, n in 1usize..20, seed in any::<u64>()) {
                let mut s = RngStream::new(seed, 0, 0);
                let samples = DMatrix::from_fn(n, d, |_, _| s.uniform(-3.0, 3.0));
                let a = QuadraticLoss::new(random_pd(d, &mut s)).unwrap();
                let b = QuadraticLoss::new(random_pd(d, &mut s)).unwrap();
                prop_assert_eq!(a.erm_minimizer(&samples).unwrap(), b.erm_minimizer(&samples).unwrap());
            }

            #[test]
            fn reg_minimizer_zeroes_gradient(
                d in 1usize..=10,
                n in 1usize..20,
                lambda in 0.0f64..50.0,
                ridge in any::<bool>(),
                seed in any::<u64>(),
            ) {
                let mut s = RngStream::new(seed, 0, 0);
                let samples = DMatrix::from_fn(n, d, |_, _| s.uniform(-3.0, 3.0));
                let loss = QuadraticLoss::new(random_pd(d, &mut s)).unwrap();
                let anchor = random_vec(d, &mut s);
                let reg = if ridge { Regularizer::Ridge } else { Regularizer::Proximal };
                let theta = loss.reg_erm_minimizer(&samples, lambda, &anchor, reg).unwrap();
                let mut g = DVector::zeros(d);
                for r in samples.row_iter() {
                    g += loss.grad_theta(&r.transpose(), &theta).unwrap();
                }
                g /= n as f64;
                let target = if ridge { DVector::zeros(d) } else { anchor.clone() };
                g += (&theta - target) * lambda;
                prop_assert!(g.amax() < 1e-10, "gradient residual {}", g.amax());
            }

            #[test]
            fn gradient_is_beta_lipschitz_in_z(d in 1usize..=10, seed in any::<u64>()) {
                let mut s = RngStream::new(seed, 1, 0);
                let loss = QuadraticLoss::new(random_pd(d, &mut s)).unwrap();
                prop_assert!(loss.gamma() <= loss.beta_z());
                for _ in 0..16 {
                    let (z1, z2, th) = (random_vec(d, &mut s), random_vec(d, &mut s), random_vec(d, &mut s));
                    let lhs = (loss.grad_theta(&z1, &th).unwrap() - loss.grad_theta(&z2, &th).unwrap()).norm();
                    prop_assert!(lhs <= loss.beta_z() * (&z1 - &z2).norm() * (1.0 + 1e-12) + 1e-15);
                }
            }
        }
    }
}
