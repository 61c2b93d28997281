//! Retraining procedures and their trajectories.
//!
//! All four procedures share one step: form the (population or empirical)
//! mean of the data drawn at the previous parameter, then return the
//! minimizer of the quadratic objective plus `lambda_{t-1} R(theta, theta_{t-1})`.
//!
//! | procedure | data at step `t` | penalty |
//! |-----------|------------------|---------|
//! | [`run_rrm`] | exact mean of `D(theta_{t-1})` | none |
//! | [`run_rerm`] | `N_t` draws from `D(theta_{t-1})` | none |
//! | [`run_reg_rrm`] | exact mean | scheduled |
//! | [`run_reg_rerm`] | `N_t` draws | scheduled |
//!
//! Draws for step `t` of replication `r` come from the stream keyed by
//! `(seed, r, t)`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::loss::{QuadraticLoss, Regularizer};
use crate::oracle;
use crate::shift_model::{LinearShiftModel, ScalarShiftModel};
use crate::stream::RngStream;

/// Iterates with norm above this are treated as divergence.
pub const DIVERGENCE_NORM: f64 = 1e12;

/// Number of samples `N_t` drawn at step `t >= 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSchedule {
    Constant(usize),
    /// `max(1, ceil(ln(t + 1)))`
    LogGrowth,
    /// `n1 / t`; real valued, so only usable with effective noise.
    InverseT { n1: f64 },
    /// Entry `t - 1` is used at step `t`; the last entry repeats.
    Custom(Vec<f64>),
}

impl SampleSchedule {
    pub fn size_at(&self, t: usize) -> f64 {
        debug_assert!(t >= 1);
        match self {
            SampleSchedule::Constant(n) => *n as f64,
            SampleSchedule::LogGrowth => ((t as f64 + 1.0).ln().ceil()).max(1.0),
            SampleSchedule::InverseT { n1 } => n1 / t as f64,
            SampleSchedule::Custom(v) => v[(t - 1).min(v.len() - 1)],
        }
    }

    fn validate(&self, mode: Mode) -> Result<()> {
        let integer = mode == Mode::EmpiricalInteger;
        match self {
            SampleSchedule::Constant(0) => Err(Error::InvalidParameter("sample size must be >= 1".into())),
            SampleSchedule::Constant(_) | SampleSchedule::LogGrowth => Ok(()),
            SampleSchedule::InverseT { n1 } => {
                if !(*n1 > 0.0) || !n1.is_finite() {
                    Err(Error::InvalidParameter(format!("inverse-t scale must be > 0, got {n1}")))
                } else if integer {
                    Err(Error::ScheduleModeMismatch(
                        "inverse-t sample sizes are not integers; use effective-noise mode".into(),
                    ))
                } else {
                    Ok(())
                }
            }
            SampleSchedule::Custom(v) => {
                if v.is_empty() {
                    return Err(Error::InvalidParameter("empty custom sample schedule".into()));
                }
                if v.iter().any(|&n| !(n > 0.0) || !n.is_finite()) {
                    return Err(Error::InvalidParameter("custom sample sizes must be > 0".into()));
                }
                if integer && v.iter().any(|&n| n.fract() != 0.0) {
                    return Err(Error::ScheduleModeMismatch(
                        "non-integer custom sample sizes need effective-noise mode".into(),
                    ));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegKind {
    None,
    Constant(f64),
    /// `lambda_t = t`
    LinearInT,
    /// Entry `t` is `lambda_t`; the last entry repeats.
    Custom(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegSchedule {
    pub kind: RegKind,
    pub reg: Regularizer,
}

impl RegSchedule {
    pub fn none() -> Self {
        Self {
            kind: RegKind::None,
            reg: Regularizer::Proximal,
        }
    }

    pub fn constant(lambda: f64, reg: Regularizer) -> Self {
        Self {
            kind: RegKind::Constant(lambda),
            reg,
        }
    }

    pub fn linear_in_t(reg: Regularizer) -> Self {
        Self {
            kind: RegKind::LinearInT,
            reg,
        }
    }

    /// `lambda_t = t + 1` over a horizon, expressed as a custom list.
    pub fn linear_in_t_plus_one(horizon: usize, reg: Regularizer) -> Self {
        Self {
            kind: RegKind::Custom((0..horizon.max(1)).map(|t| t as f64 + 1.0).collect()),
            reg,
        }
    }

    /// `lambda_t` for `t >= 0`; step `t` uses `lambda_at(t - 1)`.
    pub fn lambda_at(&self, t: usize) -> f64 {
        match &self.kind {
            RegKind::None => 0.0,
            RegKind::Constant(l) => *l,
            RegKind::LinearInT => t as f64,
            RegKind::Custom(v) => v[t.min(v.len() - 1)],
        }
    }

    fn validate(&self) -> Result<()> {
        match &self.kind {
            RegKind::Constant(l) if !(*l >= 0.0) || !l.is_finite() => Err(Error::NegativeLambda(*l)),
            RegKind::Custom(v) if v.is_empty() => {
                Err(Error::InvalidParameter("empty custom regularization schedule".into()))
            }
            RegKind::Custom(v) => match v.iter().find(|l| !(**l >= 0.0) || !l.is_finite()) {
                Some(l) => Err(Error::NegativeLambda(*l)),
                None => Ok(()),
            },
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Retrain on the population distribution.
    ExactExpectation,
    /// Retrain on `N_t` actual draws.
    EmpiricalInteger,
    /// Replace the empirical mean by the population mean plus Gaussian noise
    /// with the covariance of an `N_t`-sample mean; `N_t` may be real.
    EmpiricalEffectiveNoise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Rrm,
    Rerm,
    RegRrm,
    RegRerm,
}

impl Algorithm {
    fn empirical(self) -> bool {
        matches!(self, Algorithm::Rerm | Algorithm::RegRerm)
    }

    fn regularized(self) -> bool {
        matches!(self, Algorithm::RegRrm | Algorithm::RegRerm)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub horizon: usize,
    pub theta0: DVector<f64>,
    pub seed: u64,
    /// Replication index; selects the stream family together with `seed`.
    pub replication: u64,
    pub mode: Mode,
    pub samples: SampleSchedule,
    pub reg: RegSchedule,
    pub record_metrics: bool,
}

impl RunConfig {
    pub fn exact(horizon: usize, theta0: DVector<f64>) -> Self {
        Self {
            horizon,
            theta0,
            seed: 0,
            replication: 0,
            mode: Mode::ExactExpectation,
            samples: SampleSchedule::Constant(1),
            reg: RegSchedule::none(),
            record_metrics: false,
        }
    }

    pub fn empirical(horizon: usize, theta0: DVector<f64>, samples: SampleSchedule, seed: u64) -> Self {
        Self {
            mode: Mode::EmpiricalInteger,
            samples,
            seed,
            ..Self::exact(horizon, theta0)
        }
    }

    pub fn with_reg(mut self, reg: RegSchedule) -> Self {
        self.reg = reg;
        self
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_metrics(mut self) -> Self {
        self.record_metrics = true;
        self
    }

    pub fn for_replication(&self, replication: u64) -> Self {
        Self {
            replication,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub n_used: Option<f64>,
    pub lambda_used: Option<f64>,
    pub pr: Option<f64>,
    pub dist2_ps: Option<f64>,
    pub dist2_po: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `theta_0 ..= theta_T`, cut short after the first diverged iterate.
    pub iterates: Vec<DVector<f64>>,
    pub per_step: Vec<StepRecord>,
    pub diverged: bool,
}

impl Trajectory {
    pub fn last(&self) -> &DVector<f64> {
        self.iterates.last().expect("trajectory always holds theta_0")
    }
}

pub fn run_rrm(model: &LinearShiftModel, loss: &QuadraticLoss, config: &RunConfig) -> Result<Trajectory> {
    simulate(Algorithm::Rrm, model, loss, config)
}

pub fn run_rerm(model: &LinearShiftModel, loss: &QuadraticLoss, config: &RunConfig) -> Result<Trajectory> {
    simulate(Algorithm::Rerm, model, loss, config)
}

pub fn run_reg_rrm(model: &LinearShiftModel, loss: &QuadraticLoss, config: &RunConfig) -> Result<Trajectory> {
    simulate(Algorithm::RegRrm, model, loss, config)
}

pub fn run_reg_rerm(model: &LinearShiftModel, loss: &QuadraticLoss, config: &RunConfig) -> Result<Trajectory> {
    simulate(Algorithm::RegRerm, model, loss, config)
}

pub fn run(algo: Algorithm, model: &LinearShiftModel, loss: &QuadraticLoss, config: &RunConfig) -> Result<Trajectory> {
    simulate(algo, model, loss, config)
}

/// Reference points used for per-step metrics.
struct MetricRefs {
    ps: Option<DVector<f64>>,
    po: Option<DVector<f64>>,
}

impl MetricRefs {
    fn new(model: &LinearShiftModel) -> Self {
        let ps = oracle::fixed_point(model).ok();
        let po = if let Some((sigma0, sigma, mu0, mu)) = model.as_scalar() {
            let s = ScalarShiftModel { sigma0, sigma, mu0, mu };
            Some(DVector::from_element(1, oracle::theta_po_scalar(&s)))
        } else if model.is_mean_shift() && model.is_contractive() {
            ps.clone()
        } else {
            None
        };
        Self { ps, po }
    }
}

fn simulate(algo: Algorithm, model: &LinearShiftModel, loss: &QuadraticLoss, config: &RunConfig) -> Result<Trajectory> {
    check_dim(model.dim(), loss.dim())?;
    check_dim(model.dim(), config.theta0.len())?;
    if config.horizon == 0 {
        return Err(Error::InvalidParameter("horizon must be >= 1".into()));
    }
    match (algo.empirical(), config.mode) {
        (false, Mode::ExactExpectation) => {}
        (true, Mode::EmpiricalInteger | Mode::EmpiricalEffectiveNoise) => config.samples.validate(config.mode)?,
        (false, mode) => {
            return Err(Error::ScheduleModeMismatch(format!(
                "{algo:?} retrains on the population; mode {mode:?} not supported"
            )))
        }
        (true, mode) => {
            return Err(Error::ScheduleModeMismatch(format!("{algo:?} needs an empirical mode, got {mode:?}")))
        }
    }
    if algo.regularized() {
        config.reg.validate()?;
    }

    let refs = config.record_metrics.then(|| MetricRefs::new(model));
    let record = |t: usize, theta: &DVector<f64>, n_used, lambda_used| -> Result<StepRecord> {
        let mut rec = StepRecord {
            t,
            n_used,
            lambda_used,
            pr: None,
            dist2_ps: None,
            dist2_po: None,
        };
        if let Some(refs) = &refs {
            rec.pr = Some(oracle::pr_exact(model, loss, theta)?);
            rec.dist2_ps = refs.ps.as_ref().map(|p| (theta - p).norm_squared());
            rec.dist2_po = refs.po.as_ref().map(|p| (theta - p).norm_squared());
        }
        Ok(rec)
    };

    let mut iterates = Vec::with_capacity(config.horizon + 1);
    let mut per_step = Vec::with_capacity(config.horizon + 1);
    per_step.push(record(0, &config.theta0, None, None)?);
    iterates.push(config.theta0.clone());
    let mut diverged = false;

    for t in 1..=config.horizon {
        let prev = &iterates[t - 1];
        let (zbar, n_used) = match config.mode {
            Mode::ExactExpectation => (model.mean_of(prev)?, None),
            Mode::EmpiricalInteger => {
                let n = config.samples.size_at(t) as usize;
                let mut stream = RngStream::new(config.seed, config.replication, t as u64);
                let samples = model.sample(prev, n, &mut stream)?;
                (loss.erm_minimizer(&samples)?, Some(n as f64))
            }
            Mode::EmpiricalEffectiveNoise => {
                let n = config.samples.size_at(t);
                let mut stream = RngStream::new(config.seed, config.replication, t as u64);
                let xi = DVector::from_fn(model.dim(), |_, _| stream.standard_normal());
                let noise = model.cov_factor(prev)? * xi / n.sqrt();
                (model.mean_of(prev)? + noise, Some(n))
            }
        };
        let (next, lambda_used) = if algo.regularized() {
            let lambda = config.reg.lambda_at(t - 1);
            let next = loss.reg_minimizer_from_mean(&zbar, lambda, prev, config.reg.reg)?;
            (next, Some(lambda))
        } else {
            (zbar, None)
        };
        let norm = next.norm();
        per_step.push(record(t, &next, n_used, lambda_used)?);
        iterates.push(next);
        if !(norm <= DIVERGENCE_NORM) {
            diverged = true;
            break;
        }
    }

    Ok(Trajectory {
        iterates,
        per_step,
        diverged,
    })
}
