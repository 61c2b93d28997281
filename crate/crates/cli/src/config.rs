//! JSON configuration file and its resolution into library types.
//!
//! Every block is optional. Unknown keys are rejected. Command-line flags are
//! merged into this structure before resolution, so the merged value is what
//! gets echoed into outputs.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use performa_core::dynamics::{Algorithm, Mode, RegSchedule, SampleSchedule};
use performa_core::{BaseNoise, DMatrix, DVector, LinearShiftModel, QuadraticLoss, Regularizer};
use serde::{Deserialize, Serialize};

use crate::Failure;

pub const DEFAULT_SIGMA0: f64 = 1.0;
pub const DEFAULT_SIGMA: f64 = 0.0;
pub const DEFAULT_MU0: f64 = 1.0;
pub const DEFAULT_MU: f64 = 0.5;
pub const DEFAULT_HORIZON: usize = 50;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub seed: Option<u64>,
    pub shift: ShiftBlock,
    pub loss: LossBlock,
    pub run: RunBlock,
    pub experiment: ExperimentBlock,
    pub sweep: Option<SweepBlock>,
    pub output: OutputBlock,
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::config(format!("config {}: {e}", path.display())))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// Writes the implied defaults into the model, loss and run blocks so the
    /// echoed config states every value used.
    pub fn fill_defaults(&mut self) {
        self.seed.get_or_insert(0);
        let s = &mut self.shift;
        if s.sigma0_matrix.is_none() {
            s.sigma0.get_or_insert(DEFAULT_SIGMA0);
        }
        if s.sigma_coeffs.is_none() {
            s.sigma.get_or_insert(DEFAULT_SIGMA);
        }
        if s.mu0_vector.is_none() {
            s.mu0.get_or_insert(DEFAULT_MU0);
            s.dim.get_or_insert(1);
        }
        if s.mu_matrix.is_none() {
            s.mu.get_or_insert(DEFAULT_MU);
        }
        s.base.get_or_insert_with(BaseArg::default);
        if self.loss.matrix.is_none() {
            self.loss.scale.get_or_insert(1.0);
        }
        let r = &mut self.run;
        let algo = *r.algo.get_or_insert(AlgoArg::Rrm);
        r.horizon.get_or_insert(DEFAULT_HORIZON);
        r.theta0.get_or_insert_with(|| vec![0.0]);
        r.mode.get_or_insert(match algo {
            AlgoArg::Rrm | AlgoArg::RegRrm => ModeArg::Exact,
            AlgoArg::Rerm | AlgoArg::RegRerm => ModeArg::Integer,
        });
        r.schedule.get_or_insert_with(ScheduleArg::default);
        r.n.get_or_insert(1);
        r.lambda.get_or_insert(LambdaArg::Value(0.0));
        r.reg.get_or_insert_with(RegArg::default);
    }
}

/// Scalar parameters describe an isotropic model of dimension `dim`:
/// `S0 = sigma0 I`, `S(theta) = sigma diag(theta)`, `m0 = mu0 1`, `M = mu I`.
/// Matrix fields replace the corresponding scalar-derived parts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftBlock {
    pub sigma0: Option<f64>,
    pub sigma: Option<f64>,
    pub mu0: Option<f64>,
    pub mu: Option<f64>,
    pub dim: Option<usize>,
    pub base: Option<BaseArg>,
    pub sigma0_matrix: Option<Vec<Vec<f64>>>,
    pub sigma_coeffs: Option<Vec<Vec<Vec<f64>>>>,
    pub mu0_vector: Option<Vec<f64>>,
    pub mu_matrix: Option<Vec<Vec<f64>>>,
}

impl ShiftBlock {
    pub fn is_set(&self) -> bool {
        *self != Self::default()
    }

    pub fn dim(&self) -> usize {
        self.mu0_vector
            .as_ref()
            .map(Vec::len)
            .or(self.dim)
            .unwrap_or(1)
    }

    pub fn build(&self) -> Result<LinearShiftModel, Failure> {
        let d = self.dim();
        if d == 0 {
            return Err(Failure::config("dimension must be >= 1"));
        }
        let eye = DMatrix::<f64>::identity(d, d);
        let sigma0 = match &self.sigma0_matrix {
            Some(rows) => matrix(rows, d, "sigma0_matrix")?,
            None => &eye * self.sigma0.unwrap_or(DEFAULT_SIGMA0),
        };
        let coeffs = match &self.sigma_coeffs {
            Some(list) => list
                .iter()
                .map(|rows| matrix(rows, d, "sigma_coeffs"))
                .collect::<Result<Vec<_>, _>>()?,
            None => {
                let s = self.sigma.unwrap_or(DEFAULT_SIGMA);
                (0..d)
                    .map(|k| {
                        let mut m = DMatrix::zeros(d, d);
                        m[(k, k)] = s;
                        m
                    })
                    .collect()
            }
        };
        let mu0 = match &self.mu0_vector {
            Some(v) => DVector::from_vec(v.clone()),
            None => DVector::from_element(d, self.mu0.unwrap_or(DEFAULT_MU0)),
        };
        let mu = match &self.mu_matrix {
            Some(rows) => matrix(rows, d, "mu_matrix")?,
            None => &eye * self.mu.unwrap_or(DEFAULT_MU),
        };
        let base = self.base.unwrap_or_default().into();
        Ok(LinearShiftModel::new(sigma0, coeffs, mu0, mu, base)?)
    }
}

fn matrix(rows: &[Vec<f64>], d: usize, name: &str) -> Result<DMatrix<f64>, Failure> {
    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
        return Err(Failure::config(format!("{name} must be {d}x{d}")));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

/// `A = matrix` if given, else `scale * I`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossBlock {
    pub matrix: Option<Vec<Vec<f64>>>,
    pub scale: Option<f64>,
}

impl LossBlock {
    pub fn is_set(&self) -> bool {
        *self != Self::default()
    }

    pub fn build(&self, d: usize) -> Result<QuadraticLoss, Failure> {
        let a = match &self.matrix {
            Some(rows) => matrix(rows, d, "loss matrix")?,
            None => DMatrix::identity(d, d) * self.scale.unwrap_or(1.0),
        };
        Ok(QuadraticLoss::new(a)?)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunBlock {
    pub algo: Option<AlgoArg>,
    pub horizon: Option<usize>,
    /// One value is broadcast to every coordinate.
    pub theta0: Option<Vec<f64>>,
    pub mode: Option<ModeArg>,
    pub schedule: Option<ScheduleArg>,
    /// Constant sample size, or the scale `n1` of an inverse-t schedule.
    #[serde(rename = "N")]
    pub n: Option<usize>,
    pub lambda: Option<LambdaArg>,
    pub reg: Option<RegArg>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentBlock {
    pub name: Option<String>,
    pub replications: Option<usize>,
    pub horizon: Option<usize>,
    #[serde(rename = "N")]
    pub n: Option<usize>,
    pub mc_samples: Option<usize>,
    pub t_grid: Option<Vec<usize>>,
    pub theta0: Option<Vec<f64>>,
    pub mode: Option<ModeArg>,
    pub rel_tol: Option<f64>,
    pub se_mult: Option<f64>,
    pub abs_tol: Option<f64>,
    pub decay_tol: Option<f64>,
}

/// Value lists per swept parameter. Absent keys hold the shift/run value.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepBlock {
    pub sigma0: Option<Vec<f64>>,
    pub sigma: Option<Vec<f64>>,
    pub mu0: Option<Vec<f64>>,
    pub mu: Option<Vec<f64>>,
    #[serde(rename = "N")]
    pub n: Option<Vec<usize>>,
    pub lambda: Option<Vec<f64>>,
    pub outputs: Option<Vec<String>>,
}

impl SweepBlock {
    pub fn has_grid(&self) -> bool {
        self.sigma0.is_some()
            || self.sigma.is_some()
            || self.mu0.is_some()
            || self.mu.is_some()
            || self.n.is_some()
            || self.lambda.is_some()
    }

    /// Applies a `key=v1,v2,...` flag.
    pub fn set_from_flag(&mut self, spec: &str) -> Result<(), Failure> {
        let (key, values) = spec
            .split_once('=')
            .ok_or_else(|| Failure::config(format!("grid flag '{spec}' must look like key=v1,v2")))?;
        let floats = || parse_list::<f64>(values, key);
        match key {
            "sigma0" => self.sigma0 = Some(floats()?),
            "sigma" => self.sigma = Some(floats()?),
            "mu0" => self.mu0 = Some(floats()?),
            "mu" => self.mu = Some(floats()?),
            "lambda" => self.lambda = Some(floats()?),
            "N" | "n" => self.n = Some(parse_list::<usize>(values, key)?),
            _ => return Err(Failure::config(format!("unknown grid key '{key}'"))),
        }
        Ok(())
    }
}

pub fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, Failure> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Failure::config(format!("bad value '{s}' for {what}")))
        })
        .collect()
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputBlock {
    /// Not echoed: where a result is written never changes its content.
    #[serde(skip_serializing)]
    pub path: Option<PathBuf>,
    pub format: Option<Format>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlgoArg {
    Rrm,
    Rerm,
    RegRrm,
    RegRerm,
}

impl From<AlgoArg> for Algorithm {
    fn from(a: AlgoArg) -> Self {
        match a {
            AlgoArg::Rrm => Algorithm::Rrm,
            AlgoArg::Rerm => Algorithm::Rerm,
            AlgoArg::RegRrm => Algorithm::RegRrm,
            AlgoArg::RegRerm => Algorithm::RegRerm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    Exact,
    Integer,
    Effective,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Exact => Mode::ExactExpectation,
            ModeArg::Integer => Mode::EmpiricalInteger,
            ModeArg::Effective => Mode::EmpiricalEffectiveNoise,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegArg {
    #[default]
    Proximal,
    Ridge,
}

impl From<RegArg> for Regularizer {
    fn from(r: RegArg) -> Self {
        match r {
            RegArg::Proximal => Regularizer::Proximal,
            RegArg::Ridge => Regularizer::Ridge,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaseArg {
    #[default]
    Gaussian,
    Rademacher,
}

impl From<BaseArg> for BaseNoise {
    fn from(b: BaseArg) -> Self {
        match b {
            BaseArg::Gaussian => BaseNoise::StandardGaussian,
            BaseArg::Rademacher => BaseNoise::Rademacher,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleArg {
    /// `N_t = N`
    #[default]
    Const,
    /// `N_t = max(1, ceil(ln(t + 1)))`
    Log,
    /// `N_t = N / t`, effective-noise mode only
    InvT,
}

impl ScheduleArg {
    pub fn build(self, n: usize) -> SampleSchedule {
        match self {
            ScheduleArg::Const => SampleSchedule::Constant(n),
            ScheduleArg::Log => SampleSchedule::LogGrowth,
            ScheduleArg::InvT => SampleSchedule::InverseT { n1: n as f64 },
        }
    }
}

/// A literal weight or one of the tokens `star`, `t`, `t+1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaArg {
    Value(f64),
    Token(String),
}

impl std::str::FromStr for LambdaArg {
    type Err = Failure;

    fn from_str(s: &str) -> Result<Self, Failure> {
        match s {
            "star" | "t" | "t+1" => Ok(LambdaArg::Token(s.into())),
            _ => s
                .parse()
                .map(LambdaArg::Value)
                .map_err(|_| Failure::config(format!("--lambda expects a number, star, t or t+1; got '{s}'"))),
        }
    }
}

impl LambdaArg {
    /// `lambda_star` is only consulted for the `star` token.
    pub fn schedule(
        &self,
        reg: Regularizer,
        horizon: usize,
        lambda_star: impl FnOnce() -> Result<f64, Failure>,
    ) -> Result<RegSchedule, Failure> {
        Ok(match self {
            LambdaArg::Value(l) => RegSchedule::constant(*l, reg),
            LambdaArg::Token(t) => match t.as_str() {
                "star" => RegSchedule::constant(lambda_star()?, reg),
                "t" => RegSchedule::linear_in_t(reg),
                "t+1" => RegSchedule::linear_in_t_plus_one(horizon, reg),
                other => return Err(Failure::config(format!("unknown lambda token '{other}'"))),
            },
        })
    }
}

pub fn broadcast_theta0(theta0: Option<&Vec<f64>>, d: usize) -> Result<DVector<f64>, Failure> {
    match theta0 {
        None => Ok(DVector::zeros(d)),
        Some(v) if v.len() == 1 => Ok(DVector::from_element(d, v[0])),
        Some(v) if v.len() == d => Ok(DVector::from_vec(v.clone())),
        Some(v) => Err(Failure::config(format!("theta0 has {} entries, model dimension is {d}", v.len()))),
    }
}
