use performa_core::dynamics::{self, Algorithm, Mode, RegSchedule, RunConfig};
use performa_core::experiments::{
    self, ExperimentKind, ExperimentSpec, ScheduleCase, Status, TheoremCheckResult, TolerancePolicy,
};
use performa_core::oracle::{self, SolutionReport};
use performa_core::{BaseNoise, DMatrix, DVector, Error, LinearShiftModel, QuadraticLoss, Regularizer, ScalarShiftModel};
use serde::Serialize;
use serde_json::{Map, Value};

use crate::config::{broadcast_theta0, CliConfig, Format, LambdaArg, ScheduleArg, ShiftBlock, DEFAULT_HORIZON};
use crate::output::{self, num, opt_num, vec_field, Csv};
use crate::Failure;

fn model_and_loss(shift: &ShiftBlock, cfg: &CliConfig) -> Result<(LinearShiftModel, QuadraticLoss), Failure> {
    let model = shift.build()?;
    let loss = cfg.loss.build(model.dim())?;
    Ok((model, loss))
}

fn is_identity(loss: &QuadraticLoss) -> bool {
    loss.matrix() == &DMatrix::identity(loss.dim(), loss.dim())
}

/// Scalar closed forms when available, otherwise the mean-shift solution.
fn solve_model(model: &LinearShiftModel, loss: &QuadraticLoss) -> Result<SolutionReport, Failure> {
    match model.as_scalar() {
        Some((sigma0, sigma, mu0, mu)) if is_identity(loss) => {
            let s = ScalarShiftModel::new(sigma0, sigma, mu0, mu).map_err(|e| Failure::regime(e.to_string()))?;
            Ok(oracle::solve_scalar(&s)?)
        }
        _ if model.is_mean_shift() => Ok(oracle::solve_mean_shift(model, loss)?),
        _ => Err(Failure::regime(
            "closed-form solution needs a mean-only shift, or a scalar covariance shift with unit loss",
        )),
    }
}

fn lambda_star(model: &LinearShiftModel, loss: &QuadraticLoss) -> Result<f64, Failure> {
    let report = solve_model(model, loss)?;
    match report.lambda_star {
        Some(l) if report.regime_flags.lambda_star_valid => Ok(l),
        other => Err(Failure::regime(format!("lambda* = {other:?} is not a valid regularization weight here"))),
    }
}

#[derive(Serialize)]
struct SolveBody<'a> {
    report: &'a SolutionReport,
}

pub fn solve(cfg: &CliConfig) -> Result<(), Failure> {
    let (model, loss) = model_and_loss(&cfg.shift, cfg)?;
    let report = solve_model(&model, &loss)?;
    let text = match cfg.output.format.unwrap_or(Format::Json) {
        Format::Json => output::json(cfg, SolveBody { report: &report }),
        Format::Csv => {
            let cells = solution_cells(&report);
            let mut csv = Csv::new(cfg, &cells.iter().map(|(k, _)| k.to_string()).collect::<Vec<_>>());
            csv.row(&cells.iter().map(|(_, c)| c.text()).collect::<Vec<_>>());
            csv.finish()
        }
    };
    output::emit(&text, cfg.output.path.as_deref())
}

#[derive(Clone)]
enum Cell {
    Num(f64),
    Text(String),
}

impl Cell {
    fn text(&self) -> String {
        match self {
            Cell::Num(x) => num(*x),
            Cell::Text(s) => s.clone(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::Num(x) => serde_json::Number::from_f64(*x).map_or(Value::Null, Value::Number),
            Cell::Text(s) => Value::String(s.clone()),
        }
    }
}

fn vector_cell(v: &[f64]) -> Cell {
    match v {
        [x] => Cell::Num(*x),
        _ => Cell::Text(vec_field(v)),
    }
}

fn solution_cells(r: &SolutionReport) -> Vec<(&'static str, Cell)> {
    vec![
        ("theta_ps", vector_cell(&r.theta_ps)),
        ("theta_stat", vector_cell(&r.theta_stat)),
        ("theta_po", vector_cell(&r.theta_po)),
        ("pr_at_ps", Cell::Num(r.pr_at_ps)),
        ("pr_at_po", Cell::Num(r.pr_at_po)),
        ("gap", Cell::Num(r.gap)),
        ("lambda_star", r.lambda_star.map_or(Cell::Text(String::new()), Cell::Num)),
        ("contractive", Cell::Text(r.regime_flags.contractive.to_string())),
        ("lambda_star_valid", Cell::Text(r.regime_flags.lambda_star_valid.to_string())),
    ]
}

#[derive(Serialize)]
struct StepRow {
    t: usize,
    theta: Vec<f64>,
    #[serde(rename = "N_t")]
    n_t: Option<f64>,
    lambda_t: Option<f64>,
    pr: Option<f64>,
    dist2_ps: Option<f64>,
    dist2_po: Option<f64>,
}

#[derive(Serialize)]
struct RunBody {
    algo: Algorithm,
    diverged: bool,
    trajectory: Vec<StepRow>,
}

pub fn run(cfg: &CliConfig) -> Result<(), Failure> {
    let (model, loss) = model_and_loss(&cfg.shift, cfg)?;
    let r = &cfg.run;
    let algo: Algorithm = r.algo.map(Into::into).unwrap_or(Algorithm::Rrm);
    let empirical = matches!(algo, Algorithm::Rerm | Algorithm::RegRerm);
    let horizon = r.horizon.unwrap_or(DEFAULT_HORIZON);
    let mode = r.mode.map(Mode::from).unwrap_or(if empirical {
        Mode::EmpiricalInteger
    } else {
        Mode::ExactExpectation
    });
    let samples = r.schedule.unwrap_or(ScheduleArg::Const).build(r.n.unwrap_or(1));
    let reg: Regularizer = r.reg.unwrap_or_default().into();
    let regs = match &r.lambda {
        None => RegSchedule::constant(0.0, reg),
        Some(l) => l.schedule(reg, horizon, || lambda_star(&model, &loss))?,
    };
    let config = RunConfig {
        horizon,
        theta0: broadcast_theta0(r.theta0.as_ref(), model.dim())?,
        seed: cfg.seed(),
        replication: 0,
        mode,
        samples,
        reg: regs,
        record_metrics: true,
    };
    let tr = dynamics::run(algo, &model, &loss, &config)?;
    if tr.diverged {
        eprintln!("note: trajectory diverged at t = {}", tr.iterates.len() - 1);
    }

    let text = match cfg.output.format.unwrap_or(Format::Csv) {
        Format::Csv => {
            let d = model.dim();
            let mut header = vec!["t".to_string()];
            header.extend((0..d).map(|i| format!("theta_{i}")));
            header.extend(["N_t", "lambda_t", "pr", "dist2_ps", "dist2_po", "diverged"].map(String::from));
            let mut csv = Csv::new(cfg, &header);
            let last = tr.iterates.len() - 1;
            for (theta, rec) in tr.iterates.iter().zip(&tr.per_step) {
                let mut row = vec![rec.t.to_string()];
                row.extend(theta.iter().map(|x| num(*x)));
                row.extend([
                    opt_num(rec.n_used),
                    opt_num(rec.lambda_used),
                    opt_num(rec.pr),
                    opt_num(rec.dist2_ps),
                    opt_num(rec.dist2_po),
                    (tr.diverged && rec.t == last).to_string(),
                ]);
                csv.row(&row);
            }
            csv.finish()
        }
        Format::Json => {
            let trajectory = tr
                .iterates
                .iter()
                .zip(&tr.per_step)
                .map(|(theta, rec)| StepRow {
                    t: rec.t,
                    theta: theta.iter().copied().collect(),
                    n_t: rec.n_used,
                    lambda_t: rec.lambda_used,
                    pr: rec.pr,
                    dist2_ps: rec.dist2_ps,
                    dist2_po: rec.dist2_po,
                })
                .collect();
            output::json(
                cfg,
                RunBody {
                    algo,
                    diverged: tr.diverged,
                    trajectory,
                },
            )
        }
    };
    output::emit(&text, cfg.output.path.as_deref())
}

/// Defaults for `kind`, overridden by whatever the config sets. For `all`
/// only seed, replication count and tolerances apply.
fn experiment_spec(kind: ExperimentKind, cfg: &CliConfig, single: bool) -> Result<ExperimentSpec, Failure> {
    let mut spec = ExperimentSpec::default_for(kind);
    let e = &cfg.experiment;
    spec.seed = cfg.seed();
    if let Some(r) = e.replications {
        spec.replications = r;
    }
    let tol = TolerancePolicy {
        rel_tol: e.rel_tol.unwrap_or(spec.tolerance.rel_tol),
        se_mult: e.se_mult.unwrap_or(spec.tolerance.se_mult),
        abs_tol: e.abs_tol.unwrap_or(spec.tolerance.abs_tol),
        decay_tol: e.decay_tol.unwrap_or(spec.tolerance.decay_tol),
    };
    if [tol.rel_tol, tol.se_mult, tol.abs_tol, tol.decay_tol]
        .iter()
        .any(|x| !(*x >= 0.0))
    {
        return Err(Failure::config("tolerances must be non-negative"));
    }
    spec.tolerance = tol;
    if !single {
        return Ok(spec);
    }
    if cfg.shift.is_set() {
        spec.model = cfg.shift.build()?;
        spec.loss = QuadraticLoss::squared(spec.model.dim());
    }
    if cfg.loss.is_set() {
        spec.loss = cfg.loss.build(spec.model.dim())?;
    }
    if let Some(t) = e.horizon {
        spec.horizon = t;
    }
    if let Some(n) = e.n {
        spec.samples_per_step = n;
    }
    if let Some(n) = e.mc_samples {
        spec.mc_samples = n;
    }
    if let Some(g) = &e.t_grid {
        spec.t_grid = g.clone();
    }
    if let Some(m) = e.mode {
        spec.mode = m.into();
    }
    if e.theta0.is_some() {
        spec.theta0 = Some(broadcast_theta0(e.theta0.as_ref(), spec.model.dim())?);
    }
    Ok(spec)
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Every parameter an experiment actually ran with.
#[derive(Serialize)]
struct SpecEcho {
    sigma0: Vec<Vec<f64>>,
    sigma_coeffs: Vec<Vec<Vec<f64>>>,
    mu0: Vec<f64>,
    mu: Vec<Vec<f64>>,
    base: BaseNoise,
    loss: Vec<Vec<f64>>,
    replications: usize,
    horizon: usize,
    samples_per_step: usize,
    mode: Mode,
    mc_samples: usize,
    t_grid: Vec<usize>,
    schedules: Vec<ScheduleCase>,
    theta0: Option<Vec<f64>>,
    tolerance: TolerancePolicy,
    seed: u64,
}

impl SpecEcho {
    fn new(spec: &ExperimentSpec) -> Self {
        let m = &spec.model;
        Self {
            sigma0: rows(m.sigma0()),
            sigma_coeffs: m.sigma_coeffs().iter().map(rows).collect(),
            mu0: m.mu0().iter().copied().collect(),
            mu: rows(m.mu()),
            base: m.base(),
            loss: rows(spec.loss.matrix()),
            replications: spec.replications,
            horizon: spec.horizon,
            samples_per_step: spec.samples_per_step,
            mode: spec.mode,
            mc_samples: spec.mc_samples,
            t_grid: spec.t_grid.clone(),
            schedules: spec.schedules.clone(),
            theta0: spec.theta0.as_ref().map(|t| t.iter().copied().collect()),
            tolerance: spec.tolerance,
            seed: spec.seed,
        }
    }
}

#[derive(Serialize)]
struct ExperimentOutput {
    spec: SpecEcho,
    #[serde(flatten)]
    result: TheoremCheckResult,
}

#[derive(Serialize)]
struct ExperimentBody<'a> {
    results: &'a [ExperimentOutput],
}

pub fn experiment(name: &str, cfg: &CliConfig) -> Result<(), Failure> {
    let single = name != "all";
    let kinds: Vec<ExperimentKind> = if single {
        vec![name.parse().map_err(|e: Error| Failure::config(e.to_string()))?]
    } else {
        ExperimentKind::ALL.to_vec()
    };
    let mut results = Vec::with_capacity(kinds.len());
    for kind in kinds {
        let spec = experiment_spec(kind, cfg, single)?;
        if spec.replications == 0 {
            return Err(Failure::config("--reps must be >= 1"));
        }
        let r = experiments::run_experiment(&spec)?;
        let verdict = match r.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::SkippedInvalidRegime => "SKIPPED",
        };
        eprintln!(
            "{kind}: {verdict} (predicted {}, observed {} +/- {})",
            num(r.predicted),
            num(r.observed.mean),
            num(r.observed.std_error)
        );
        for note in &r.notes {
            eprintln!("  {note}");
        }
        results.push(ExperimentOutput {
            spec: SpecEcho::new(&spec),
            result: r,
        });
    }

    let text = match cfg.output.format.unwrap_or(Format::Json) {
        Format::Json => output::json(cfg, ExperimentBody { results: &results }),
        Format::Csv => {
            let header = [
                "experiment", "label", "t", "predicted", "observed", "std_error", "count", "relation", "allowed",
                "pass", "gating",
            ]
            .map(String::from);
            let mut csv = Csv::new(cfg, &header);
            for r in results.iter().map(|o| &o.result) {
                for l in &r.details {
                    csv.row(&[
                        r.name.clone(),
                        l.label.clone(),
                        l.t.map(|t| t.to_string()).unwrap_or_default(),
                        num(l.predicted),
                        num(l.observed.mean),
                        num(l.observed.std_error),
                        l.observed.count.to_string(),
                        serde_json::to_value(l.relation)
                            .ok()
                            .and_then(|v| v.as_str().map(String::from))
                            .unwrap_or_default(),
                        num(l.allowed),
                        l.pass.to_string(),
                        l.gating.to_string(),
                    ]);
                }
            }
            csv.finish()
        }
    };
    output::emit(&text, cfg.output.path.as_deref())?;
    let failed: Vec<&str> = results
        .iter()
        .map(|o| &o.result)
        .filter(|r| r.failed())
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::check(format!("failed checks: {}", failed.join(", "))))
    }
}

pub const SWEEP_OUTPUTS: [&str; 10] = [
    "theta_ps",
    "theta_po",
    "pr_at_ps",
    "pr_at_po",
    "gap",
    "relative_gap",
    "lambda_star",
    "plateau",
    "final_mse",
    "reg_theta_T",
];

/// One row per grid point in lexicographic order of
/// `(sigma0, sigma, mu0, mu, N, lambda)`, the last key varying fastest.
pub fn sweep(cfg: &CliConfig) -> Result<(), Failure> {
    let grid = cfg
        .sweep
        .as_ref()
        .filter(|s| s.has_grid())
        .ok_or_else(|| Failure::config("sweep needs a grid (config 'sweep' block or --grid key=values)"))?;
    let shift = &cfg.shift;
    let axis = |v: &Option<Vec<f64>>, fallback: f64| v.clone().unwrap_or_else(|| vec![fallback]);
    let sigma0s = axis(&grid.sigma0, shift.sigma0.unwrap_or(crate::config::DEFAULT_SIGMA0));
    let sigmas = axis(&grid.sigma, shift.sigma.unwrap_or(crate::config::DEFAULT_SIGMA));
    let mu0s = axis(&grid.mu0, shift.mu0.unwrap_or(crate::config::DEFAULT_MU0));
    let mus = axis(&grid.mu, shift.mu.unwrap_or(crate::config::DEFAULT_MU));
    let ns = grid.n.clone().unwrap_or_else(|| vec![cfg.run.n.unwrap_or(1)]);
    let lambdas = axis(
        &grid.lambda,
        match cfg.run.lambda {
            Some(LambdaArg::Value(l)) => l,
            _ => 0.0,
        },
    );
    if sigma0s.is_empty() || sigmas.is_empty() || mu0s.is_empty() || mus.is_empty() || ns.is_empty() || lambdas.is_empty() {
        return Err(Failure::config("sweep grid has an empty axis"));
    }
    if ns.contains(&0) {
        return Err(Failure::config("sweep N values must be >= 1"));
    }
    let outputs: Vec<String> = match &grid.outputs {
        Some(o) if o.is_empty() => return Err(Failure::config("sweep outputs list is empty")),
        Some(o) => o.clone(),
        None => SWEEP_OUTPUTS.iter().map(|s| s.to_string()).collect(),
    };
    if let Some(bad) = outputs.iter().find(|o| !SWEEP_OUTPUTS.contains(&o.as_str())) {
        return Err(Failure::config(format!(
            "unknown sweep output '{bad}'; choose from {}",
            SWEEP_OUTPUTS.join(", ")
        )));
    }
    let horizon = cfg.run.horizon.unwrap_or(DEFAULT_HORIZON);
    let reg: Regularizer = cfg.run.reg.map(Into::into).unwrap_or(Regularizer::Ridge);

    let mut rows: Vec<Vec<(String, Cell)>> = Vec::new();
    for &sigma0 in &sigma0s {
        for &sigma in &sigmas {
            for &mu0 in &mu0s {
                for &mu in &mus {
                    for &n in &ns {
                        for &lambda in &lambdas {
                            let point = ShiftBlock {
                                sigma0: Some(sigma0),
                                sigma: Some(sigma),
                                mu0: Some(mu0),
                                mu: Some(mu),
                                ..shift.clone()
                            };
                            let (model, loss) = model_and_loss(&point, cfg)?;
                            let theta0 = broadcast_theta0(cfg.run.theta0.as_ref(), model.dim())?;
                            let mut row: Vec<(String, Cell)> = vec![
                                ("sigma0".into(), Cell::Num(sigma0)),
                                ("sigma".into(), Cell::Num(sigma)),
                                ("mu0".into(), Cell::Num(mu0)),
                                ("mu".into(), Cell::Num(mu)),
                                ("N".into(), Cell::Text(n.to_string())),
                                ("lambda".into(), Cell::Num(lambda)),
                            ];
                            let (regime, report) = match solve_model(&model, &loss) {
                                Ok(r) => ("ok".to_string(), Some(r)),
                                Err(f) if f.code == 2 => (
                                    if model.is_contractive() { "wrong-regime" } else { "non-contractive" }.to_string(),
                                    None,
                                ),
                                Err(f) => return Err(f),
                            };
                            row.push(("regime".into(), Cell::Text(regime)));
                            let cells = report.as_ref().map(solution_cells).unwrap_or_default();
                            for o in &outputs {
                                let cell = match o.as_str() {
                                    "relative_gap" => report
                                        .as_ref()
                                        .map_or(Cell::Num(f64::NAN), |r| Cell::Num(r.gap / r.pr_at_po)),
                                    "plateau" | "final_mse" => {
                                        let d = model.dim();
                                        match (model.is_mean_shift(), &report) {
                                            (true, Some(r)) if mu.abs() < 1.0 && o == "plateau" => {
                                                Cell::Num(d as f64 * sigma0 * sigma0 / (n as f64 * (1.0 - mu * mu)))
                                            }
                                            (true, Some(r)) if mu.abs() < 1.0 => {
                                                let ps = DVector::from_vec(r.theta_ps.clone());
                                                let e0 = (&theta0 - ps).norm_squared();
                                                Cell::Num(experiments::rerm_mse_closed_form(
                                                    mu, sigma0, d, n as f64, e0, horizon,
                                                ))
                                            }
                                            _ => Cell::Num(f64::NAN),
                                        }
                                    }
                                    "reg_theta_T" => {
                                        let config = RunConfig::exact(horizon, theta0.clone())
                                            .with_reg(RegSchedule::constant(lambda, reg));
                                        let tr = dynamics::run_reg_rrm(&model, &loss, &config)?;
                                        vector_cell(tr.last().as_slice())
                                    }
                                    key => cells
                                        .iter()
                                        .find(|(k, _)| *k == key)
                                        .map_or(Cell::Num(f64::NAN), |(_, c)| c.clone()),
                                };
                                row.push((o.clone(), cell));
                            }
                            rows.push(row);
                        }
                    }
                }
            }
        }
    }

    let text = match cfg.output.format.unwrap_or(Format::Csv) {
        Format::Csv => {
            let header: Vec<String> = rows[0].iter().map(|(k, _)| k.clone()).collect();
            let mut csv = Csv::new(cfg, &header);
            for row in &rows {
                csv.row(&row.iter().map(|(_, c)| c.text()).collect::<Vec<_>>());
            }
            csv.finish()
        }
        Format::Json => {
            let rows: Vec<Value> = rows
                .iter()
                .map(|row| Value::Object(row.iter().map(|(k, c)| (k.clone(), c.json())).collect::<Map<_, _>>()))
                .collect();
            #[derive(Serialize)]
            struct SweepBody {
                rows: Vec<Value>,
            }
            output::json(cfg, SweepBody { rows })
        }
    };
    output::emit(&text, cfg.output.path.as_deref())
}
