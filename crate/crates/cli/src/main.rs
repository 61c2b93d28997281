//! `performa`: solve, simulate, check and sweep performative retraining
//! instances from the command line.
//!
//! Exit status: 0 success, 1 usage or config error, 2 regime violation,
//! 3 failed check.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{AlgoArg, BaseArg, CliConfig, Format, LambdaArg, ModeArg, RegArg, ScheduleArg, SweepBlock};

#[derive(Parser)]
#[command(name = "performa", version, about = "Retraining dynamics under performative linear shifts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand)]
enum Command {
    /// Stable point, optimal point, risks, gap and lambda* of a model.
    Solve,
    /// Simulate one retraining trajectory.
    Run,
    /// Run one named check, or `all`. The name may also come from the config.
    Experiment { name: Option<String> },
    /// Tabulate solution quantities over a parameter grid.
    Sweep,
    /// Same as `experiment all`.
    Check,
}

#[derive(Args, Default)]
struct Flags {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file; stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Monte Carlo replications.
    #[arg(long, global = true)]
    reps: Option<usize>,
    /// Worker threads; never changes results.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(short = 'T', long = "horizon", global = true)]
    horizon: Option<usize>,
    /// Samples per step (scale of the inverse-t schedule).
    #[arg(long = "N", global = true)]
    n: Option<usize>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    sigma0: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    sigma: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    mu0: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    mu: Option<f64>,
    #[arg(long, global = true)]
    dim: Option<usize>,
    #[arg(long, global = true, value_enum)]
    base: Option<BaseArg>,
    #[arg(long, global = true, value_enum)]
    algo: Option<AlgoArg>,
    #[arg(long, global = true, value_enum)]
    reg: Option<RegArg>,
    /// Number, `star`, `t` or `t+1`.
    #[arg(long, global = true, allow_negative_numbers = true)]
    lambda: Option<String>,
    #[arg(long, global = true, value_enum)]
    schedule: Option<ScheduleArg>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    /// Comma-separated; a single value is broadcast.
    #[arg(long, global = true, allow_negative_numbers = true)]
    theta0: Option<String>,
    /// Draws per Monte Carlo risk estimate.
    #[arg(long, global = true)]
    mc_samples: Option<usize>,
    /// Sweep grid entry `key=v1,v2,...` for sigma0, sigma, mu0, mu, N, lambda.
    #[arg(long, global = true)]
    grid: Vec<String>,
    /// Comma-separated sweep output columns.
    #[arg(long, global = true)]
    outputs: Option<String>,
}

/// An error with its exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    pub fn regime(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn check(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<performa_core::Error> for Failure {
    fn from(e: performa_core::Error) -> Self {
        use performa_core::Error as E;
        match e {
            E::NonContractive { .. } | E::WrongRegime(_) => Failure::regime(e.to_string()),
            _ => Failure::config(e.to_string()),
        }
    }
}

fn merge(flags: Flags, command: &Command) -> Result<CliConfig, Failure> {
    let mut cfg = match &flags.config {
        Some(path) => CliConfig::load(path)?,
        None => CliConfig::default(),
    };
    macro_rules! set {
        ($dst:expr, $src:expr) => {
            if let Some(v) = $src {
                $dst = Some(v);
            }
        };
    }
    set!(cfg.seed, flags.seed);
    set!(cfg.output.path, flags.out);
    set!(cfg.output.format, flags.format);
    set!(cfg.shift.sigma0, flags.sigma0);
    set!(cfg.shift.sigma, flags.sigma);
    set!(cfg.shift.mu0, flags.mu0);
    set!(cfg.shift.mu, flags.mu);
    set!(cfg.shift.dim, flags.dim);
    set!(cfg.shift.base, flags.base);
    let theta0 = flags
        .theta0
        .as_deref()
        .map(|s| config::parse_list::<f64>(s, "--theta0"))
        .transpose()?;
    if matches!(command, Command::Experiment { .. } | Command::Check) {
        set!(cfg.experiment.replications, flags.reps);
        set!(cfg.experiment.horizon, flags.horizon);
        set!(cfg.experiment.n, flags.n);
        set!(cfg.experiment.mode, flags.mode);
        set!(cfg.experiment.mc_samples, flags.mc_samples);
        set!(cfg.experiment.theta0, theta0);
    } else {
        set!(cfg.run.horizon, flags.horizon);
        set!(cfg.run.n, flags.n);
        set!(cfg.run.mode, flags.mode);
        set!(cfg.run.theta0, theta0);
    }
    set!(cfg.run.algo, flags.algo);
    set!(cfg.run.reg, flags.reg);
    set!(cfg.run.schedule, flags.schedule);
    if let Some(l) = &flags.lambda {
        cfg.run.lambda = Some(l.parse::<LambdaArg>()?);
    }
    if !flags.grid.is_empty() || flags.outputs.is_some() {
        let sweep = cfg.sweep.get_or_insert_with(SweepBlock::default);
        for g in &flags.grid {
            sweep.set_from_flag(g)?;
        }
        if let Some(o) = &flags.outputs {
            sweep.outputs = Some(config::parse_list::<String>(o, "--outputs")?);
        }
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.flags.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::config(format!("cannot configure {n} threads: {e}")))?;
    }
    let command = cli.command;
    let mut cfg = merge(cli.flags, &command)?;
    match command {
        Command::Solve | Command::Run | Command::Sweep => cfg.fill_defaults(),
        Command::Experiment { .. } | Command::Check => {
            cfg.seed.get_or_insert(0);
        }
    }
    match command {
        Command::Solve => commands::solve(&cfg),
        Command::Run => commands::run(&cfg),
        Command::Experiment { name } => {
            let name = name
                .or_else(|| cfg.experiment.name.clone())
                .ok_or_else(|| Failure::config("experiment needs a name (or experiment.name in the config)"))?;
            cfg.experiment.name = Some(name.clone());
            commands::experiment(&name, &cfg)
        }
        Command::Sweep => commands::sweep(&cfg),
        Command::Check => commands::experiment("all", &cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
