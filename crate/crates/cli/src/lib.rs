//! Command-line front end for the `rccm` library.
//!
//! Every subcommand writes its tables as `{subcommand}-{system}-{seed}.csv`
//! next to a `.manifest` recording the resolved arguments, input digests and
//! tool version. Exit status is 0 on success, 1 when the run completed but the
//! result is uncertified or infeasible, and 2 on usage or input errors.

pub mod artifacts;
pub mod commands;
pub mod report;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub const EXIT_OK: u8 = 0;
pub const EXIT_DOMAIN: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "rccm",
    version,
    about = "Learned robust contraction certificates and tube-based tracking"
)]
pub struct Cli {
    /// Worker threads (default: logical cores). Never changes results.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// Directory for tables and manifests.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Jointly learn the metric, controller and gain from a config file.
    Train(TrainArgs),
    /// Re-optimize the gain for a new output with the networks frozen.
    Refine(RefineArgs),
    /// Check the matrix inequalities statistically or on a grid.
    Verify(VerifyArgs),
    /// Disturbed closed-loop rollouts around a sampled nominal trajectory.
    Simulate(SimulateArgs),
    /// Plan a tube-inflated path through an obstacle scenario and replay it.
    Plan(PlanArgs),
    /// Aggregate the tables found in a directory into summary tables.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// `positions`, `inputs`, `training`, or `custom @FILE`.
    #[arg(long, num_args = 1..=2, value_names = ["NAME", "@FILE"], required = true)]
    pub selector: Vec<String>,
    #[arg(long, default_value_t = 20_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Starting gain; the checkpoint's gains when absent.
    #[arg(long)]
    pub alpha_init: Option<f64>,
    #[arg(long)]
    pub mu_init: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VerifyMode {
    Stat,
    Grid,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_enum)]
    pub mode: VerifyMode,
    /// Region file (`label`, `lower`, `upper`); required for grid mode.
    #[arg(long)]
    pub region: Option<PathBuf>,
    #[arg(long, default_value_t = 0.01)]
    pub tau: f64,
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Largest C1/C2 violation fraction accepted in stat mode.
    #[arg(long, default_value_t = 0.05)]
    pub max_violation: f64,
    /// Output selector for C2; the training output when absent.
    #[arg(long, num_args = 1..=2, value_names = ["NAME", "@FILE"])]
    pub selector: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 100)]
    pub runs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = rccm::simulation::DEFAULT_HORIZON)]
    pub horizon: f64,
    #[arg(long, default_value_t = rccm::simulation::DEFAULT_DT)]
    pub dt: f64,
    /// Output whose tube is checked; must be refined unless `training`.
    #[arg(long, num_args = 1..=2, value_names = ["NAME", "@FILE"], default_value = "positions")]
    pub selector: Vec<String>,
    /// Start each rollout off the nominal by a sample of the initial-error set.
    #[arg(long)]
    pub offset_start: bool,
    /// Keep every k-th time step in the per-step table.
    #[arg(long, default_value_t = 10)]
    pub stride: usize,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Scenario file, or `packaged` for the bundled scenario.
    #[arg(long, default_value = "packaged")]
    pub scenario: String,
    /// Multiplier on the refined tube radii.
    #[arg(long, default_value_t = 1.0)]
    pub tube_scale: f64,
    #[arg(long, default_value_t = 100)]
    pub replays: usize,
    /// Disturbance bound for replays; the training bound when absent.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = rccm::simulation::DEFAULT_DT)]
    pub dt: f64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub dir: PathBuf,
}

/// Completed run: success, or a domain failure with its reason.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Success,
    Failed(String),
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    run(cli)
}

pub fn run(cli: Cli) -> u8 {
    if let Some(j) = cli.jobs {
        if j == 0 {
            eprintln!("error: --jobs must be at least 1");
            return EXIT_USAGE;
        }
        // A pool may already exist when called repeatedly in one process; results do not depend on it.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global();
    }
    let result = match &cli.command {
        Command::Train(a) => commands::train(a, &cli.out),
        Command::Refine(a) => commands::refine(a, &cli.out),
        Command::Verify(a) => commands::verify(a, &cli.out),
        Command::Simulate(a) => commands::simulate(a, &cli.out),
        Command::Plan(a) => commands::plan(a, &cli.out),
        Command::Report(a) => report::report(&a.dir),
    };
    match result {
        Ok(Outcome::Success) => EXIT_OK,
        Ok(Outcome::Failed(msg)) => {
            eprintln!("failed: {msg}");
            EXIT_DOMAIN
        }
        Err(e) => {
            let code = exit_code_for(&e);
            eprintln!("error: {e:#}");
            code
        }
    }
}

/// Domain errors from the library map to 1; everything else is a usage or input problem.
fn exit_code_for(e: &anyhow::Error) -> u8 {
    use rccm::Error as E;
    match e.downcast_ref::<E>() {
        Some(
            E::InfeasibleNominal { .. }
            | E::InfeasibleScenario(_)
            | E::Diverged { .. }
            | E::TrainingDiverged { .. }
            | E::SingularMetric { .. }
            | E::NumericOverflow { .. }
            | E::NonFiniteSample { .. },
        ) => EXIT_DOMAIN,
        _ => EXIT_USAGE,
    }
}

pub fn main_exit() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    ExitCode::from(run_from(std::env::args_os()))
}
