use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;

use commands::CliError;

/// Population, personalized and model-based reference intervals for lab series.
#[derive(Debug, Parser)]
#[command(name = "norma", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort (measurements.csv, outcomes.csv, truth.json).
    Synth {
        /// Cohort spec JSON.
        #[arg(long)]
        spec: PathBuf,
        /// Output directory, created if missing.
        #[arg(long)]
        out: PathBuf,
    },
    /// Canonicalize units and clean a raw measurement CSV.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the rejected-row report.
        #[arg(long)]
        rejections: Option<PathBuf>,
    },
    /// Reference interval fitting.
    Ri {
        #[command(subcommand)]
        command: RiCommand,
    },
    /// Train a model on a measurement CSV.
    Train {
        /// Measurement CSV or a cohort directory.
        #[arg(long)]
        data: PathBuf,
        /// Named preset, used when `--config` is absent.
        #[arg(long, default_value = "eicu-default")]
        preset: String,
        /// Full model config JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        d_model: Option<usize>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
        /// Training plan JSON; missing fields take their defaults.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Overrides the plan seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the plan's maximum epochs.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss log CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Run one evaluation task and write its CSV.
    Eval(EvalArgs),
    /// Serve the HTTP API.
    Serve {
        /// Checkpoint path; falls back to NORMA_CKPT.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Port; falls back to NORMA_PORT, then 8080.
        #[arg(long)]
        port: Option<u16>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

#[derive(Debug, Subcommand)]
enum RiCommand {
    /// One interval row per patient-analyte series.
    Fit {
        #[arg(long, value_enum, default_value = "per")]
        framework: RiFramework,
        /// Measurement CSV or a cohort directory.
        #[arg(long, visible_alias = "data")]
        input: PathBuf,
        /// Baseline/index split policy JSON (per only); defaults to the fraction policy.
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Output CSV; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RiFramework {
    Pop,
    Per,
}

impl RiFramework {
    pub fn as_str(self) -> &'static str {
        match self {
            RiFramework::Pop => "pop",
            RiFramework::Per => "per",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Forecast,
    Ii,
    Prevalence,
    Leadtime,
    Deviation,
    Confusion,
    Cox,
    Sweep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Subset {
    /// Every patient in the data.
    All,
    /// Patients in the checkpoint's held-out test split.
    Test,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub task: Task,
    /// Inputs recognized by content: cohort directories, measurement or
    /// outcome CSVs, checkpoints.
    #[arg(long = "in", num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    /// Measurement CSV or cohort directory (not needed for the sweep task).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub outcomes: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// Outcome name for deviation, confusion and cox.
    #[arg(long, default_value = "death")]
    pub outcome: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = norma_core::eval::BOOTSTRAP_RESAMPLES)]
    pub resamples: usize,
    /// Defaults to `test` for forecasting and `all` otherwise.
    #[arg(long, value_enum)]
    pub subset: Option<Subset>,
    /// Deviation task: bin raw values into quintiles instead of z-score deciles.
    #[arg(long)]
    pub raw: bool,
    /// Also write the per-test classification CSV here.
    #[arg(long)]
    pub classified: Option<PathBuf>,
    /// Sweep task analytes; defaults to every analyte in the data, or GLU.
    #[arg(long)]
    pub analyte: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { spec, out } => commands::synth(&spec, &out),
        Command::Ingest { input, out, rejections } => commands::ingest(&input, &out, rejections.as_deref()),
        Command::Ri {
            command: RiCommand::Fit {
                framework,
                input,
                policy,
                out,
            },
        } => commands::ri_fit(framework, &input, policy.as_deref(), out.as_deref()),
        Command::Train {
            data,
            preset,
            config,
            d_model,
            layers,
            heads,
            plan,
            seed,
            epochs,
            out,
            log,
        } => {
            let cfg = commands::model_config(&preset, config.as_deref(), d_model, layers, heads)?;
            let plan = commands::train_plan(plan.as_deref(), seed, epochs)?;
            commands::train(&data, cfg, plan, &out, log.as_deref())
        }
        Command::Eval(args) => commands::eval(args),
        Command::Serve { ckpt, port, host } => commands::serve(ckpt, port, &host),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
