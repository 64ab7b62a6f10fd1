//! `snapconf`: run snapshot-ensemble conformal prediction experiments.
//!
//! Exit status: 0 success, 1 usage, configuration or missing-stage error,
//! 2 data error, 3 training failure.

use std::fs::File;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use snapconf::conformal::Pooling;
use snapconf::experiment::{render_summary, Experiment, ExperimentConfig, ExperimentError, Strategy, OUTPUT_ROOT_ENV};
use snapconf::synthetic::PlantedLinear;

#[derive(Parser)]
#[command(name = "snapconf", version, about = "Snapshot ensembles with conformal prediction intervals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write one train/validation/test split per repeat.
    Split(Common),
    /// Train the strategy on every repeat and store test/calibration predictions.
    Train(Common),
    /// Build conformal calibrations from the stored calibration predictions.
    Calibrate(Common),
    /// Compute conformal regions for the test instances.
    Predict(Common),
    /// Evaluate regions and write the report tables.
    Evaluate(Common),
    /// Print the summary of an evaluated experiment.
    Report(Common),
    /// Run every stage in order.
    Run(Common),
    /// Generate a planted-linear binary dataset.
    Synth(SynthArgs),
}

/// Config file plus flag overrides; flags win over file values.
#[derive(Args)]
struct Common {
    /// TOML experiment description.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Dataset CSV (`id,y,b0,...`).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// rf, dnn-ensemble, snapshot-v1, snapshot-v2 or snapshot-v3.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Base seed of the repeat series.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root (defaults to the config value, then the environment).
    #[arg(long, env = OUTPUT_ROOT_ENV)]
    output: Option<PathBuf>,
    /// pooled or per-run.
    #[arg(long)]
    pooling: Option<String>,
    /// Comma-separated confidence levels.
    #[arg(long, value_delimiter = ',')]
    cls: Option<Vec<f64>>,
    /// Validation RMSE a member or snapshot must stay below.
    #[arg(long)]
    cutoff: Option<f64>,
    /// Independent networks or snapshots per ensemble.
    #[arg(long)]
    members: Option<usize>,
    #[arg(long)]
    epoch_budget: Option<usize>,
    #[arg(long)]
    trees: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
}

impl Common {
    fn resolve(self) -> Result<ExperimentConfig, ExperimentError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.dataset {
            cfg.dataset = v;
        }
        if let Some(v) = self.strategy {
            cfg.strategy = Some(v.parse::<Strategy>()?);
        }
        if let Some(v) = self.repeats {
            cfg.n_repeats = v;
        }
        if let Some(v) = self.seed {
            cfg.base_seed = v;
        }
        if let Some(v) = self.output {
            cfg.output_dir = Some(v);
        }
        if let Some(v) = self.pooling {
            cfg.pooling = match v.as_str() {
                "pooled" => Pooling::Pooled,
                "per-run" => Pooling::PerRun,
                other => return Err(ExperimentError::Config(format!("unknown pooling `{other}` (pooled or per-run)"))),
            };
        }
        if let Some(v) = self.cls {
            cfg.cls = v;
        }
        if let Some(v) = self.cutoff {
            cfg.rmse_cutoff = v;
        }
        if let Some(v) = self.members {
            cfg.members = v;
        }
        if let Some(v) = self.epoch_budget {
            cfg.epoch_budget = Some(v);
        }
        if let Some(v) = self.trees {
            cfg.n_trees = v;
        }
        if let Some(v) = self.folds {
            cfg.cv_folds = v;
        }
        if let Some(v) = self.workers {
            cfg.workers = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Destination CSV.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 300)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    d: usize,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn run(command: Command) -> Result<(), ExperimentError> {
    let (stage, common) = match command {
        Command::Synth(a) => return synth(a),
        Command::Split(c) => ("split", c),
        Command::Train(c) => ("train", c),
        Command::Calibrate(c) => ("calibrate", c),
        Command::Predict(c) => ("predict", c),
        Command::Evaluate(c) => ("evaluate", c),
        Command::Report(c) => ("report", c),
        Command::Run(c) => ("run", c),
    };
    let exp = Experiment::open(common.resolve()?)?;
    match stage {
        "split" => exp.split().map(drop),
        "train" => exp.train(),
        "calibrate" => exp.calibrate(),
        "predict" => exp.predict(),
        "evaluate" => exp.evaluate().map(|r| print!("{}", render_summary(&r))),
        "report" => exp.report().map(|s| print!("{s}")),
        _ => exp.run().map(|r| print!("{}", render_summary(&r))),
    }
}

fn synth(a: SynthArgs) -> Result<(), ExperimentError> {
    let gen = PlantedLinear { n: a.n, d: a.d, noise_sd: a.noise, ..PlantedLinear::default() };
    let (ds, _) = gen.generate(a.seed).map_err(|source| ExperimentError::Data { path: a.out.clone(), source })?;
    let io = |source| ExperimentError::Io { path: a.out.clone(), source };
    ds.write_csv(File::create(&a.out).map_err(io)?).map_err(io)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
