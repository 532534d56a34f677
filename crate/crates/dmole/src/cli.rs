use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use dmole_core::metrics::format_metric;
use dmole_core::trainer::Strategy;

use crate::config::{Overrides, RunConfig};
use crate::error::{exit, CliError, Result};
use crate::rundir::LoadedRun;
use crate::{datagen, report, run, sweep};

pub const OUTPUT_ROOT_ENV: &str = "DMOLE_OUTPUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "dmole", version, about = "Continual multimodal tuning with dynamically allocated LoRA experts")]
pub struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a task stream and write a run directory.
    Run(RunArgs),
    /// Re-evaluate a finished run with scaled router thresholds.
    SweepThresholds(SweepArgs),
    /// Regenerate the CSV/SVG reports of a run.
    Report {
        run_dir: PathBuf,
    },
    /// Write the datasets of a configured stream.
    GenerateData(GenerateArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// heterogeneous-5 or twin-pair.
    #[arg(long)]
    pub preset: Option<String>,
    /// dmole, seq_ft, dense_mole, sparse_mole or mola.
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<Strategy>,
    /// Root seed of the run.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Expert layers per task.
    #[arg(long)]
    pub b_total: Option<usize>,
    /// Expert layers per task as a fraction of all layers.
    #[arg(long)]
    pub budget_ratio: Option<f64>,
    /// Experts activated per sample.
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Router threshold as a multiple of the largest training reconstruction loss.
    #[arg(long)]
    pub threshold_scale: Option<f64>,
    /// Expert training epochs per task.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Expert learning rate.
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Training samples per task.
    #[arg(long)]
    pub n_train: Option<usize>,
    /// Test samples per task.
    #[arg(long)]
    pub n_test: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Run directory; otherwise `<output root>/<stream>-<strategy>-s<seed>`.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Overwrite an existing run directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    pub run_dir: PathBuf,
    /// Threshold multipliers.
    #[arg(long, value_delimiter = ',', default_values_t = sweep::DEFAULT_SCALES.to_vec())]
    pub scales: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory.
    #[arg(short, long)]
    pub out: PathBuf,
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    Strategy::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Strategy::ALL.iter().map(|s| s.as_str()).collect();
        format!("unknown strategy '{s}', expected one of {}", names.join(", "))
    })
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply(&Overrides {
            preset: self.preset.clone(),
            strategy: self.strategy,
            seed: self.seed,
            b_total: self.b_total,
            budget_ratio: self.budget_ratio,
            top_k: self.top_k,
            threshold_scale: self.threshold_scale,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            n_train: self.n_train,
            n_test: self.n_test,
        });
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `--out`, else `$DMOLE_OUTPUT_ROOT/<name>`, else `<output_dir>/<name>`
/// with `output_dir` from the config (default `runs`).
pub fn run_dir_for(cfg: &RunConfig, out: Option<&Path>, env_root: Option<OsString>) -> PathBuf {
    if let Some(o) = out {
        return o.to_path_buf();
    }
    let root = env_root
        .filter(|r| !r.is_empty())
        .map(PathBuf::from)
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(cfg.run_name())
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => exit::OK,
                _ => exit::USAGE,
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    match dispatch(cli.command) {
        Ok(warnings) if warnings.is_empty() => exit::OK,
        Ok(warnings) => {
            for w in warnings {
                eprintln!("warning: {w}");
            }
            exit::WARNINGS
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<Vec<String>> {
    match cmd {
        Command::Run(a) => {
            let cfg = a.config.resolve()?;
            let dir = run_dir_for(&cfg, a.out.as_deref(), std::env::var_os(OUTPUT_ROOT_ENV));
            let outcome = run::execute(&cfg, &dir, a.force)?;
            let summary = outcome.state.scores.summary()?;
            println!("run directory: {}", dir.display());
            println!("{:<6} {:>8} {:>8} {:>8}", "task", "AVG", "Last", "BWT");
            for (m, t) in summary.per_task.iter().zip(&outcome.preset.tasks) {
                println!("{:<6} {:>8.4} {:>8.4} {:>8}", t.task_id, m.avg, m.last, format_metric(m.bwt));
            }
            println!(
                "{:<6} {:>8.4} {:>8.4} {:>8}",
                "mean",
                summary.mean_avg,
                summary.mean_last,
                format_metric(summary.mean_bwt)
            );
            Ok(outcome.manifest.warnings)
        }
        Command::SweepThresholds(a) => {
            let (_, rows) = sweep::run_sweep(&a.run_dir, &a.scales)?;
            println!("{:>7} {:>12} {:>16}", "scale", "avg Last", "unseen rejected");
            for r in &rows {
                let rej = r.unseen_rejection.map_or_else(|| String::from("-"), |v| format!("{v:.4}"));
                println!("{:>7} {:>12.4} {:>16}", r.scale, r.average_last, rej);
            }
            println!("wrote {}", a.run_dir.join(sweep::SWEEP_FILE).display());
            Ok(Vec::new())
        }
        Command::Report { run_dir } => {
            let mut run = LoadedRun::open(&run_dir)?;
            let warnings = report::write_report(&mut run)?;
            println!("wrote {}", run_dir.join("report").display());
            Ok(warnings)
        }
        Command::GenerateData(a) => {
            let cfg = a.config.resolve()?;
            let m = datagen::generate_data(&cfg, &a.out)?;
            println!("wrote {} splits to {}", m.files.len(), a.out.display());
            Ok(Vec::new())
        }
    }
}

impl From<clap::Error> for CliError {
    fn from(e: clap::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}
