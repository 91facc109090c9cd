//! `demand-ci` command line: simulate episodes and run replicated experiments.
//!
//! Exit codes: 0 success, 1 output I/O failure, 2 usage or config error,
//! 3 experiment-level failure.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use demand_ci::env::run_episode;
use demand_ci::harness::{
    diagnose, plot_data, ConfigError, CoverageReport, ErrorReport, Experiment, ExperimentConfig, HarnessError,
    PlotSeries,
};

#[derive(Parser)]
#[command(name = "demand-ci", version, about = "Debiased confidence intervals for demand learned from adaptive pricing data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one episode and write its history as CSV.
    Simulate(Common),
    /// Coverage of debiased and Wald intervals (JSON and CSV).
    Coverage(Common),
    /// Standardized estimation and prediction errors (CSV plus JSON moments).
    Errors(Common),
    /// Whitening and pilot diagnostics across horizons.
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// Comma-separated horizons.
        #[arg(long, value_delimiter = ',', default_values_t = [500usize, 2000, 8000])]
        horizons: Vec<usize>,
    },
    /// Histogram data from an `errors` CSV.
    PlotData {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Preset name or TOML file.
    #[arg(long, default_value = "paper_logistic")]
    config: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory; reports go to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, HarnessError> {
        let mut cfg = ExperimentConfig::resolve(&self.config)?;
        if let Some(s) = self.seed {
            cfg.base_seed = s;
        }
        if let Some(n) = self.trials {
            cfg.n_trials = n;
        }
        if let Some(t) = self.horizon {
            cfg.horizon = t;
            cfg.pilot_checkpoints.retain(|&c| c <= t);
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

enum Failure {
    Harness(HarnessError),
    Output(PathBuf, io::Error),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        Failure::Harness(e)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Harness(e.into())
    }
}

/// Writes to `dir/name`, or to stdout when no directory is given.
fn emit(dir: Option<&Path>, name: &str, write: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<(), Failure> {
    match dir {
        Some(dir) => {
            let path = dir.join(name);
            let run = || -> io::Result<()> {
                fs::create_dir_all(dir)?;
                let mut w = BufWriter::new(File::create(&path)?);
                write(&mut w)?;
                w.flush()
            };
            run().map_err(|e| Failure::Output(path.clone(), e))?;
            eprintln!("wrote {}", path.display());
            Ok(())
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            write(&mut lock).and_then(|_| lock.flush()).map_err(|e| Failure::Output("<stdout>".into(), e))
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate(common) => {
            let cfg = common.load()?;
            let exp = Experiment::new(cfg)?;
            let cfg = &exp.config;
            let seed = exp.trial_seed(0);
            let episode = run_episode(&cfg.model, &cfg.policy, cfg.context, cfg.horizon, seed)
                .map_err(|e| HarnessError::Config(ConfigError::Invalid(e.to_string())))?;
            emit(common.out.as_deref(), "history.csv", |w| episode.history.write_csv(w))
        }
        Command::Coverage(common) => {
            let exp = Experiment::new(common.load()?)?;
            let records = exp.run_trials()?;
            let report = CoverageReport::from_trials(&exp, &records)?;
            let out = common.out.as_deref();
            emit(out, "coverage.json", |w| writeln!(w, "{}", report.to_json()))?;
            if out.is_some() {
                emit(out, "coverage.csv", |w| report.write_csv(w))?;
            }
            Ok(())
        }
        Command::Errors(common) => {
            let exp = Experiment::new(common.load()?)?;
            let records = exp.run_trials()?;
            let report = ErrorReport::from_trials(&exp, &records)?;
            let out = common.out.as_deref();
            emit(out, "errors.csv", |w| report.write_csv(w))?;
            if out.is_some() {
                emit(out, "errors_summary.json", |w| writeln!(w, "{}", report.to_json()))?;
            }
            Ok(())
        }
        Command::Diagnose { common, horizons } => {
            let cfg = common.load()?;
            if horizons.iter().any(|&t| t < 2) {
                return Err(ConfigError::Invalid("horizons must be at least 2".into()).into());
            }
            let report = diagnose(&cfg, &horizons)?;
            emit(common.out.as_deref(), "diagnose.json", |w| writeln!(w, "{}", report.to_json()))
        }
        Command::PlotData { input, out } => {
            let file = File::open(&input).map_err(|e| {
                HarnessError::Config(ConfigError::Io { path: input.display().to_string(), source: e })
            })?;
            let series = plot_data(BufReader::new(file))?;
            emit(out.as_deref(), "errors_hist.dat", |w| PlotSeries::write_dat(&series, w))?;
            if out.is_some() {
                let json = serde_json::to_string_pretty(&series).expect("series serialize");
                emit(out.as_deref(), "errors_hist.json", |w| writeln!(w, "{json}"))?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Output(path, e)) => {
            eprintln!("error: writing {}: {e}", path.display());
            ExitCode::from(1)
        }
        Err(Failure::Harness(e)) => {
            eprintln!("error: {e}");
            match e {
                HarnessError::Config(_) | HarnessError::Parse(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
