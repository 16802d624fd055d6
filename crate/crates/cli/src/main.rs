use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use trusted_kmeans::harness::{self, DataSource, SimConfig};

#[derive(Parser)]
#[command(name = "tkm", version, about = "Secure distributed k-means simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Secure run, centralized reference and leakage audit.
    Run {
        config: PathBuf,
        /// Output directory (overrides run.output_dir).
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Centralized Lloyd only, with the same data and initialization.
    Oracle {
        config: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Leakage audit over a persisted run directory.
    Analyze {
        dir: PathBuf,
        /// Comma-separated corrupted node ids; empty for none.
        #[arg(long, default_value = "")]
        corrupted: String,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Samples the configured Gaussian mixture into a dataset CSV.
    GenData {
        spec: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Repeats `run` over consecutive master seeds.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        trials: usize,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn load(path: &Path, out: Option<PathBuf>) -> Result<SimConfig> {
    let mut cfg = SimConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    Ok(cfg)
}

fn parse_ids(s: &str) -> Result<BTreeSet<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().with_context(|| format!("bad node id {t:?}")))
        .collect()
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = load(&config, out)?;
            let outcome = harness::run_experiment(&cfg)?;
            print!("{}", outcome.metrics.to_text());
            for w in outcome.secure.iter().flat_map(|r| &r.warnings) {
                eprintln!("warning: {w}");
            }
            if !outcome.metrics.averaging_converged {
                eprintln!("error: averaging did not converge within its budget");
            } else if !outcome.metrics.kmeans_converged {
                eprintln!("error: labels still changing after {} iterations", cfg.max_iters);
            }
            Ok(outcome.metrics.success())
        }
        Command::Oracle { config, out } => {
            let cfg = load(&config, None)?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.join("oracle"));
            let res = harness::run_oracle(&cfg, &dir)?;
            print!("{}", harness::centers_text(&res.centers));
            Ok(res.converged)
        }
        Command::Analyze { dir, corrupted, out } => {
            let report = harness::analyze_dir(&dir, &parse_ids(&corrupted)?)?;
            let text = report.to_text();
            match out {
                Some(path) => std::fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{text}"),
            }
            Ok(true)
        }
        Command::GenData { spec, out } => {
            let cfg = load(&spec, None)?;
            if !matches!(cfg.data.source, DataSource::Mixture(_)) {
                bail!("gen-data needs data.source = mixture");
            }
            let data = cfg.build_dataset()?;
            std::fs::write(&out, data.to_csv()).with_context(|| format!("writing {}", out.display()))?;
            Ok(true)
        }
        Command::Sweep { config, trials, out } => {
            let cfg = load(&config, out)?;
            let records = harness::sweep(&cfg, trials)?;
            let ok = records.iter().filter(|r| r.success()).count();
            let agree = records.iter().filter(|r| r.label_agreement).count();
            println!("trials = {trials}\nconverged = {ok}\nlabel_agreement = {agree}");
            Ok(ok == records.len())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
