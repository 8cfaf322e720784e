use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dmd_core::config::ExperimentConfig;
use dmd_core::report::{emit_report, sweep};
use dmd_core::run::{analyze, run_experiment, RunOptions};
use dmd_core::Error;

/// Desk-scale GAN training with a dynamically masked discriminator.
///
/// The output root defaults to $DMD_OUT_ROOT, else ./runs; a config file's
/// `out` key and `--out` override it in that order.
#[derive(Parser)]
#[command(name = "dmd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one or all configured seeds.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed instead of the config's seed list.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long, allow_hyphen_values = true)]
        lambda: Option<String>,
        #[arg(long)]
        ratio: Option<String>,
        #[arg(long)]
        layer: Option<String>,
        #[arg(long)]
        cadence: Option<String>,
        #[arg(long)]
        steps: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the run directory's checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Run every cell of the configured sweep and rank them.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute analytics of a finished run from its snapshots.
    Analyze {
        #[arg(long)]
        run: PathBuf,
    },
    /// Aggregate finished runs into a comparison table.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Where to write report.json / report.md (defaults to the first run root).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::Numerical(_) | Error::NegativeEigenvalue(_) => 3,
        _ => 1,
    }
}

fn load(path: &PathBuf, overrides: &[(&str, Option<&String>)], out: Option<&PathBuf>) -> dmd_core::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::parse_text(&text)?;
    for (key, value) in overrides {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    if let Some(o) = out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> dmd_core::Result<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            strategy,
            lambda,
            ratio,
            layer,
            cadence,
            steps,
            out,
            resume,
        } => {
            let cfg = load(
                &config,
                &[
                    ("strategy", strategy.as_ref()),
                    ("lambda", lambda.as_ref()),
                    ("ratio", ratio.as_ref()),
                    ("layer", layer.as_ref()),
                    ("cadence", cadence.as_ref()),
                    ("steps", steps.as_ref()),
                ],
                out.as_ref(),
            )?;
            let seeds = seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s]);
            for s in seeds {
                let summary = run_experiment(
                    &cfg,
                    s,
                    &RunOptions {
                        resume,
                        ..RunOptions::default()
                    },
                )?;
                println!("{}", serde_json::to_string(&summary)?);
            }
        }
        Command::Sweep { config, out } => {
            let cfg = load(&config, &[], out.as_ref())?;
            let report = sweep(&cfg)?;
            print!("{}", report.to_markdown());
        }
        Command::Analyze { run } => {
            let dir = analyze(&run)?;
            println!("{}", dir.display());
        }
        Command::Report { runs, out } => {
            let out = out.unwrap_or_else(|| runs[0].clone());
            let report = emit_report(&runs, &out)?;
            print!("{}", report.to_markdown());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
