use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use reghorizon_cli::{
    analysis_base, cmd_analyze, cmd_bootstrap, cmd_checkgrad, cmd_gen, cmd_sweep, cmd_train,
    env_seed, exit_code, render_checkgrad, ExperimentConfig, DEFAULT_RESAMPLES, EXIT_NUMERIC,
    EXIT_OK,
};

#[derive(Parser)]
#[command(
    name = "reghorizon",
    version,
    about = "Consistency-regularized training sweeps and total-regularization analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a config field, e.g. `--set train.dropout=0.2`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(&self.config, &self.overrides, env_seed()?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its manifest.
    Gen(ConfigArgs),
    /// Train one model and write its run record and checkpoint.
    Train(ConfigArgs),
    /// Run every point of the config's sweep grid (resumable).
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(short, long, default_value_t = 1)]
        workers: usize,
    },
    /// Fit the total-regularization model to sweep results.
    Analyze {
        results: PathBuf,
        /// Config whose sweep base labels the tuning families.
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Output directory (defaults to the results file's directory).
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Paired bootstrap test on per-item score files.
    Bootstrap {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
        resamples: usize,
    },
    /// Finite-difference check of every primitive and loss combination.
    Checkgrad {
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Gen(args) => {
            let out = cmd_gen(&args.load()?)?;
            println!(
                "wrote {} lines to {} (spec {})",
                out.manifest.lines,
                out.corpus.display(),
                out.manifest.spec_hash
            );
            Ok(EXIT_OK)
        }
        Command::Train(args) => {
            let out = cmd_train(&args.load()?)?;
            let r = &out.record;
            println!(
                "steps {} dev {:.4} test {:.4} config {}",
                out.steps, r.dev_metric, r.test_metric, r.config_hash
            );
            if r.failed {
                eprintln!("run failed: non-finite loss");
                return Ok(EXIT_NUMERIC);
            }
            Ok(EXIT_OK)
        }
        Command::Sweep { config, workers } => {
            let out = cmd_sweep(&config.load()?, workers)?;
            println!(
                "{} runs ({} new, {} reused, {} failed) in {}",
                out.total,
                out.executed,
                out.skipped,
                out.failed,
                out.results.display()
            );
            Ok(if out.any_succeeded() {
                EXIT_OK
            } else {
                EXIT_NUMERIC
            })
        }
        Command::Analyze {
            results,
            config,
            out,
        } => {
            let config = config
                .map(|p| ExperimentConfig::load(&p, &[], None))
                .transpose()?;
            let out_dir = match out {
                Some(d) => d,
                None => results
                    .parent()
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from(".")),
            };
            let out = cmd_analyze(&results, &out_dir, &analysis_base(config.as_ref()))?;
            println!("{}", serde_json::to_string_pretty(&out.report)?);
            Ok(EXIT_OK)
        }
        Command::Bootstrap {
            a,
            b,
            seed,
            resamples,
        } => {
            let report = cmd_bootstrap(&a, &b, resamples, seed)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(EXIT_OK)
        }
        Command::Checkgrad { json } => {
            let out = cmd_checkgrad()?;
            if json {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&out).context("serializing table")?
                );
            } else {
                print!("{}", render_checkgrad(&out));
            }
            Ok(if out.ok() { EXIT_OK } else { EXIT_NUMERIC })
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
