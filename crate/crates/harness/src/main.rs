use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use spd_harness::verify::{self, Level};
use spd_harness::{commands, ExperimentConfig};

#[derive(Parser)]
#[command(name = "spd", version, about = "SPD fine-tuning benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain and fine-tune once; writes metrics.csv, layers.csv and checkpoint.spd.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune over a λ × seed grid; writes sweep.csv and correlation.json.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        lambdas: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Run grid points one at a time.
        #[arg(long)]
        serial: bool,
    },
    /// Run the invariant and oracle checks; exits non-zero if any fail.
    Verify {
        #[arg(long, value_enum, default_value = "fast")]
        level: Level,
    },
    /// Compare the mean inner product of independent minibatch gradients with ‖ḡ‖².
    ProbeVariance {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = commands::VARIANCE_PAIRS)]
        pairs: usize,
    },
    /// Check the SGD descent bound on a noisy quadratic.
    ProbeDescent {
        #[arg(long = "L")]
        l: f64,
        #[arg(long)]
        eta: f64,
    },
}

fn load(path: &Path) -> anyhow::Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = load(&config)?;
            let result = commands::run_to_dir(&cfg, &out)?;
            let last = result.outcome.rows.last().expect("epochs > 0");
            println!(
                "{}: id_acc {:.4} ood_avg {:.4} deviation {:.4}; wrote {}",
                last.run_id,
                last.id_acc,
                last.ood_avg,
                last.deviation_total,
                out.display()
            );
        }
        Command::Sweep {
            config,
            lambdas,
            seeds,
            out,
            serial,
        } => {
            if lambdas.len() < 3 {
                anyhow::bail!(
                    "a sweep needs at least three λ values, got {}",
                    lambdas.len()
                );
            }
            let cfg = load(&config)?;
            let corr = commands::sweep_to_dir(&cfg, &lambdas, &seeds, &out, !serial)?;
            for s in &corr.per_lambda {
                println!(
                    "lambda {:<8} mean_ood {:.4} mean_deviation {:.4}",
                    s.lambda, s.mean_ood, s.mean_deviation
                );
            }
            println!("pearson_r {:.4}; wrote {}", corr.pearson_r, out.display());
        }
        Command::Verify { level } => {
            let ok = verify::run_suite(level, &mut std::io::stdout().lock())?;
            return Ok(if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            });
        }
        Command::ProbeVariance { config, pairs } => {
            let cfg = load(&config)?;
            let p = commands::probe_variance(&cfg, pairs)?;
            println!("{}", serde_json::to_string_pretty(&p)?);
        }
        Command::ProbeDescent { l, eta } => {
            let p = commands::probe_descent(l, eta)?;
            for s in &p.steps {
                println!(
                    "step {:>3} mean_change {:+.6e} se {:.2e} bound {:+.6e}{}",
                    s.step,
                    s.mean_change,
                    s.se,
                    s.bound,
                    if s.violated { " VIOLATED" } else { "" }
                );
            }
            println!("violations {}", p.violations);
            if p.violations > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
