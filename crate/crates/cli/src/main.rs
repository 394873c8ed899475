//! `asnet`: train, evaluate and compare attention-schema agents.

use std::path::PathBuf;
use std::process::ExitCode;

use asnet_core::gradsuite::{run_suite, DEFAULT_INSTANCES};
use asnet_core::harness::{aggregate_and_emit, evaluate_checkpoint, run_experiment, Emit, EvalMode, ExperimentConfig};
use asnet_core::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};

/// Exit code for a failed gradient check.
const GRADCHECK_FAILED: u8 = 4;

#[derive(Parser)]
#[command(name = "asnet", version, about = "Attention-schema agents on cooperative gridworlds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of an experiment, then evaluate IID and OOD.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seeds, replacing those in the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Add a ghost every 50 training episodes.
        #[arg(long)]
        continual: bool,
        /// Run directory; defaults to the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint with a frozen, sampling policy.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Summarise run directories of one task into a table and charts.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, value_enum, value_delimiter = ',', default_values = ["csv", "svg"])]
        emit: Vec<Output>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_INSTANCES)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Iid,
    Ood,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Output {
    Csv,
    Svg,
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "absent".to_string(), |v| format!("{v:.4}"))
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Train {
            config,
            seeds,
            continual,
            out,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seeds) = seeds {
                cfg.seeds = seeds;
            }
            cfg.continual |= continual;
            let out = out
                .or_else(|| cfg.output_dir.clone())
                .ok_or_else(|| Error::Config("no output directory: pass --out or set output_dir".into()))?;
            let outcomes = run_experiment(&cfg, &out)?;
            println!("seed,iid_mean,iid_std,ood_mean,ood_std");
            for o in outcomes {
                println!(
                    "{},{},{},{},{}",
                    o.seed,
                    fmt_opt(o.iid.mean),
                    fmt_opt(o.iid.std),
                    fmt_opt(o.ood.mean),
                    fmt_opt(o.ood.std)
                );
            }
        }
        Command::Eval {
            checkpoint,
            mode,
            episodes,
            seed,
        } => {
            let mode = match mode {
                Mode::Iid => EvalMode::Iid,
                Mode::Ood => EvalMode::Ood,
            };
            let summary = evaluate_checkpoint(&checkpoint, mode, episodes, seed)?;
            let json = serde_json::json!({
                "mode": mode,
                "episodes": episodes,
                "seed": seed,
                "mean": summary.mean,
                "std": summary.std,
                "rewards": summary.rewards,
            });
            println!("{}", serde_json::to_string_pretty(&json).expect("summary serialises"));
        }
        Command::Compare { runs, emit, out } => {
            let emit = Emit {
                csv: emit.contains(&Output::Csv),
                svg: emit.contains(&Output::Svg),
            };
            let rows = aggregate_and_emit(&runs, &out, emit)?;
            println!("hypothesis,phase,n_seeds,mean,std");
            for r in rows {
                println!("{},{},{},{:.4},{:.4}", r.hypothesis, r.phase, r.n_seeds, r.mean, r.std);
            }
        }
        Command::Gradcheck { instances, seed } => {
            let report = run_suite(instances, seed)?;
            for (component, n, worst) in report.by_component() {
                println!("{component:<18} instances {n:>4}  max rel error {worst:.3e}");
            }
            println!(
                "{} instances, {} gradient entries, max rel error {:.3e}: {}",
                report.cases.len(),
                report.checked(),
                report.max_rel_error(),
                if report.passed() { "PASS" } else { "FAIL" }
            );
            if !report.passed() {
                return Ok(ExitCode::from(GRADCHECK_FAILED));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
