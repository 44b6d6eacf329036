//! `fedmma` command line. Every flag can also come from a `FEDMMA_*`
//! environment variable; flags win.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedmma_core::evalrun::{
    gradcheck_suite, partition_plan, report, run_experiment, ExperimentConfig, ExperimentSummary, GradcheckConfig,
};
use fedmma_core::Error;

#[derive(Parser)]
#[command(name = "fedmma", version, about = "Federated multi-modal adapter simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write metrics.csv, comm.csv, summary.json and config.echo.json.
    Run {
        #[arg(long, env = "FEDMMA_CONFIG")]
        config: PathBuf,
        #[arg(long, env = "FEDMMA_OUT")]
        out: PathBuf,
        /// Replace the configured seed list with this single seed.
        #[arg(long, env = "FEDMMA_SEED")]
        seed: Option<u64>,
    },
    /// Finite-difference check of every adapter gradient on random toy models.
    Gradcheck {
        #[arg(long, env = "FEDMMA_TRIALS", default_value_t = 100)]
        trials: usize,
        #[arg(long, env = "FEDMMA_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Print the partition plan of a config as JSON.
    Partition {
        #[arg(long, env = "FEDMMA_CONFIG")]
        config: PathBuf,
        #[arg(long)]
        dump: bool,
        #[arg(long, env = "FEDMMA_SEED")]
        seed: Option<u64>,
    },
    /// Recompute the summary of a run directory from its CSV files.
    Report {
        #[arg(long = "in", env = "FEDMMA_IN")]
        input: PathBuf,
    },
}

fn print_summary(s: &ExperimentSummary) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(s)?);
    Ok(())
}

fn load(path: &std::path::Path, seed: Option<u64>) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.eval.seeds = vec![s];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(command: Command) -> Result<bool, Error> {
    match command {
        Command::Run { config, out, seed } => {
            let cfg = load(&config, seed)?;
            print_summary(&run_experiment(&cfg, &out)?)?;
        }
        Command::Gradcheck { trials, seed } => {
            let cfg = GradcheckConfig { trials, seed, ..GradcheckConfig::default() };
            let (summary, reports) = gradcheck_suite(&cfg)?;
            let worst = &reports[summary.worst_trial];
            let over: usize = reports.iter().map(|r| r.over_tolerance).sum();
            println!(
                "trials {} entries {} max_rel_error {:.3e} (trial {}, block {} {}[{}]: analytic {:.6e} numeric {:.6e}) over_tolerance {} seconds {:.1}",
                summary.trials,
                summary.entries,
                summary.max_rel_error,
                worst.trial,
                worst.worst.0,
                worst.worst.1,
                worst.worst.2,
                worst.analytic,
                worst.numeric,
                over,
                summary.seconds,
            );
            return Ok(summary.max_rel_error < cfg.tolerance);
        }
        Command::Partition { config, dump, seed } => {
            let cfg = load(&config, seed)?;
            let seed = seed.unwrap_or(cfg.eval.seeds[0]);
            let plan = partition_plan(&cfg, seed)?;
            if dump {
                println!("{}", serde_json::to_string_pretty(&plan)?);
            } else {
                for (i, classes) in plan.base_classes.iter().enumerate() {
                    println!("client {i}: {} samples, classes {classes:?}", plan.shard(i).len());
                }
                println!("novel classes {:?}", plan.novel_classes);
            }
        }
        Command::Report { input } => print_summary(&report(&input)?)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("fedmma: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
