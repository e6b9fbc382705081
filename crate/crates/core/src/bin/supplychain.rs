use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use supplychain::runner::{self, Report, RunnerError};

/// Supply Chain gridworld experiments.
///
/// The master seed comes from `[run] master_seed` unless SUPPLY_SEED is set.
/// Exit codes: 0 success, 2 configuration error, 3 runtime error.
#[derive(Parser)]
#[command(name = "supplychain", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario (including its own [sweep] grid, if any).
    Run {
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run a parameter grid; each --grid adds `key=v1,v2,...`.
    Sweep {
        config: PathBuf,
        #[arg(long = "grid")]
        grid: Vec<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Train a population and write a checkpoint.
    Train {
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Evaluate a trained population with frozen weights.
    Eval {
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Take the most likely action instead of sampling.
        #[arg(long)]
        greedy: bool,
    },
    /// Re-simulate an episode log and print its frames.
    Replay {
        log: PathBuf,
        /// Check the log against this ASCII map.
        #[arg(long)]
        map: Option<PathBuf>,
        /// Print only the last frame.
        #[arg(long)]
        last: bool,
    },
    /// Aggregate every episode log under a directory into a CSV on stdout.
    Metrics { logdir: PathBuf },
}

fn print_report(report: &Report) {
    for s in &report.settings {
        match &s.summary {
            Some(m) => println!(
                "{}: {} runs, group reward {:.2} ± {:.2}, care {:.2}, S {:.3}, D {:.3}",
                s.label, m.runs, m.group_reward.mean, m.group_reward.half_width, m.total_care.mean, m.s.mean, m.d.mean
            ),
            None => {
                let m = &s.results[0].metrics;
                println!("{}: group reward {}, care {:.2}, S {:.3}, D {:.3}", s.label, m.group_reward, m.total_care(), m.s, m.d)
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), RunnerError> {
    match cli.command {
        Command::Run { config, out } => print_report(&runner::run_scenario(&config, &out)?),
        Command::Sweep { config, grid, out } => print_report(&runner::sweep(&config, &grid, &out)?),
        Command::Train { config, out } => {
            let report = runner::train_scenario(&config, &out)?;
            if let Some(last) = report.curves.rows.last() {
                println!("step {}: group reward {:.2}", last.step, last.group_reward);
            }
            println!("checkpoint: {}", report.checkpoint.display());
        }
        Command::Eval { config, checkpoint, out, greedy } => {
            print_report(&runner::eval_scenario(&config, &checkpoint, &out, greedy)?)
        }
        Command::Replay { log, map, last } => {
            let frames = runner::replay(&log, map.as_deref())?;
            let shown = if last { &frames[frames.len().saturating_sub(1)..] } else { &frames[..] };
            for f in shown {
                println!("{f}");
            }
        }
        Command::Metrics { logdir } => {
            runner::metrics_dir(&logdir, std::io::stdout().lock())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
