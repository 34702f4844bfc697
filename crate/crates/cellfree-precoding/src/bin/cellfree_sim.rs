//! Command-line experiment runner.
//!
//! Thin front end over the library's experiment harness: `sweep` runs a
//! Monte-Carlo sweep to CSV, `trace` writes per-iteration convergence rows,
//! `verify` runs the analytical cross-check suite and `show-config` prints
//! the effective configuration. Exit codes: 0 on success, 1 when a check or
//! solver fails, 2 on configuration errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cellfree_precoding::config::SystemConfig;
use cellfree_precoding::experiment::{
    render_trace_csv, run_convergence_trace, run_experiment, verify_suite, ExperimentSpec,
    SolverKind, SweepAxis,
};
use cellfree_precoding::validation::Tamper;

#[derive(Parser)]
#[command(name = "cellfree-sim", version, about = "Cell-free MIMO precoding experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// JSON file carrying scenario and sweep fields; missing fields use
    /// built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte-Carlo sweep and write per-trial and aggregate CSV files.
    Sweep {
        #[command(flatten)]
        config: ConfigArg,
        /// Swept scenario dimension.
        #[arg(long)]
        axis: Option<SweepAxis>,
        /// Axis values, comma separated.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        /// Solvers to run, comma separated (hybrid, fully_digital, zf, mrt).
        #[arg(long, value_delimiter = ',')]
        solvers: Option<Vec<SolverKind>>,
        /// Trials per axis value.
        #[arg(long)]
        trials: Option<usize>,
        /// Output CSV path; the aggregate file gets an `_aggregate` suffix.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Concurrent worker threads (0 = automatic).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run both iterative solvers on one channel and write their traces.
    Trace {
        #[command(flatten)]
        config: ConfigArg,
        /// Trial index selecting the channel realization.
        #[arg(long, default_value_t = 0)]
        trial: u64,
        /// Output CSV path.
        #[arg(long, default_value = "trace.csv")]
        out: PathBuf,
    },
    /// Run the analytical cross-check suite.
    Verify {
        /// Seeded instances per check.
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        /// Fault-injection hook: flip the coupling sign inside the
        /// block-decomposition check to exercise the failure path.
        #[arg(long, hide = true)]
        inject_coupling_fault: bool,
    },
    /// Print the effective configuration as JSON.
    ShowConfig {
        #[command(flatten)]
        config: ConfigArg,
    },
}

fn load_spec(arg: &ConfigArg) -> Result<ExperimentSpec, String> {
    let mut spec = match &arg.config {
        Some(path) => {
            let file = std::fs::File::open(path)
                .map_err(|e| format!("cannot open {}: {e}", path.display()))?;
            ExperimentSpec::from_json_reader(file).map_err(|e| format!("bad config: {e}"))?
        }
        None => ExperimentSpec::default(),
    };
    if let Some(seed) = arg.seed {
        spec.base.seed = seed;
    }
    Ok(spec)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, String> {
    match cli.command {
        Command::Sweep {
            config,
            axis,
            values,
            solvers,
            trials,
            out,
            workers,
        } => {
            let mut spec = load_spec(&config)?;
            if let Some(axis) = axis {
                spec.axis = axis;
            }
            if let Some(values) = values {
                spec.values = values;
            }
            if let Some(solvers) = solvers {
                spec.solvers = solvers;
            }
            if let Some(trials) = trials {
                spec.trials = trials;
            }
            if let Some(out) = out {
                spec.output = out;
            }
            if let Some(workers) = workers {
                spec.workers = workers;
            }
            spec.validate().map_err(|e| e.to_string())?;
            let outcome = run_experiment(&spec).map_err(|e| e.to_string())?;
            let aggregate = outcome
                .write_csv(&spec.output)
                .map_err(|e| e.to_string())?;
            let failures = outcome
                .rows
                .iter()
                .filter(|r| r.status != "ok")
                .count();
            eprintln!(
                "wrote {} rows to {} (aggregates in {})",
                outcome.rows.len(),
                spec.output.display(),
                aggregate.display()
            );
            if failures > 0 {
                eprintln!("{failures} trial(s) failed; see the status column");
                return Ok(ExitCode::from(1));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Trace { config, trial, out } => {
            let spec = load_spec(&config)?;
            let cfg: SystemConfig = spec.base.validate().map_err(|e| e.to_string())?;
            let rows = match run_convergence_trace(&cfg, trial) {
                Ok(rows) => rows,
                Err(e) => {
                    eprintln!("solver failed: {e}");
                    return Ok(ExitCode::from(1));
                }
            };
            std::fs::write(&out, render_trace_csv(&rows)).map_err(|e| e.to_string())?;
            eprintln!("wrote {} rows to {}", rows.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify {
            seeds,
            inject_coupling_fault,
        } => {
            let tamper = if inject_coupling_fault {
                Tamper::FlipCouplingSign
            } else {
                Tamper::None
            };
            let report = verify_suite(seeds, tamper).map_err(|e| e.to_string())?;
            print!("{report}");
            if report.all_pass() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(1))
            }
        }
        Command::ShowConfig { config } => {
            let spec = load_spec(&config)?;
            spec.validate().map_err(|e| e.to_string())?;
            let text = serde_json::to_string_pretty(&spec).map_err(|e| e.to_string())?;
            println!("{text}");
            Ok(ExitCode::SUCCESS)
        }
    }
}
