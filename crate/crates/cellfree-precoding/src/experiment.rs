//! Deterministic Monte-Carlo experiment harness.
//!
//! An [`ExperimentSpec`] sweeps one scenario axis over a list of values,
//! running seeded trials for every requested solver. Channels are shared
//! across solvers within a trial, so comparisons are seed-paired. Trials run
//! concurrently; result rows are ordered by (value, trial, solver)
//! regardless of completion order, making the CSV output byte-identical
//! across runs apart from the wall-time column.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, StackedChannel};
use crate::channel::sample_channel;
use crate::config::{AntennaGrid, SystemConfig};
use crate::digital;
use crate::error::{Error, Result};
use crate::hybrid;
use crate::metrics;
use crate::validation::{self, Tamper};

/// Scenario dimension swept by an experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    PowerDbm,
    NumRfChains,
    NumAps,
    NumUsers,
    NumTxAntennas,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::PowerDbm => "power_dbm",
            SweepAxis::NumRfChains => "num_rf_chains",
            SweepAxis::NumAps => "num_aps",
            SweepAxis::NumUsers => "num_users",
            SweepAxis::NumTxAntennas => "num_tx_antennas",
        }
    }

    /// Applies one axis value to a base config.
    pub fn apply(&self, base: &SystemConfig, value: f64) -> Result<SystemConfig> {
        let mut cfg = base.clone();
        match self {
            SweepAxis::PowerDbm => {
                cfg.max_power_dbm = value;
            }
            SweepAxis::NumRfChains => {
                cfg.num_rf_chains = integer_value("num_rf_chains", value)?;
            }
            SweepAxis::NumAps => {
                cfg.num_aps = integer_value("num_aps", value)?;
            }
            SweepAxis::NumUsers => {
                let users = integer_value("num_users", value)?;
                if !cfg.user_weights.is_empty() && cfg.user_weights.len() != users {
                    return Err(Error::InvalidConfig(format!(
                        "cannot sweep num_users to {users} with {} explicit user weights",
                        cfg.user_weights.len()
                    )));
                }
                cfg.num_users = users;
            }
            SweepAxis::NumTxAntennas => {
                let count = integer_value("num_tx_antennas", value)?;
                let side = (count as f64).sqrt().round() as usize;
                if side * side != count {
                    return Err(Error::InvalidConfig(format!(
                        "num_tx_antennas sweep needs a perfect square, got {count}"
                    )));
                }
                cfg.tx_grid = AntennaGrid::new(side, side);
            }
        }
        cfg.validate()
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "power_dbm" => Ok(SweepAxis::PowerDbm),
            "num_rf_chains" => Ok(SweepAxis::NumRfChains),
            "num_aps" => Ok(SweepAxis::NumAps),
            "num_users" => Ok(SweepAxis::NumUsers),
            "num_tx_antennas" => Ok(SweepAxis::NumTxAntennas),
            other => Err(format!(
                "unknown axis '{other}' (expected power_dbm, num_rf_chains, num_aps, num_users or num_tx_antennas)"
            )),
        }
    }
}

fn integer_value(name: &str, value: f64) -> Result<usize> {
    let rounded = value.round();
    if !(value.is_finite() && (value - rounded).abs() < 1e-9 && rounded >= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "{name} sweep needs a positive integer, got {value}"
        )));
    }
    Ok(rounded as usize)
}

/// Precoder designs the harness can run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Hybrid,
    FullyDigital,
    Zf,
    Mrt,
}

impl SolverKind {
    pub fn name(&self) -> &'static str {
        match self {
            SolverKind::Hybrid => "hybrid",
            SolverKind::FullyDigital => "fully_digital",
            SolverKind::Zf => "zf",
            SolverKind::Mrt => "mrt",
        }
    }
}

impl std::str::FromStr for SolverKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "hybrid" => Ok(SolverKind::Hybrid),
            "fully_digital" => Ok(SolverKind::FullyDigital),
            "zf" => Ok(SolverKind::Zf),
            "mrt" => Ok(SolverKind::Mrt),
            other => Err(format!(
                "unknown solver '{other}' (expected hybrid, fully_digital, zf or mrt)"
            )),
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One full sweep description: a base scenario, an axis with its values,
/// the solvers to run and the trial count.
///
/// The JSON form is one flat document carrying the [`SystemConfig`] fields
/// alongside the sweep fields; missing fields fall back to the defaults
/// below (4x4 transmit panels, a 10-40 dBm power sweep of the hybrid and
/// fully digital solvers, 10 trials per point).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    #[serde(flatten)]
    pub base: SystemConfig,
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub solvers: Vec<SolverKind>,
    pub trials: usize,
    pub output: PathBuf,
    pub workers: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            base: SystemConfig {
                tx_grid: AntennaGrid::new(4, 4),
                ..SystemConfig::default()
            },
            axis: SweepAxis::PowerDbm,
            values: vec![10.0, 20.0, 30.0, 40.0],
            solvers: vec![SolverKind::Hybrid, SolverKind::FullyDigital],
            trials: 10,
            output: PathBuf::from("results.csv"),
            workers: 0,
        }
    }
}

impl ExperimentSpec {
    /// Loads a spec from a JSON document.
    pub fn from_json_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let spec: ExperimentSpec = serde_json::from_reader(reader)?;
        Ok(spec)
    }

    /// Checks the sweep is runnable: at least one value, solver and trial,
    /// and every swept config passes validation.
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::InvalidConfig("sweep has no axis values".into()));
        }
        if self.solvers.is_empty() {
            return Err(Error::InvalidConfig("sweep has no solvers".into()));
        }
        if self.trials == 0 {
            return Err(Error::InvalidConfig("sweep needs trials >= 1".into()));
        }
        for &value in &self.values {
            self.axis.apply(&self.base, value)?;
        }
        Ok(())
    }
}

/// One (axis value, trial, solver) measurement.
#[derive(Clone, Debug, Serialize)]
pub struct TrialRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub trial: usize,
    pub solver: SolverKind,
    pub wsr_nats: Option<f64>,
    pub iterations: Option<usize>,
    pub max_ap_power_mw: Option<f64>,
    pub wall_ms: f64,
    pub status: String,
}

/// Mean and standard error per (axis value, solver).
#[derive(Clone, Debug, Serialize)]
pub struct AggregateRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub solver: SolverKind,
    pub trials: usize,
    pub mean_wsr_nats: f64,
    pub stderr_wsr_nats: f64,
    pub mean_wsr_bits: f64,
    pub stderr_wsr_bits: f64,
}

/// All rows of one executed sweep.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub rows: Vec<TrialRow>,
    pub aggregates: Vec<AggregateRow>,
}

impl ExperimentOutcome {
    /// Writes the per-trial CSV to `path` and the aggregate CSV next to it
    /// (same stem with an `_aggregate` suffix). Returns the aggregate path.
    pub fn write_csv(&self, path: &Path) -> Result<PathBuf> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(render_trial_csv(&self.rows).as_bytes())?;
        let aggregate_path = aggregate_path_for(path);
        let mut file = std::fs::File::create(&aggregate_path)?;
        file.write_all(render_aggregate_csv(&self.aggregates).as_bytes())?;
        Ok(aggregate_path)
    }
}

/// Aggregate file path derived from the trial file path.
pub fn aggregate_path_for(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "results".into());
    let name = match path.extension() {
        Some(ext) => format!("{stem}_aggregate.{}", ext.to_string_lossy()),
        None => format!("{stem}_aggregate"),
    };
    path.with_file_name(name)
}

fn sig12(v: f64) -> String {
    format!("{v:.11e}")
}

fn optional(v: Option<f64>) -> String {
    v.map(sig12).unwrap_or_default()
}

/// Renders the per-trial rows as CSV text.
pub fn render_trial_csv(rows: &[TrialRow]) -> String {
    let mut out = String::from(
        "axis,value,trial,solver,wsr_nats,wsr_bits,iters,max_ap_power_mw,wall_ms,status\n",
    );
    for row in rows {
        let bits = row.wsr_nats.map(|v| v / std::f64::consts::LN_2);
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{:.3},{}\n",
            row.axis.name(),
            row.value,
            row.trial,
            row.solver,
            optional(row.wsr_nats),
            optional(bits),
            row.iterations.map(|i| i.to_string()).unwrap_or_default(),
            optional(row.max_ap_power_mw),
            row.wall_ms,
            row.status,
        ));
    }
    out
}

/// Renders the aggregate rows as CSV text.
pub fn render_aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from(
        "axis,value,solver,trials,mean_wsr_nats,stderr_wsr_nats,mean_wsr_bits,stderr_wsr_bits\n",
    );
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            row.axis.name(),
            row.value,
            row.solver,
            row.trials,
            sig12(row.mean_wsr_nats),
            sig12(row.stderr_wsr_nats),
            sig12(row.mean_wsr_bits),
            sig12(row.stderr_wsr_bits),
        ));
    }
    out
}

fn run_solver(solver: SolverKind, cfg: &SystemConfig, trial: u64) -> Result<(f64, usize, f64)> {
    let realization = sample_channel(cfg, trial);
    let channels = realization.user_channels();
    let user_weights = cfg.user_weights_vec();
    match solver {
        SolverKind::Hybrid => {
            let run = hybrid::run(cfg, &realization)?;
            let wsr = metrics::wsr(
                &run.precoder.effective_stack(),
                &channels,
                cfg.noise_power,
                &user_weights,
            )?;
            let power = (0..cfg.num_aps)
                .map(|b| run.precoder.ap_power(b))
                .fold(0.0, f64::max);
            Ok((wsr, run.trace.iterations(), power))
        }
        SolverKind::FullyDigital => {
            let run = digital::run_fd(cfg, &realization)?;
            let wsr = metrics::wsr(
                run.precoder.stack(),
                &channels,
                cfg.noise_power,
                &user_weights,
            )?;
            let power = (0..cfg.num_aps)
                .map(|b| run.precoder.ap_power(b))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .fold(0.0, f64::max);
            Ok((wsr, run.trace.iterations(), power))
        }
        SolverKind::Zf | SolverKind::Mrt => {
            if cfg.num_rx_antennas() != 1 || cfg.num_streams != 1 {
                return Err(Error::InvalidConfig(
                    "zf/mrt baselines need single-antenna single-stream users".into(),
                ));
            }
            let stacked = StackedChannel::from_realization(&realization)?;
            let precoder = match solver {
                SolverKind::Zf => baselines::zf_precoder(&stacked, cfg.max_power())?,
                _ => baselines::mrt_precoder(&stacked, cfg.max_power())?,
            };
            let wsr = metrics::wsr(precoder.stack(), &channels, cfg.noise_power, &user_weights)?;
            let power = (0..cfg.num_aps)
                .map(|b| metrics::per_ap_power(b, precoder.stack()).map(|p| p.milliwatts()))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .fold(0.0, f64::max);
            Ok((wsr, 0, power))
        }
    }
}

/// Runs the sweep. Solver failures become rows with an error status; config
/// errors abort before any trial runs.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutcome> {
    spec.validate()?;
    let configs: Vec<SystemConfig> = spec
        .values
        .iter()
        .map(|&v| spec.axis.apply(&spec.base, v))
        .collect::<Result<Vec<_>>>()?;

    let jobs: Vec<(usize, usize)> = (0..spec.values.len())
        .flat_map(|value_idx| (0..spec.trials).map(move |trial| (value_idx, trial)))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;

    let mut keyed: Vec<((usize, usize), Vec<TrialRow>)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(value_idx, trial)| {
                let cfg = &configs[value_idx];
                let rows = spec
                    .solvers
                    .iter()
                    .map(|&solver| {
                        let started = Instant::now();
                        let result = run_solver(solver, cfg, trial as u64);
                        let wall_ms = started.elapsed().as_secs_f64() * 1e3;
                        match result {
                            Ok((wsr, iterations, power)) => TrialRow {
                                axis: spec.axis,
                                value: spec.values[value_idx],
                                trial,
                                solver,
                                wsr_nats: Some(wsr),
                                iterations: Some(iterations),
                                max_ap_power_mw: Some(power),
                                wall_ms,
                                status: "ok".into(),
                            },
                            Err(err) => TrialRow {
                                axis: spec.axis,
                                value: spec.values[value_idx],
                                trial,
                                solver,
                                wsr_nats: None,
                                iterations: None,
                                max_ap_power_mw: None,
                                wall_ms,
                                status: format!("error:{}", compact_error(&err)),
                            },
                        }
                    })
                    .collect();
                ((value_idx, trial), rows)
            })
            .collect()
    });
    keyed.sort_by_key(|(key, _)| *key);
    let rows: Vec<TrialRow> = keyed.into_iter().flat_map(|(_, rows)| rows).collect();

    let aggregates = aggregate(spec, &rows);
    Ok(ExperimentOutcome { rows, aggregates })
}

fn compact_error(err: &Error) -> String {
    let text = err.to_string();
    text.split(':').next().unwrap_or("failure").replace(' ', "_")
}

fn aggregate(spec: &ExperimentSpec, rows: &[TrialRow]) -> Vec<AggregateRow> {
    let mut out = Vec::new();
    for (value_idx, &value) in spec.values.iter().enumerate() {
        for &solver in &spec.solvers {
            let samples: Vec<f64> = rows
                .iter()
                .filter(|r| {
                    r.solver == solver
                        && (r.value - spec.values[value_idx]).abs() == 0.0
                        && r.wsr_nats.is_some()
                })
                .map(|r| r.wsr_nats.unwrap())
                .collect();
            if samples.is_empty() {
                continue;
            }
            let n = samples.len() as f64;
            let mean = samples.iter().sum::<f64>() / n;
            let stderr = if samples.len() > 1 {
                let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
                (var / n).sqrt()
            } else {
                0.0
            };
            out.push(AggregateRow {
                axis: spec.axis,
                value,
                solver,
                trials: samples.len(),
                mean_wsr_nats: mean,
                stderr_wsr_nats: stderr,
                mean_wsr_bits: mean / std::f64::consts::LN_2,
                stderr_wsr_bits: stderr / std::f64::consts::LN_2,
            });
        }
    }
    out
}

/// Per-iteration convergence rows of both iterative solvers on one shared
/// channel realization.
#[derive(Clone, Debug, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub solver: SolverKind,
    pub objective: f64,
    pub wsr_nats: f64,
    pub max_ap_power_mw: f64,
}

/// Runs both iterative solvers on the trial's channel and collects their
/// convergence traces.
pub fn run_convergence_trace(cfg: &SystemConfig, trial: u64) -> Result<Vec<TraceRow>> {
    let cfg = cfg.clone().validate()?;
    let realization = sample_channel(&cfg, trial);
    let mut rows = Vec::new();
    let hybrid_run = hybrid::run(&cfg, &realization)?;
    for record in hybrid_run.trace.records() {
        rows.push(TraceRow {
            iteration: record.iteration,
            solver: SolverKind::Hybrid,
            objective: record.objective,
            wsr_nats: record.wsr_nats,
            max_ap_power_mw: record.ap_power_mw.iter().cloned().fold(0.0, f64::max),
        });
    }
    let fd_run = digital::run_fd(&cfg, &realization)?;
    for record in fd_run.trace.records() {
        rows.push(TraceRow {
            iteration: record.iteration,
            solver: SolverKind::FullyDigital,
            objective: record.objective,
            wsr_nats: record.wsr_nats,
            max_ap_power_mw: record.ap_power_mw.iter().cloned().fold(0.0, f64::max),
        });
    }
    Ok(rows)
}

/// Renders convergence rows as CSV text.
pub fn render_trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("iteration,solver,objective,wsr_nats,max_ap_power_mw\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.iteration,
            row.solver,
            sig12(row.objective),
            sig12(row.wsr_nats),
            sig12(row.max_ap_power_mw),
        ));
    }
    out
}

/// One line of the verification table.
#[derive(Clone, Debug)]
pub struct CheckLine {
    pub name: &'static str,
    pub seeds: usize,
    pub worst: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// Outcome of the full verification suite.
#[derive(Clone, Debug, Default)]
pub struct VerificationReport {
    pub lines: Vec<CheckLine>,
}

impl VerificationReport {
    pub fn all_pass(&self) -> bool {
        self.lines.iter().all(|l| l.pass)
    }
}

impl fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<28} {:>6} {:>13} {:>10} {:>7}",
            "check", "seeds", "worst", "threshold", "result"
        )?;
        for line in &self.lines {
            writeln!(
                f,
                "{:<28} {:>6} {:>13.3e} {:>10.1e} {:>7}",
                line.name,
                line.seeds,
                line.worst,
                line.threshold,
                if line.pass { "pass" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

fn verify_cfg() -> SystemConfig {
    SystemConfig {
        tx_grid: AntennaGrid::new(4, 4),
        ..SystemConfig::default()
    }
    .validate()
    .expect("verification config is valid")
}

/// Runs every analytical cross-check over `seeds` seeded instances.
///
/// `tamper` injects a sign fault into the block-decomposition check; it
/// exists so the failure path of the suite can be exercised end to end.
pub fn verify_suite(seeds: usize, tamper: Tamper) -> Result<VerificationReport> {
    let cfg = verify_cfg();
    let user_weights = cfg.user_weights_vec();
    let mut report = VerificationReport::default();
    if seeds == 0 {
        return Ok(report);
    }

    let mut decomposition: f64 = 0.0;
    let mut equivalence: f64 = 0.0;
    let mut power_identity: f64 = 0.0;
    let mut rank_misses = 0usize;
    for trial in 0..seeds as u64 {
        let realization = sample_channel(&cfg, trial);
        let channels = realization.user_channels();
        let stack = hybrid::init_auxiliary(&cfg, &realization)?;
        let analog = hybrid::init_analog(&cfg, trial);
        let digital_stage = hybrid::init_digital(&cfg, &analog, &stack);
        let hybrid_precoder = hybrid::HybridPrecoder::new(analog, digital_stage);
        let combiners = hybrid::update_combiners(&stack, &channels, cfg.noise_power)?;
        let weights = hybrid::update_weights(&combiners, &stack, &channels, cfg.noise_power)?;

        let multipliers: Vec<f64> = (0..cfg.num_aps).map(|b| 0.05 + 0.1 * b as f64).collect();
        decomposition = decomposition.max(validation::check_block_decomposition(
            &combiners,
            &weights,
            &stack,
            &hybrid_precoder.effective_stack(),
            &channels,
            cfg.noise_power,
            cfg.penalty_param(),
            &user_weights,
            &multipliers,
            cfg.max_power().milliwatts(),
            tamper,
        )?);
        equivalence = equivalence.max(validation::check_wsr_wmmse_equivalence(
            &stack,
            &channels,
            cfg.noise_power,
            &user_weights,
        )?);
        let data =
            hybrid::build_subproblem(&combiners, &weights, &stack, &channels, &user_weights)?;
        power_identity = power_identity.max(validation::check_fd_power_identity(
            &data,
            &[1e-3, 0.1, 1.0, 10.0],
        )?);
        let rank = digital::check_lemma_rank(&data);
        if !rank.all_match() {
            rank_misses += 1;
        }
    }
    report.lines.push(CheckLine {
        name: "block_decomposition",
        seeds,
        worst: decomposition,
        threshold: 1e-8,
        pass: decomposition <= 1e-8,
    });
    report.lines.push(CheckLine {
        name: "wsr_wmmse_equivalence",
        seeds,
        worst: equivalence,
        threshold: 1e-8,
        pass: equivalence <= 1e-8,
    });
    report.lines.push(CheckLine {
        name: "fd_power_spectral_vs_direct",
        seeds,
        worst: power_identity,
        threshold: 1e-8,
        pass: power_identity <= 1e-8,
    });
    report.lines.push(CheckLine {
        name: "block_gram_rank",
        seeds,
        worst: rank_misses as f64,
        threshold: 0.0,
        pass: rank_misses == 0,
    });

    // stationarity at converged solver outputs
    let stationarity_seeds = seeds.min(10);
    let mut hybrid_grad: f64 = 0.0;
    let mut fd_grad: f64 = 0.0;
    for trial in 0..stationarity_seeds as u64 {
        let realization = sample_channel(&cfg, trial);
        let channels = realization.user_channels();
        let run = hybrid::run(&cfg, &realization)?;
        let combiners = hybrid::update_combiners(&run.auxiliary, &channels, cfg.noise_power)?;
        let weights =
            hybrid::update_weights(&combiners, &run.auxiliary, &channels, cfg.noise_power)?;
        hybrid_grad = hybrid_grad.max(validation::check_hybrid_stationarity(
            &cfg,
            &combiners,
            &weights,
            &run.auxiliary,
            &run.precoder,
            &channels,
        )?);

        let fd_run = digital::run_fd(&cfg, &realization)?;
        let stack = fd_run.precoder.stack();
        let combiners = hybrid::update_combiners(stack, &channels, cfg.noise_power)?;
        let weights = hybrid::update_weights(&combiners, stack, &channels, cfg.noise_power)?;
        fd_grad = fd_grad.max(validation::check_fd_stationarity(
            &cfg, &combiners, &weights, stack, &channels,
        )?);
    }
    report.lines.push(CheckLine {
        name: "hybrid_stationarity",
        seeds: stationarity_seeds,
        worst: hybrid_grad,
        threshold: 1e-6,
        pass: hybrid_grad <= 1e-6,
    });
    report.lines.push(CheckLine {
        name: "fd_stationarity",
        seeds: stationarity_seeds,
        worst: fd_grad,
        threshold: 1e-6,
        pass: fd_grad <= 1e-6,
    });

    Ok(report)
}
