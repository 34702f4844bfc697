//! Per-iteration solver diagnostics.

use serde::{Deserialize, Serialize};

/// How a per-AP power multiplier was determined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MultiplierCase {
    /// The unconstrained block solution already met the budget.
    Interior,
    /// The budget was active and the multiplier came from bisection.
    Bisection,
}

/// Outcome of one per-AP multiplier solve.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiplierReport {
    pub case: MultiplierCase,
    /// The multiplier value used for the block update.
    pub multiplier: f64,
    /// Bracket width when the bisection stopped; 0 for interior solutions.
    pub bracket_width: f64,
    /// Power actually allocated to the AP by the block update, in mW.
    pub achieved_power_mw: f64,
    /// Power budget of the AP, in mW.
    pub budget_mw: f64,
    /// Power spread across the final bracket, bounding how far the achieved
    /// power can sit from the budget; 0 for interior solutions.
    pub slope_tolerance_mw: f64,
}

/// State captured after one outer iteration (or at initialization).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Convergence monitor: the penalized weighted-MMSE objective.
    pub objective: f64,
    /// Weighted sum rate of the transmittable precoder, in nats.
    pub wsr_nats: f64,
    /// Transmit power per AP, in mW.
    pub ap_power_mw: Vec<f64>,
    /// Power multiplier per AP from the most recent precoder update.
    pub multipliers: Vec<f64>,
    /// Detailed multiplier solves backing `multipliers`; empty at iteration 0.
    pub multiplier_reports: Vec<MultiplierReport>,
}

/// Ordered iteration records of one solver run.
///
/// Holds at most `max_iters + 1` records: the initial state plus one per
/// completed iteration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IterationTrace {
    records: Vec<IterationRecord>,
    converged: bool,
    max_records: usize,
}

impl IterationTrace {
    pub fn new(max_iters: usize) -> Self {
        Self {
            records: Vec::with_capacity(max_iters + 1),
            converged: false,
            max_records: max_iters + 1,
        }
    }

    pub fn push(&mut self, record: IterationRecord) {
        assert!(
            self.records.len() < self.max_records,
            "trace already holds max_iters + 1 records"
        );
        self.records.push(record);
    }

    pub fn mark_converged(&mut self) {
        self.converged = true;
    }

    pub fn records(&self) -> &[IterationRecord] {
        &self.records
    }

    /// Whether the run stopped on the objective-change criterion rather than
    /// the iteration cap.
    pub fn converged(&self) -> bool {
        self.converged
    }

    /// Number of completed iterations (excluding the initial record).
    pub fn iterations(&self) -> usize {
        self.records.len().saturating_sub(1)
    }

    pub fn final_record(&self) -> Option<&IterationRecord> {
        self.records.last()
    }

    /// Largest one-step decrease of the objective, normalized by the running
    /// objective magnitude. Zero for monotone traces.
    pub fn max_relative_dip(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for pair in self.records.windows(2) {
            let scale = 1.0 + pair[0].objective.abs().max(pair[1].objective.abs());
            let dip = (pair[0].objective - pair[1].objective) / scale;
            worst = worst.max(dip);
        }
        worst
    }

    /// True when the objective never drops by more than `rel_slack` of its
    /// running magnitude between consecutive records.
    pub fn is_monotone(&self, rel_slack: f64) -> bool {
        self.max_relative_dip() <= rel_slack
    }
}
