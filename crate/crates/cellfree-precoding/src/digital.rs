//! Fully digital precoder design.
//!
//! Same outer loop as the hybrid solver but without analog/digital stages or
//! coupling penalties: combiners, MSE weights, then per-AP closed-form
//! precoder blocks. Without the penalty's spectral shift the block Gram
//! matrix is rank deficient (its rank equals the stream count), so the power
//! multiplier search runs over a strictly positive range starting at
//! [`MULTIPLIER_FLOOR`].

use crate::channel::{ChannelRealization, UserChannels};
use crate::config::{LinearPower, SystemConfig};
use crate::error::{Error, Result};
use crate::hybrid::{
    self, block_solution, init_auxiliary, update_combiners, update_weights, SubproblemData,
    RANK_CUTOFF,
};
use crate::metrics::{self, PrecoderStack};
use crate::numerics;
use crate::trace::{IterationRecord, IterationTrace, MultiplierCase, MultiplierReport};
use crate::CMat;

/// Lower end of the multiplier search range.
pub const MULTIPLIER_FLOOR: f64 = 1e-12;

/// Fully digital per-user precoders.
#[derive(Clone, Debug)]
pub struct FdPrecoder {
    stack: PrecoderStack,
}

impl FdPrecoder {
    pub fn new(stack: PrecoderStack) -> Self {
        Self { stack }
    }

    pub fn stack(&self) -> &PrecoderStack {
        &self.stack
    }

    pub fn into_stack(self) -> PrecoderStack {
        self.stack
    }

    /// Transmit power of AP `ap` in mW.
    pub fn ap_power(&self, ap: usize) -> Result<f64> {
        Ok(metrics::per_ap_power(ap, &self.stack)?.milliwatts())
    }
}

/// Completed fully digital design.
pub struct FdRun {
    pub precoder: FdPrecoder,
    pub trace: IterationTrace,
}

/// Transmit power of AP `ap`'s closed-form block solution at multiplier
/// `multiplier > 0`, evaluated through the block Gram spectrum.
///
/// Eigen-directions beyond the stream count carry (numerically) zero
/// right-hand-side energy, so the profile stays finite as the multiplier
/// approaches zero.
pub fn fd_power_profile(ap: usize, data: &SubproblemData, multiplier: f64) -> Result<f64> {
    if multiplier <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "fully digital power profile needs multiplier > 0, got {multiplier}"
        )));
    }
    let rhs: Vec<CMat> = (0..data.num_users())
        .map(|user| data.rhs(ap, user).clone())
        .collect();
    Ok(data.spectral_power_terms(ap, &rhs).power_at(0.0, multiplier))
}

/// Finds the power multiplier of AP `ap` for the fully digital subproblem.
///
/// If the power at [`MULTIPLIER_FLOOR`] already meets the budget, the floor
/// is returned (the budget is slack). Otherwise the profile is bisected over
/// `(floor, sqrt(numerator_sum / budget))` down to bracket width `tol`,
/// returning the feasible end of the final bracket.
pub fn solve_mu(
    ap: usize,
    data: &SubproblemData,
    max_power: LinearPower,
    tol: f64,
) -> Result<hybrid::MultiplierSolve> {
    let rhs: Vec<CMat> = (0..data.num_users())
        .map(|user| data.rhs(ap, user).clone())
        .collect();
    let terms = data.spectral_power_terms(ap, &rhs);
    let budget = max_power.milliwatts();
    if terms.power_at(0.0, MULTIPLIER_FLOOR) <= budget {
        return Ok(hybrid::MultiplierSolve {
            multiplier: MULTIPLIER_FLOOR,
            case: MultiplierCase::Interior,
            bracket_width: 0.0,
            slope_tolerance_mw: 0.0,
        });
    }
    let upper = (terms.numerator_sum() / budget).sqrt();
    let result = numerics::bisect_decreasing(
        |m| terms.power_at(0.0, m),
        budget,
        MULTIPLIER_FLOOR,
        upper,
        tol,
    )?;
    Ok(hybrid::MultiplierSolve {
        multiplier: result.root,
        case: MultiplierCase::Bisection,
        bracket_width: result.bracket_width,
        slope_tolerance_mw: result.value_at_lower - result.value_at_upper,
    })
}

/// Closed-form fully digital block of `(ap, user)` at the given multiplier.
pub fn update_fd_block(ap: usize, user: usize, data: &SubproblemData, multiplier: f64) -> CMat {
    block_solution(data.block_gram_eig(ap, user), data.rhs(ap, user), multiplier)
}

/// Runs the fully digital design on one channel realization.
pub fn run_fd(cfg: &SystemConfig, realization: &ChannelRealization) -> Result<FdRun> {
    let channels = realization.user_channels();
    let user_weights = cfg.user_weights_vec();
    let noise = cfg.noise_power;
    let budget = cfg.max_power();

    let mut stack = init_auxiliary(cfg, realization)?;
    let mut trace = IterationTrace::new(cfg.max_iters);
    let mut combiners = update_combiners(&stack, &channels, noise)?;
    let mut weights = update_weights(&combiners, &stack, &channels, noise)?;
    let mut objective =
        metrics::wmmse_core(&combiners, &weights, &stack, &channels, noise, &user_weights)?;
    trace.push(fd_record(0, objective, &stack, &channels, noise, &user_weights, vec![])?);

    for iteration in 1..=cfg.max_iters {
        combiners = update_combiners(&stack, &channels, noise)?;
        weights = update_weights(&combiners, &stack, &channels, noise)?;
        let mut data =
            hybrid::build_subproblem(&combiners, &weights, &stack, &channels, &user_weights)?;
        let mut reports = Vec::with_capacity(cfg.num_aps);
        for ap in 0..cfg.num_aps {
            data.refresh_coupling(ap, &stack);
            let solve = solve_mu(ap, &data, budget, cfg.bisection_tol)?;
            let mut achieved = 0.0;
            for user in 0..cfg.num_users {
                let block = update_fd_block(ap, user, &data, solve.multiplier);
                achieved += block.norm_squared();
                stack.set_block(ap, user, &block);
            }
            reports.push(MultiplierReport {
                case: solve.case,
                multiplier: solve.multiplier,
                bracket_width: solve.bracket_width,
                achieved_power_mw: achieved,
                budget_mw: budget.milliwatts(),
                slope_tolerance_mw: solve.slope_tolerance_mw,
            });
        }

        let next_objective =
            metrics::wmmse_core(&combiners, &weights, &stack, &channels, noise, &user_weights)?;
        if !next_objective.is_finite() {
            return Err(Error::NonFinite(format!(
                "fully digital objective became {next_objective} at iteration {iteration}"
            )));
        }
        trace.push(fd_record(
            iteration,
            next_objective,
            &stack,
            &channels,
            noise,
            &user_weights,
            reports,
        )?);
        let delta = (next_objective - objective).abs();
        objective = next_objective;
        if delta < cfg.convergence_tol {
            trace.mark_converged();
            break;
        }
    }

    Ok(FdRun {
        precoder: FdPrecoder::new(stack),
        trace,
    })
}

fn fd_record(
    iteration: usize,
    objective: f64,
    stack: &PrecoderStack,
    channels: &UserChannels,
    noise: f64,
    user_weights: &[f64],
    reports: Vec<MultiplierReport>,
) -> Result<IterationRecord> {
    let wsr_nats = metrics::wsr(stack, channels, noise, user_weights)?;
    let ap_power_mw = (0..stack.num_aps())
        .map(|ap| metrics::per_ap_power(ap, stack).map(|p| p.milliwatts()))
        .collect::<Result<Vec<_>>>()?;
    let multipliers = reports.iter().map(|r| r.multiplier).collect();
    Ok(IterationRecord {
        iteration,
        objective,
        wsr_nats,
        ap_power_mw,
        multipliers,
        multiplier_reports: reports,
    })
}

/// Numerical ranks of every block Gram matrix.
#[derive(Clone, Debug)]
pub struct RankReport {
    /// `ranks[ap][user]`: eigenvalue count above `1e-8` of the peak.
    pub ranks: Vec<Vec<usize>>,
    /// The stream count the ranks are expected to equal.
    pub expected: usize,
}

impl RankReport {
    pub fn all_match(&self) -> bool {
        self.ranks
            .iter()
            .all(|row| row.iter().all(|&r| r == self.expected))
    }
}

/// Reports the numerical rank of each block Gram matrix; generically this is
/// exactly the stream count.
pub fn check_lemma_rank(data: &SubproblemData) -> RankReport {
    let ranks = (0..data.num_aps())
        .map(|ap| {
            (0..data.num_users())
                .map(|user| data.block_gram_eig(ap, user).numerical_rank(RANK_CUTOFF))
                .collect()
        })
        .collect();
    RankReport {
        ranks,
        expected: data.num_streams(),
    }
}
