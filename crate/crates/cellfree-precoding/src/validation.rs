//! Independent numerical cross-checks of the solver algebra.
//!
//! Each check computes one quantity along two routes that share as little
//! code as possible — full-matrix expressions on one side, the solver's
//! per-AP block decomposition or spectral shortcut on the other — and
//! returns the worst relative discrepancy. The finite-difference gradient
//! supports stationarity checks of the closed-form block solutions.

use crate::channel::UserChannels;
use crate::config::SystemConfig;
use crate::digital;
use crate::error::Result;
use crate::hybrid::{self, HybridPrecoder, SubproblemData};
use crate::metrics::{self, solve_hermitian_pd, CombinerSet, MseWeights, PrecoderStack};
use crate::trace::MultiplierCase;
use crate::{CMat, Cpx};

/// Optional fault injection for self-tests of the identity checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Tamper {
    #[default]
    None,
    /// Flip the sign of the cross-AP coupling term in the block route.
    FlipCouplingSign,
}

fn relative_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + a.abs().max(b.abs()))
}

/// Central-difference gradient of a real scalar function of a complex
/// matrix, treating real and imaginary parts as independent coordinates.
///
/// The returned entry `(i, j)` is `df/dRe + i df/dIm`; for the real-linear
/// map `X -> -2 Re tr(M^H X)` this evaluates to `-2 M`.
pub fn finite_diff_gradient(
    objective: impl Fn(&CMat) -> f64,
    point: &CMat,
    step: f64,
) -> CMat {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut gradient = CMat::zeros(point.nrows(), point.ncols());
    let mut probe = point.clone();
    for i in 0..point.nrows() {
        for j in 0..point.ncols() {
            let center = point[(i, j)];
            probe[(i, j)] = center + Cpx::new(step, 0.0);
            let fwd_re = objective(&probe);
            probe[(i, j)] = center - Cpx::new(step, 0.0);
            let bwd_re = objective(&probe);
            probe[(i, j)] = center + Cpx::new(0.0, step);
            let fwd_im = objective(&probe);
            probe[(i, j)] = center - Cpx::new(0.0, step);
            let bwd_im = objective(&probe);
            probe[(i, j)] = center;
            gradient[(i, j)] = Cpx::new(
                (fwd_re - bwd_re) / (2.0 * step),
                (fwd_im - bwd_im) / (2.0 * step),
            );
        }
    }
    gradient
}

/// Default finite-difference step for a given expansion point.
pub fn default_step(point: &CMat) -> f64 {
    1e-5 * (1.0 + point.norm())
}

/// The precoder subproblem objective evaluated with full matrices only:
/// per-user quadratic and linear terms, the coupling penalty and the power
/// multiplier terms. This is the function whose blockwise minimizers the
/// solvers return.
#[allow(clippy::too_many_arguments)]
pub fn subproblem_lagrangian(
    stack: &PrecoderStack,
    combiners: &CombinerSet,
    weights: &MseWeights,
    channels: &UserChannels,
    user_weights: &[f64],
    coupling: Option<(&PrecoderStack, f64)>,
    multipliers: &[f64],
    budget_mw: f64,
) -> f64 {
    let mut value = 0.0;
    for user in 0..stack.num_users() {
        let projected = channels.user(user).adjoint() * combiners.user(user);
        let gram = &projected * weights.user(user) * projected.adjoint();
        let f = stack.user(user);
        value += user_weights[user] * (f.adjoint() * gram * f).trace().re;
        value -= 2.0 * user_weights[user] * (f.adjoint() * projected * weights.user(user)).trace().re;
    }
    if let Some((hybrid_stack, penalty)) = coupling {
        value += metrics::coupling_penalty(stack, hybrid_stack, penalty);
    }
    for (ap, &multiplier) in multipliers.iter().enumerate() {
        let mut power = 0.0;
        for user in 0..stack.num_users() {
            power += stack.block(ap, user).norm_squared();
        }
        value += multiplier * (power - budget_mw);
    }
    value
}

/// Cross-checks the per-AP block decomposition of the subproblem objective
/// against a full-matrix evaluation.
///
/// The full-matrix side starts from the MSE matrices, removes the terms that
/// do not participate in the block route (weight traces, combined noise and
/// the combined cross-user interference quadratics) and adds the penalty and
/// multiplier terms. The block side is assembled purely from the per-AP
/// pieces the solver uses. Returns the relative gap.
#[allow(clippy::too_many_arguments)]
pub fn check_block_decomposition(
    combiners: &CombinerSet,
    weights: &MseWeights,
    stack: &PrecoderStack,
    hybrid_stack: &PrecoderStack,
    channels: &UserChannels,
    noise_power: f64,
    penalty: f64,
    user_weights: &[f64],
    multipliers: &[f64],
    budget_mw: f64,
    tamper: Tamper,
) -> Result<f64> {
    // full-matrix route through the MSE matrices
    let mut full = 0.0;
    for user in 0..stack.num_users() {
        let w = weights.user(user);
        let g = combiners.user(user);
        let h = channels.user(user);
        let mse = metrics::mse_matrix(user, g, stack, channels, noise_power)?;
        full += user_weights[user] * (w * mse).trace().re;
        full -= user_weights[user] * w.trace().re;
        full -= noise_power * user_weights[user] * (w * g.adjoint() * g).trace().re;
        for other in 0..stack.num_users() {
            if other == user {
                continue;
            }
            let leaked = g.adjoint() * h * stack.user(other);
            full -= user_weights[user] * (leaked.adjoint() * w * &leaked).trace().re;
        }
    }
    full += metrics::coupling_penalty(stack, hybrid_stack, penalty);
    for (ap, &multiplier) in multipliers.iter().enumerate() {
        let mut power = 0.0;
        for user in 0..stack.num_users() {
            power += stack.block(ap, user).norm_squared();
        }
        full += multiplier * (power - budget_mw);
    }

    // block route from the solver's subproblem pieces
    let data = hybrid::build_subproblem(combiners, weights, stack, channels, user_weights)?;
    let coupling_sign = match tamper {
        Tamper::None => 1.0,
        Tamper::FlipCouplingSign => -1.0,
    };
    let mut blockwise = 0.0;
    for ap in 0..stack.num_aps() {
        for user in 0..stack.num_users() {
            let block = stack.block(ap, user);
            blockwise += (block.adjoint() * data.block_gram(ap, user) * &block).trace().re;
            blockwise += coupling_sign
                * user_weights[user]
                * (block.adjoint() * data.cross_coupling(ap, user)).trace().re;
            blockwise -= 2.0 * (block.adjoint() * data.linear_block(ap, user)).trace().re;
            let hybrid_block = hybrid_stack.block(ap, user);
            blockwise += (block.norm_squared()
                - 2.0 * (block.adjoint() * &hybrid_block).trace().re
                + hybrid_block.norm_squared())
                / (2.0 * penalty);
        }
        let mut power = 0.0;
        for user in 0..stack.num_users() {
            power += stack.block(ap, user).norm_squared();
        }
        blockwise += multipliers[ap] * (power - budget_mw);
    }

    Ok(relative_gap(full, blockwise))
}

/// Verifies that the sum rate equals the weighted-MMSE objective at the
/// closed-form combiners and weights (including the constant stream-count
/// offset). Returns the relative gap.
pub fn check_wsr_wmmse_equivalence(
    stack: &PrecoderStack,
    channels: &UserChannels,
    noise_power: f64,
    user_weights: &[f64],
) -> Result<f64> {
    let combiners = hybrid::update_combiners(stack, channels, noise_power)?;
    let weights = hybrid::update_weights(&combiners, stack, channels, noise_power)?;
    let mut objective = metrics::wmmse_core(
        &combiners,
        &weights,
        stack,
        channels,
        noise_power,
        user_weights,
    )?;
    for (user, &weight) in user_weights.iter().enumerate() {
        objective += weight * stack.user(user).ncols() as f64;
    }
    let rate = metrics::wsr(stack, channels, noise_power, user_weights)?;
    Ok(relative_gap(objective, rate))
}

/// Verifies the spectral power profile of the fully digital subproblem
/// against the direct Frobenius-norm power of the solved blocks, over the
/// given multipliers. Returns the worst relative gap.
pub fn check_fd_power_identity(data: &SubproblemData, multipliers: &[f64]) -> Result<f64> {
    let num_tx = data.block_gram(0, 0).nrows();
    let mut worst: f64 = 0.0;
    for ap in 0..data.num_aps() {
        for &multiplier in multipliers {
            let spectral = digital::fd_power_profile(ap, data, multiplier)?;
            let mut direct = 0.0;
            for user in 0..data.num_users() {
                let shifted =
                    data.block_gram(ap, user) + CMat::identity(num_tx, num_tx).scale(multiplier);
                let block = solve_hermitian_pd(&shifted, data.rhs(ap, user))?;
                direct += block.norm_squared();
            }
            worst = worst.max((spectral - direct).abs() / (1.0 + direct));
        }
    }
    Ok(worst)
}

/// Replays one auxiliary-precoder sweep and measures, for every block, the
/// finite-difference gradient of the subproblem objective at the closed-form
/// solution with its solved multiplier. Returns the worst relative gradient
/// norm (normalized by the gradient magnitude at the zero block).
pub fn check_hybrid_stationarity(
    cfg: &SystemConfig,
    combiners: &CombinerSet,
    weights: &MseWeights,
    stack: &PrecoderStack,
    hybrid: &HybridPrecoder,
    channels: &UserChannels,
) -> Result<f64> {
    let user_weights = cfg.user_weights_vec();
    let mut data = hybrid::build_subproblem(combiners, weights, stack, channels, &user_weights)?;
    let hybrid_stack = hybrid.effective_stack();
    let penalty = cfg.penalty_param();
    let shift = 1.0 / (2.0 * penalty);
    let budget = cfg.max_power();
    let mut multipliers = vec![0.0; cfg.num_aps];
    let mut working = stack.clone();
    let mut worst: f64 = 0.0;

    for ap in 0..cfg.num_aps {
        data.refresh_coupling(ap, &working);
        let (solve, _) = hybrid::solve_lambda(
            ap,
            &data,
            &hybrid_stack,
            penalty,
            budget,
            cfg.bisection_tol,
        )?;
        multipliers[ap] = solve.multiplier;
        for user in 0..cfg.num_users {
            let rhs = data.rhs(ap, user) + hybrid_stack.block(ap, user).scale(shift);
            let block = hybrid::block_solution(
                data.block_gram_eig(ap, user),
                &rhs,
                shift + solve.multiplier,
            );
            working.set_block(ap, user, &block);
        }
        for user in 0..cfg.num_users {
            let gap = block_gradient_ratio(
                &working,
                combiners,
                weights,
                channels,
                &user_weights,
                Some((&hybrid_stack, penalty)),
                &multipliers,
                budget.milliwatts(),
                ap,
                user,
            );
            worst = worst.max(gap);
        }
    }
    Ok(worst)
}

/// Fully digital counterpart of [`check_hybrid_stationarity`].
pub fn check_fd_stationarity(
    cfg: &SystemConfig,
    combiners: &CombinerSet,
    weights: &MseWeights,
    stack: &PrecoderStack,
    channels: &UserChannels,
) -> Result<f64> {
    let user_weights = cfg.user_weights_vec();
    let mut data = hybrid::build_subproblem(combiners, weights, stack, channels, &user_weights)?;
    let budget = cfg.max_power();
    let mut multipliers = vec![0.0; cfg.num_aps];
    let mut working = stack.clone();
    let mut worst: f64 = 0.0;

    for ap in 0..cfg.num_aps {
        data.refresh_coupling(ap, &working);
        let solve = digital::solve_mu(ap, &data, budget, cfg.bisection_tol)?;
        // interior solutions sit at the search floor rather than at a true
        // stationary point, so only active budgets are gradient-checked
        multipliers[ap] = solve.multiplier;
        for user in 0..cfg.num_users {
            let block = digital::update_fd_block(ap, user, &data, solve.multiplier);
            working.set_block(ap, user, &block);
        }
        if solve.case == MultiplierCase::Interior {
            continue;
        }
        for user in 0..cfg.num_users {
            let gap = block_gradient_ratio(
                &working,
                combiners,
                weights,
                channels,
                &user_weights,
                None,
                &multipliers,
                budget.milliwatts(),
                ap,
                user,
            );
            worst = worst.max(gap);
        }
    }
    Ok(worst)
}

#[allow(clippy::too_many_arguments)]
fn block_gradient_ratio(
    working: &PrecoderStack,
    combiners: &CombinerSet,
    weights: &MseWeights,
    channels: &UserChannels,
    user_weights: &[f64],
    coupling: Option<(&PrecoderStack, f64)>,
    multipliers: &[f64],
    budget_mw: f64,
    ap: usize,
    user: usize,
) -> f64 {
    let point = working.block(ap, user);
    let objective = |block: &CMat| {
        let mut candidate = working.clone();
        candidate.set_block(ap, user, block);
        subproblem_lagrangian(
            &candidate,
            combiners,
            weights,
            channels,
            user_weights,
            coupling,
            multipliers,
            budget_mw,
        )
    };
    let at_solution = finite_diff_gradient(&objective, &point, default_step(&point));
    let zero = CMat::zeros(point.nrows(), point.ncols());
    let at_zero = finite_diff_gradient(&objective, &zero, default_step(&zero));
    at_solution.norm() / (1.0 + at_zero.norm())
}
