//! Block-coordinate-descent design of the hybrid analog/digital precoders.
//!
//! One outer iteration updates, in order: the linear combiners, the MSE
//! weights, the auxiliary per-user precoders, the per-AP digital precoders
//! and the per-AP analog phase matrices. The auxiliary update solves one
//! convex subproblem per AP in closed form; its power multiplier is zero
//! when the unconstrained solution already meets the AP budget and is found
//! by bisection otherwise. The digital stage is a least-squares fit through
//! the analog stage; the analog stage is a per-entry phase alignment under
//! the constant-modulus constraint. After convergence the digital precoders
//! are rescaled once so every AP meets its power budget.

use rand::Rng;

use crate::channel::{stream_rng, ChannelRealization, UserChannels, STREAM_DOMAIN_ANALOG_INIT};
use crate::config::{LinearPower, SystemConfig};
use crate::error::{Error, Result};
use crate::metrics::{
    self, solve_hermitian_pd, CombinerSet, MseWeights, PrecoderStack,
};
use crate::numerics::{self, hermitianize, EigenPair};
use crate::trace::{IterationRecord, IterationTrace, MultiplierCase, MultiplierReport};
use crate::{CMat, Cpx};

/// Smallest eigenvalue-to-peak ratio still counted toward a numerical rank.
pub const RANK_CUTOFF: f64 = 1e-8;

/// Per-AP analog phase matrices and per-(AP, user) digital precoders.
///
/// Analog entries always have unit modulus. The effective precoder of user
/// `u` at AP `b` is `analog[b] * digital[b][u]`.
#[derive(Clone, Debug)]
pub struct HybridPrecoder {
    analog: Vec<CMat>,
    digital: Vec<Vec<CMat>>,
}

impl HybridPrecoder {
    pub fn new(analog: Vec<CMat>, digital: Vec<Vec<CMat>>) -> Self {
        Self { analog, digital }
    }

    pub fn analog(&self, ap: usize) -> &CMat {
        &self.analog[ap]
    }

    pub fn digital(&self, ap: usize, user: usize) -> &CMat {
        &self.digital[ap][user]
    }

    pub fn num_aps(&self) -> usize {
        self.analog.len()
    }

    pub fn num_users(&self) -> usize {
        self.digital.first().map(|d| d.len()).unwrap_or(0)
    }

    /// Stacks the effective products `analog * digital` into per-user
    /// precoders.
    pub fn effective_stack(&self) -> PrecoderStack {
        let num_aps = self.num_aps();
        let num_users = self.num_users();
        let num_tx = self.analog[0].nrows();
        let num_streams = self.digital[0][0].ncols();
        let mut stack = PrecoderStack::zeros(num_aps, num_tx, num_users, num_streams);
        for ap in 0..num_aps {
            for user in 0..num_users {
                stack.set_block(ap, user, &(&self.analog[ap] * &self.digital[ap][user]));
            }
        }
        stack
    }

    /// Transmit power of AP `ap` (through the analog stage), in mW.
    pub fn ap_power(&self, ap: usize) -> f64 {
        (0..self.num_users())
            .map(|u| (&self.analog[ap] * &self.digital[ap][u]).norm_squared())
            .sum()
    }

    /// Largest deviation of any analog entry from unit modulus.
    pub fn max_unit_modulus_error(&self) -> f64 {
        self.analog
            .iter()
            .flat_map(|m| m.iter())
            .map(|z| (z.norm() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Completed hybrid design.
pub struct HybridRun {
    pub precoder: HybridPrecoder,
    pub auxiliary: PrecoderStack,
    pub trace: IterationTrace,
}

/// Closed-form combiner update: `G_u = T_u^{-1} H_u F_u` with `T_u` the full
/// received covariance plus noise.
pub fn update_combiners(
    stack: &PrecoderStack,
    channels: &UserChannels,
    noise_power: f64,
) -> Result<CombinerSet> {
    let mut combiners = Vec::with_capacity(stack.num_users());
    for user in 0..stack.num_users() {
        let h = channels.user(user);
        let n_rx = h.nrows();
        let mut covariance = CMat::identity(n_rx, n_rx).scale(noise_power);
        for other in 0..stack.num_users() {
            let received = h * stack.user(other);
            covariance += &received * received.adjoint();
        }
        let desired = h * stack.user(user);
        combiners.push(solve_hermitian_pd(&covariance, &desired)?);
    }
    Ok(CombinerSet(combiners))
}

/// Closed-form weight update: `W_u` is the inverse MSE matrix.
pub fn update_weights(
    combiners: &CombinerSet,
    stack: &PrecoderStack,
    channels: &UserChannels,
    noise_power: f64,
) -> Result<MseWeights> {
    let mut weights = Vec::with_capacity(stack.num_users());
    for user in 0..stack.num_users() {
        let mse = metrics::mse_matrix(user, combiners.user(user), stack, channels, noise_power)?;
        let inverse = nalgebra::Cholesky::new(mse)
            .ok_or_else(|| {
                Error::SingularMatrix(format!("MSE matrix of user {user} is not positive definite"))
            })?
            .inverse();
        weights.push(hermitianize(&inverse));
    }
    Ok(MseWeights(weights))
}

/// Precomputed per-(AP, user) pieces of the precoder subproblem.
///
/// For every user the weighted combiner-channel Gram matrix and its PSD
/// square root are formed once; per AP the row slice of that square root
/// yields the block Gram matrix (eigendecomposed here) and the linear term.
/// The cross-AP coupling and the derived right-hand side correspond to the
/// precoder stack passed at build time and can be refreshed per AP.
pub struct SubproblemData {
    num_aps: usize,
    num_users: usize,
    num_tx: usize,
    num_streams: usize,
    user_weights: Vec<f64>,
    gram: Vec<CMat>,
    gram_sqrt_blocks: Vec<Vec<CMat>>,
    block_gram: Vec<Vec<CMat>>,
    block_gram_eig: Vec<Vec<EigenPair>>,
    linear_blocks: Vec<Vec<CMat>>,
    cross_coupling: Vec<Vec<CMat>>,
    rhs: Vec<Vec<CMat>>,
}

impl SubproblemData {
    pub fn num_aps(&self) -> usize {
        self.num_aps
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_streams(&self) -> usize {
        self.num_streams
    }

    /// Full Gram matrix of user `user`.
    pub fn gram(&self, user: usize) -> &CMat {
        &self.gram[user]
    }

    /// Row slice of the Gram square root owned by AP `ap`.
    pub fn gram_sqrt_block(&self, ap: usize, user: usize) -> &CMat {
        &self.gram_sqrt_blocks[ap][user]
    }

    /// Block Gram matrix of `(ap, user)`.
    pub fn block_gram(&self, ap: usize, user: usize) -> &CMat {
        &self.block_gram[ap][user]
    }

    pub fn block_gram_eig(&self, ap: usize, user: usize) -> &EigenPair {
        &self.block_gram_eig[ap][user]
    }

    /// Linear-term block of `(ap, user)`.
    pub fn linear_block(&self, ap: usize, user: usize) -> &CMat {
        &self.linear_blocks[ap][user]
    }

    /// Cross-AP coupling of `(ap, user)` for the stack it was computed from.
    pub fn cross_coupling(&self, ap: usize, user: usize) -> &CMat {
        &self.cross_coupling[ap][user]
    }

    /// Right-hand side `linear - weight * coupling` of `(ap, user)`.
    pub fn rhs(&self, ap: usize, user: usize) -> &CMat {
        &self.rhs[ap][user]
    }

    pub fn user_weight(&self, user: usize) -> f64 {
        self.user_weights[user]
    }

    /// Recomputes the cross-AP coupling and right-hand sides of AP `ap`
    /// against the given (possibly partially updated) stack.
    pub fn refresh_coupling(&mut self, ap: usize, stack: &PrecoderStack) {
        for user in 0..self.num_users {
            let mut total = CMat::zeros(self.num_aps * self.num_tx, self.num_streams);
            for other in 0..self.num_aps {
                total += self.gram_sqrt_blocks[other][user].adjoint() * stack.block(other, user);
            }
            total -= self.gram_sqrt_blocks[ap][user].adjoint() * stack.block(ap, user);
            let coupling = &self.gram_sqrt_blocks[ap][user] * total;
            self.rhs[ap][user] =
                &self.linear_blocks[ap][user] - coupling.scale(self.user_weights[user]);
            self.cross_coupling[ap][user] = coupling;
        }
    }

    /// Spectral power terms of AP `ap` for given per-user right-hand sides:
    /// eigenvalues of the block Gram plus the squared row norms of
    /// `U^H rhs_u`, which feed the scalar power profile.
    pub fn spectral_power_terms(&self, ap: usize, rhs_per_user: &[CMat]) -> ApPowerTerms {
        let terms = (0..self.num_users)
            .map(|user| {
                let eig = &self.block_gram_eig[ap][user];
                let rotated = eig.vectors.adjoint() * &rhs_per_user[user];
                let numerators = (0..rotated.nrows())
                    .map(|n| rotated.row(n).norm_squared())
                    .collect();
                (eig.values.clone(), numerators)
            })
            .collect();
        ApPowerTerms { terms }
    }
}

/// Eigenvalues and power numerators defining one AP's scalar power profile.
pub struct ApPowerTerms {
    /// Per user: (block Gram eigenvalues, diagonal power numerators).
    terms: Vec<(Vec<f64>, Vec<f64>)>,
}

impl ApPowerTerms {
    /// Transmit power of the closed-form block solution when every
    /// eigenvalue is shifted by `shift + multiplier`.
    pub fn power_at(&self, shift: f64, multiplier: f64) -> f64 {
        self.terms
            .iter()
            .flat_map(|(values, numerators)| {
                values.iter().zip(numerators).map(move |(&v, &p)| {
                    let denom = v + shift + multiplier;
                    p / (denom * denom)
                })
            })
            .sum()
    }

    /// Total of the power numerators, which bounds the bisection bracket.
    pub fn numerator_sum(&self) -> f64 {
        self.terms
            .iter()
            .flat_map(|(_, numerators)| numerators.iter())
            .sum()
    }
}

/// Builds the subproblem data from the current combiners, weights and stack.
pub fn build_subproblem(
    combiners: &CombinerSet,
    weights: &MseWeights,
    stack: &PrecoderStack,
    channels: &UserChannels,
    user_weights: &[f64],
) -> Result<SubproblemData> {
    let num_aps = stack.num_aps();
    let num_users = stack.num_users();
    let num_tx = stack.num_tx_antennas();
    let num_streams = stack.num_streams();

    let mut gram = Vec::with_capacity(num_users);
    let mut gram_sqrt_blocks = vec![Vec::with_capacity(num_users); num_aps];
    let mut linear_blocks = vec![Vec::with_capacity(num_users); num_aps];
    let mut block_gram = vec![Vec::with_capacity(num_users); num_aps];
    let mut block_gram_eig = vec![Vec::with_capacity(num_users); num_aps];

    for user in 0..num_users {
        let h = channels.user(user);
        let w = weights.user(user);
        let projected = h.adjoint() * combiners.user(user);
        let user_gram = hermitianize(&(&projected * w * projected.adjoint()));
        let sqrt = numerics::psd_sqrt(&user_gram)?;
        let linear_full = (&projected * w).scale(user_weights[user]);
        for ap in 0..num_aps {
            let sqrt_block = sqrt
                .view((ap * num_tx, 0), (num_tx, num_aps * num_tx))
                .clone_owned();
            let q = hermitianize(&(&sqrt_block * sqrt_block.adjoint()).scale(user_weights[user]));
            block_gram_eig[ap].push(numerics::hermitian_eig(&q)?);
            block_gram[ap].push(q);
            gram_sqrt_blocks[ap].push(sqrt_block);
            linear_blocks[ap].push(
                linear_full
                    .view((ap * num_tx, 0), (num_tx, num_streams))
                    .clone_owned(),
            );
        }
        gram.push(user_gram);
    }

    let mut data = SubproblemData {
        num_aps,
        num_users,
        num_tx,
        num_streams,
        user_weights: user_weights.to_vec(),
        gram,
        gram_sqrt_blocks,
        block_gram,
        block_gram_eig,
        linear_blocks,
        cross_coupling: vec![vec![CMat::zeros(num_tx, num_streams); num_users]; num_aps],
        rhs: vec![vec![CMat::zeros(num_tx, num_streams); num_users]; num_aps],
    };
    for ap in 0..num_aps {
        data.refresh_coupling(ap, stack);
    }
    Ok(data)
}

/// Transmit power of AP `ap`'s closed-form block solution at multiplier
/// `multiplier`, using the right-hand sides stored in `data`.
pub fn ap_power_profile(
    ap: usize,
    data: &SubproblemData,
    hybrid_stack: &PrecoderStack,
    penalty: f64,
    multiplier: f64,
) -> f64 {
    let shift = 1.0 / (2.0 * penalty);
    let rhs = shifted_rhs(ap, data, hybrid_stack, shift);
    data.spectral_power_terms(ap, &rhs).power_at(shift, multiplier)
}

fn shifted_rhs(
    ap: usize,
    data: &SubproblemData,
    hybrid_stack: &PrecoderStack,
    shift: f64,
) -> Vec<CMat> {
    (0..data.num_users())
        .map(|user| data.rhs(ap, user) + hybrid_stack.block(ap, user).scale(shift))
        .collect()
}

/// Closed-form block solution `(Q + (shift + multiplier) I)^{-1} rhs`
/// evaluated through the stored eigendecomposition.
pub(crate) fn block_solution(eig: &EigenPair, rhs: &CMat, total_shift: f64) -> CMat {
    let rotated = eig.vectors.adjoint() * rhs;
    let mut scaled = rotated;
    for n in 0..scaled.nrows() {
        let denom = eig.values[n] + total_shift;
        let factor = Cpx::new(1.0 / denom, 0.0);
        for k in 0..scaled.ncols() {
            scaled[(n, k)] *= factor;
        }
    }
    &eig.vectors * scaled
}

/// Outcome of one per-AP multiplier determination.
pub struct MultiplierSolve {
    pub multiplier: f64,
    pub case: MultiplierCase,
    pub bracket_width: f64,
    pub slope_tolerance_mw: f64,
}

/// Finds the power multiplier of AP `ap` for the hybrid subproblem.
///
/// If the unconstrained (`multiplier = 0`) power already meets the budget
/// the multiplier is zero; otherwise the monotone power profile is bisected
/// over `(0, sqrt(numerator_sum / budget))` down to bracket width `tol`,
/// returning the feasible end of the final bracket.
pub fn solve_lambda(
    ap: usize,
    data: &SubproblemData,
    hybrid_stack: &PrecoderStack,
    penalty: f64,
    max_power: LinearPower,
    tol: f64,
) -> Result<(MultiplierSolve, ApPowerTerms)> {
    let shift = 1.0 / (2.0 * penalty);
    let rhs = shifted_rhs(ap, data, hybrid_stack, shift);
    let terms = data.spectral_power_terms(ap, &rhs);
    let budget = max_power.milliwatts();
    let unconstrained = terms.power_at(shift, 0.0);
    if unconstrained <= budget {
        return Ok((
            MultiplierSolve {
                multiplier: 0.0,
                case: MultiplierCase::Interior,
                bracket_width: 0.0,
                slope_tolerance_mw: 0.0,
            },
            terms,
        ));
    }
    let upper = (terms.numerator_sum() / budget).sqrt();
    let result =
        numerics::bisect_decreasing(|m| terms.power_at(shift, m), budget, 0.0, upper, tol)?;
    Ok((
        MultiplierSolve {
            multiplier: result.root,
            case: MultiplierCase::Bisection,
            bracket_width: result.bracket_width,
            slope_tolerance_mw: result.value_at_lower - result.value_at_upper,
        },
        terms,
    ))
}

/// One Gauss-Seidel pass of the auxiliary precoder update over all APs in
/// ascending order, each AP seeing the freshest other-AP blocks.
pub fn update_auxiliary(
    cfg: &SystemConfig,
    combiners: &CombinerSet,
    weights: &MseWeights,
    stack: &PrecoderStack,
    hybrid: &HybridPrecoder,
    channels: &UserChannels,
) -> Result<(PrecoderStack, Vec<MultiplierReport>)> {
    let user_weights = cfg.user_weights_vec();
    let mut data = build_subproblem(combiners, weights, stack, channels, &user_weights)?;
    let hybrid_stack = hybrid.effective_stack();
    let penalty = cfg.penalty_param();
    let shift = 1.0 / (2.0 * penalty);
    let budget = cfg.max_power();

    let mut updated = stack.clone();
    let mut reports = Vec::with_capacity(cfg.num_aps);
    for ap in 0..cfg.num_aps {
        data.refresh_coupling(ap, &updated);
        let (solve, _terms) =
            solve_lambda(ap, &data, &hybrid_stack, penalty, budget, cfg.bisection_tol)?;
        let mut achieved = 0.0;
        for user in 0..cfg.num_users {
            let rhs = data.rhs(ap, user) + hybrid_stack.block(ap, user).scale(shift);
            let block = block_solution(
                data.block_gram_eig(ap, user),
                &rhs,
                shift + solve.multiplier,
            );
            achieved += block.norm_squared();
            updated.set_block(ap, user, &block);
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
    Ok((updated, reports))
}

/// Least-squares digital update `F_bb = pinv(analog) * block` for every
/// (AP, user) pair.
pub fn update_digital(analog: &[CMat], stack: &PrecoderStack) -> Vec<Vec<CMat>> {
    analog
        .iter()
        .enumerate()
        .map(|(ap, mat)| {
            let inverse = numerics::pinv(mat);
            (0..stack.num_users())
                .map(|user| &inverse * stack.block(ap, user))
                .collect()
        })
        .collect()
}

/// Updates one analog entry to the phase minimizing the residual row, given
/// the current residual `targets - analog * coeffs`. Returns the new entry
/// (the previous one when the optimal phase is undefined).
pub(crate) fn analog_entry_phase(residual_row: &[Cpx], coeff_row: &[Cpx], current: Cpx) -> Cpx {
    let mut inner = Cpx::new(0.0, 0.0);
    for (residual, coeff) in residual_row.iter().zip(coeff_row) {
        let detached = residual + current * coeff;
        inner += coeff.conj() * detached;
    }
    if inner.norm() == 0.0 {
        current
    } else {
        Cpx::from_polar(1.0, inner.arg())
    }
}

/// One full per-entry sweep of the analog phase update for every AP.
///
/// Entries are visited row by row, each seeing the residual left by all
/// previously updated entries. Every returned entry has unit modulus.
pub fn update_analog(
    analog: &[CMat],
    digital: &[Vec<CMat>],
    stack: &PrecoderStack,
) -> Vec<CMat> {
    analog
        .iter()
        .enumerate()
        .map(|(ap, current)| {
            let targets = concat_user_blocks(stack, ap);
            let coeffs = concat_digital(&digital[ap]);
            let mut updated = current.clone();
            let mut residual = &targets - &updated * &coeffs;
            for i in 0..updated.nrows() {
                for j in 0..updated.ncols() {
                    let coeff_row: Vec<Cpx> = coeffs.row(j).iter().copied().collect();
                    let residual_row: Vec<Cpx> = residual.row(i).iter().copied().collect();
                    let old = updated[(i, j)];
                    let new = analog_entry_phase(&residual_row, &coeff_row, old);
                    if new != old {
                        let delta = old - new;
                        for k in 0..residual.ncols() {
                            residual[(i, k)] += delta * coeff_row[k];
                        }
                        updated[(i, j)] = new;
                    }
                }
            }
            updated
        })
        .collect()
}

fn concat_user_blocks(stack: &PrecoderStack, ap: usize) -> CMat {
    let num_users = stack.num_users();
    let num_streams = stack.num_streams();
    let num_tx = stack.num_tx_antennas();
    let mut out = CMat::zeros(num_tx, num_users * num_streams);
    for user in 0..num_users {
        out.view_mut((0, user * num_streams), (num_tx, num_streams))
            .copy_from(&stack.block(ap, user));
    }
    out
}

fn concat_digital(digital: &[CMat]) -> CMat {
    let num_users = digital.len();
    let rows = digital[0].nrows();
    let cols = digital[0].ncols();
    let mut out = CMat::zeros(rows, num_users * cols);
    for (user, block) in digital.iter().enumerate() {
        out.view_mut((0, user * cols), (rows, cols)).copy_from(block);
    }
    out
}

/// Rescales the digital precoders of any AP exceeding its budget so the
/// budget is met with equality; feasible APs and all analog matrices are
/// untouched.
pub fn finalize(hybrid: &HybridPrecoder, max_power: LinearPower) -> HybridPrecoder {
    let mut result = hybrid.clone();
    for ap in 0..result.num_aps() {
        let power = result.ap_power(ap);
        if power > max_power.milliwatts() {
            let factor = Cpx::new((max_power.milliwatts() / power).sqrt(), 0.0);
            for user in 0..result.num_users() {
                result.digital[ap][user] *= factor;
            }
        }
    }
    result
}

/// Initial auxiliary precoders from per-link SVDs, scaled so every AP meets
/// its budget with equality.
pub fn init_auxiliary(cfg: &SystemConfig, realization: &ChannelRealization) -> Result<PrecoderStack> {
    let num_tx = cfg.num_tx_antennas();
    let num_streams = cfg.num_streams;
    let mut stack = PrecoderStack::zeros(cfg.num_aps, num_tx, cfg.num_users, num_streams);
    for ap in 0..cfg.num_aps {
        let mut directions = Vec::with_capacity(cfg.num_users);
        let mut total = 0.0;
        for user in 0..cfg.num_users {
            let svd = realization.block(ap, user)?.clone().svd(false, true);
            let v_t = svd.v_t.as_ref().expect("svd requested v_t");
            if v_t.nrows() < num_streams {
                return Err(Error::DimensionMismatch(format!(
                    "channel of ({ap}, {user}) supports {} streams, need {num_streams}",
                    v_t.nrows()
                )));
            }
            let leading = v_t.rows(0, num_streams).adjoint();
            total += leading.norm_squared();
            directions.push(leading);
        }
        let scale = Cpx::new((cfg.max_power().milliwatts() / total).sqrt(), 0.0);
        for (user, direction) in directions.into_iter().enumerate() {
            stack.set_block(ap, user, &(direction * scale));
        }
    }
    Ok(stack)
}

/// Random unit-modulus analog matrices with phases uniform over [-pi, pi],
/// drawn from the per-(trial, AP) initialization stream.
pub fn init_analog(cfg: &SystemConfig, trial: u64) -> Vec<CMat> {
    (0..cfg.num_aps)
        .map(|ap| {
            let mut rng = stream_rng(
                cfg.seed,
                STREAM_DOMAIN_ANALOG_INIT,
                trial,
                ap as u64,
                0,
            );
            CMat::from_fn(cfg.num_tx_antennas(), cfg.num_rf_chains, |_, _| {
                let phase = std::f64::consts::PI * (1.0 - 2.0 * rng.random::<f64>());
                Cpx::from_polar(1.0, phase)
            })
        })
        .collect()
}

/// Initial digital precoders: least-squares fits of the auxiliary blocks
/// through the analog stage, normalized per AP to meet the budget with
/// equality.
pub fn init_digital(
    cfg: &SystemConfig,
    analog: &[CMat],
    auxiliary: &PrecoderStack,
) -> Vec<Vec<CMat>> {
    let mut digital = update_digital(analog, auxiliary);
    for ap in 0..cfg.num_aps {
        let power: f64 = (0..cfg.num_users)
            .map(|u| (&analog[ap] * &digital[ap][u]).norm_squared())
            .sum();
        if power > 0.0 {
            let factor = Cpx::new((cfg.max_power().milliwatts() / power).sqrt(), 0.0);
            for block in &mut digital[ap] {
                *block *= factor;
            }
        }
    }
    digital
}

/// Runs the full hybrid design on one channel realization.
///
/// Iterates until the objective changes by less than `convergence_tol` or
/// `max_iters` is reached, then applies the final power rescaling. The trace
/// records the objective, the weighted sum rate of the effective hybrid
/// precoder, per-AP powers and per-AP multipliers for every iteration.
pub fn run(cfg: &SystemConfig, realization: &ChannelRealization) -> Result<HybridRun> {
    let channels = realization.user_channels();
    let user_weights = cfg.user_weights_vec();
    let noise = cfg.noise_power;
    let penalty = cfg.penalty_param();

    let mut auxiliary = init_auxiliary(cfg, realization)?;
    let analog = init_analog(cfg, realization.trial());
    let digital = init_digital(cfg, &analog, &auxiliary);
    let mut hybrid = HybridPrecoder::new(analog, digital);

    let mut trace = IterationTrace::new(cfg.max_iters);
    let mut combiners = update_combiners(&auxiliary, &channels, noise)?;
    let mut weights = update_weights(&combiners, &auxiliary, &channels, noise)?;
    let mut objective = metrics::wmmse_objective(
        &combiners,
        &weights,
        &auxiliary,
        &hybrid.effective_stack(),
        &channels,
        noise,
        penalty,
        &user_weights,
    )?;
    trace.push(record_state(0, objective, &hybrid, &channels, noise, &user_weights, vec![])?);

    for iteration in 1..=cfg.max_iters {
        combiners = update_combiners(&auxiliary, &channels, noise)?;
        weights = update_weights(&combiners, &auxiliary, &channels, noise)?;
        let (next_stack, reports) =
            update_auxiliary(cfg, &combiners, &weights, &auxiliary, &hybrid, &channels)?;
        auxiliary = next_stack;
        hybrid.digital = update_digital(&hybrid.analog, &auxiliary);
        hybrid.analog = update_analog(&hybrid.analog, &hybrid.digital, &auxiliary);

        let next_objective = metrics::wmmse_objective(
            &combiners,
            &weights,
            &auxiliary,
            &hybrid.effective_stack(),
            &channels,
            noise,
            penalty,
            &user_weights,
        )?;
        if !next_objective.is_finite() {
            return Err(Error::NonFinite(format!(
                "hybrid objective became {next_objective} at iteration {iteration}"
            )));
        }
        trace.push(record_state(
            iteration,
            next_objective,
            &hybrid,
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

    let precoder = finalize(&hybrid, cfg.max_power());
    Ok(HybridRun {
        precoder,
        auxiliary,
        trace,
    })
}

fn record_state(
    iteration: usize,
    objective: f64,
    hybrid: &HybridPrecoder,
    channels: &UserChannels,
    noise: f64,
    user_weights: &[f64],
    reports: Vec<MultiplierReport>,
) -> Result<IterationRecord> {
    let effective = hybrid.effective_stack();
    let wsr_nats = metrics::wsr(&effective, channels, noise, user_weights)?;
    let ap_power_mw = (0..hybrid.num_aps()).map(|b| hybrid.ap_power(b)).collect();
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::sample_channel;
    use crate::config::AntennaGrid;
    use crate::numerics::seeded_matrix;

    pub(crate) fn desk_cfg() -> SystemConfig {
        SystemConfig {
            tx_grid: AntennaGrid::new(2, 2),
            rx_grid: AntennaGrid::new(2, 1),
            num_rf_chains: 3,
            num_streams: 1,
            num_users: 2,
            num_aps: 2,
            num_paths: 4,
            ..SystemConfig::default()
        }
        .validate()
        .unwrap()
    }

    fn mid_cfg() -> SystemConfig {
        SystemConfig {
            tx_grid: AntennaGrid::new(4, 4),
            rx_grid: AntennaGrid::new(2, 2),
            num_rf_chains: 8,
            num_streams: 2,
            num_users: 4,
            num_aps: 2,
            ..SystemConfig::default()
        }
        .validate()
        .unwrap()
    }

    fn scalar_setup() -> (SystemConfig, UserChannels, PrecoderStack) {
        let cfg = SystemConfig {
            tx_grid: AntennaGrid::new(1, 1),
            rx_grid: AntennaGrid::new(1, 1),
            num_rf_chains: 1,
            num_streams: 1,
            num_users: 1,
            num_aps: 1,
            ..SystemConfig::default()
        }
        .validate()
        .unwrap();
        let channels = UserChannels::from_mats(
            vec![CMat::from_element(1, 1, Cpx::new(1.0, 0.0))],
            1,
        )
        .unwrap();
        let stack = PrecoderStack::from_users(
            vec![CMat::from_element(1, 1, Cpx::new(1.0, 0.0))],
            1,
        )
        .unwrap();
        (cfg, channels, stack)
    }

    #[test]
    fn scalar_combiner_and_weight_chain() {
        let (_, channels, stack) = scalar_setup();
        let combiners = update_combiners(&stack, &channels, 1.0).unwrap();
        assert!((combiners.user(0)[(0, 0)] - Cpx::new(0.5, 0.0)).norm() < 1e-14);
        let weights = update_weights(&combiners, &stack, &channels, 1.0).unwrap();
        assert!((weights.user(0)[(0, 0)] - Cpx::new(2.0, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn zero_precoders_give_zero_combiners_and_identity_weights() {
        let cfg = desk_cfg();
        let realization = sample_channel(&cfg, 0);
        let channels = realization.user_channels();
        let stack = PrecoderStack::zeros(2, 4, 2, 1);
        let combiners = update_combiners(&stack, &channels, 1.0).unwrap();
        for u in 0..2 {
            assert_eq!(combiners.user(u).norm(), 0.0);
        }
        let weights = update_weights(&combiners, &stack, &channels, 1.0).unwrap();
        for u in 0..2 {
            assert!((weights.user(u) - CMat::identity(1, 1)).norm() < 1e-14);
        }
    }

    #[test]
    fn combiner_minimizes_weighted_mse_trace() {
        let cfg = mid_cfg();
        let realization = sample_channel(&cfg, 1);
        let channels = realization.user_channels();
        let stack = init_auxiliary(&cfg, &realization).unwrap();
        let combiners = update_combiners(&stack, &channels, 1.0).unwrap();
        for user in 0..cfg.num_users {
            let best = metrics::mse_matrix(user, combiners.user(user), &stack, &channels, 1.0)
                .unwrap()
                .trace()
                .re;
            for k in 0..20 {
                let perturbation = seeded_matrix(
                    cfg.num_rx_antennas(),
                    cfg.num_streams,
                    1000 + 20 * user as u64 + k,
                )
                .scale(0.05);
                let candidate = combiners.user(user) + perturbation;
                let trace = metrics::mse_matrix(user, &candidate, &stack, &channels, 1.0)
                    .unwrap()
                    .trace()
                    .re;
                assert!(trace >= best - 1e-10, "user {user} perturbation {k}");
            }
        }
    }

    #[test]
    fn weights_are_hermitian_positive_definite() {
        let cfg = mid_cfg();
        let realization = sample_channel(&cfg, 2);
        let channels = realization.user_channels();
        let stack = init_auxiliary(&cfg, &realization).unwrap();
        let combiners = update_combiners(&stack, &channels, 1.0).unwrap();
        let weights = update_weights(&combiners, &stack, &channels, 1.0).unwrap();
        for u in 0..cfg.num_users {
            let w = weights.user(u);
            assert!((w - hermitianize(w)).norm() < 1e-10 * w.norm());
            let eig = numerics::hermitian_eig(w).unwrap();
            assert!(eig.values.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn auxiliary_init_meets_budget_with_equality() {
        let cfg = mid_cfg();
        let realization = sample_channel(&cfg, 3);
        let stack = init_auxiliary(&cfg, &realization).unwrap();
        let budget = cfg.max_power().milliwatts();
        for ap in 0..cfg.num_aps {
            let power = metrics::per_ap_power(ap, &stack).unwrap().milliwatts();
            assert!((power - budget).abs() < 1e-6 * budget, "AP {ap}: {power}");
        }
    }

    #[test]
    fn auxiliary_init_follows_dominant_singular_vector() {
        let cfg = SystemConfig {
            num_users: 1,
            num_aps: 1,
            ..desk_cfg()
        };
        // rank-one channel: one path
        let paths = [crate::channel::PathParams {
            gain: Cpx::new(1.0, 0.0),
            departure_azimuth: 0.3,
            departure_elevation: 0.8,
            arrival_azimuth: -0.4,
            arrival_elevation: 0.2,
        }];
        let block = crate::channel::block_from_paths(&paths, cfg.tx_grid, cfg.rx_grid, 0.5);
        let svd = block.clone().svd(false, true);
        let dominant = svd.v_t.as_ref().unwrap().rows(0, 1).adjoint();
        let realization =
            crate::channel::ChannelRealization::from_blocks(vec![vec![block]], vec![], 0, 0)
                .unwrap();

        let stack = init_auxiliary(&cfg, &realization).unwrap();
        let block0 = stack.block(0, 0);
        // proportional to the dominant right singular vector
        let cross = (dominant.adjoint() * &block0)[(0, 0)].norm();
        assert!((cross - block0.norm()).abs() < 1e-9 * block0.norm());
    }

    #[test]
    fn auxiliary_init_columns_are_orthogonal() {
        let cfg = mid_cfg();
        let realization = sample_channel(&cfg, 4);
        let stack = init_auxiliary(&cfg, &realization).unwrap();
        for ap in 0..cfg.num_aps {
            for user in 0..cfg.num_users {
                let block = stack.block(ap, user);
                let gram = block.adjoint() * &block;
                let off = &gram - CMat::from_diagonal(&gram.diagonal());
                assert!(off.norm() < 1e-9 * gram.norm());
            }
        }
    }

    #[test]
    fn analog_init_is_unit_modulus_and_deterministic() {
        let cfg = mid_cfg();
        let a = init_analog(&cfg, 7);
        let b = init_analog(&cfg, 7);
        let c = init_analog(&cfg, 8);
        for ap in 0..cfg.num_aps {
            assert_eq!(a[ap], b[ap]);
            for z in a[ap].iter() {
                assert!((z.norm() - 1.0).abs() < 1e-12);
            }
        }
        assert_ne!(a[0], c[0]);
    }

    #[test]
    fn analog_init_phases_are_uniform() {
        // Kolmogorov-Smirnov test at the 1% level on 1e5 phases
        let cfg = SystemConfig {
            tx_grid: AntennaGrid::new(50, 50),
            num_rf_chains: 40,
            num_users: 4,
            num_streams: 1,
            num_aps: 1,
            rx_grid: AntennaGrid::new(1, 1),
            ..SystemConfig::default()
        };
        let analog = init_analog(&cfg, 0);
        let mut phases: Vec<f64> = analog[0].iter().map(|z| z.arg()).collect();
        phases.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = phases.len();
        assert!(n >= 100_000);
        let mut statistic: f64 = 0.0;
        for (i, &phase) in phases.iter().enumerate() {
            let model = (phase + std::f64::consts::PI) / (2.0 * std::f64::consts::PI);
            let low = i as f64 / n as f64;
            let high = (i + 1) as f64 / n as f64;
            statistic = statistic.max((model - low).abs()).max((model - high).abs());
        }
        let critical = 1.63 / (n as f64).sqrt();
        assert!(statistic < critical, "KS statistic {statistic} >= {critical}");
    }

    #[test]
    fn digital_init_meets_budget_and_shapes() {
        let cfg = mid_cfg();
        let realization = sample_channel(&cfg, 5);
        let auxiliary = init_auxiliary(&cfg, &realization).unwrap();
        let analog = init_analog(&cfg, 5);
        let digital = init_digital(&cfg, &analog, &auxiliary);
        let hybrid = HybridPrecoder::new(analog, digital);
        let budget = cfg.max_power().milliwatts();
        for ap in 0..cfg.num_aps {
            assert!((hybrid.ap_power(ap) - budget).abs() < 1e-6 * budget);
            for user in 0..cfg.num_users {
                assert_eq!(
                    hybrid.digital(ap, user).shape(),
                    (cfg.num_rf_chains, cfg.num_streams)
                );
            }
        }
    }

    #[test]
    fn digital_init_reproduces_in_range_targets_up_to_scale() {
        let cfg = desk_cfg();
        let analog = init_analog(&cfg, 11);
        // build auxiliary blocks inside the analog range
        let mut auxiliary =
            PrecoderStack::zeros(cfg.num_aps, cfg.num_tx_antennas(), cfg.num_users, 1);
        for ap in 0..cfg.num_aps {
            for user in 0..cfg.num_users {
                let coeffs = seeded_matrix(cfg.num_rf_chains, 1, 40 + (ap * 2 + user) as u64);
                auxiliary.set_block(ap, user, &(&analog[ap] * coeffs));
            }
        }
        let digital = init_digital(&cfg, &analog, &auxiliary);
        // each product must be a common per-AP multiple of its target
        for ap in 0..cfg.num_aps {
            let product0 = &analog[ap] * &digital[ap][0];
            let target0 = auxiliary.block(ap, 0);
            let ratio = product0.norm() / target0.norm();
            for user in 0..cfg.num_users {
                let product = &analog[ap] * &digital[ap][user];
                let target = auxiliary.block(ap, user).scale(ratio);
                assert!(
                    (&product - &target).norm() < 1e-9 * target.norm(),
                    "ap {ap} user {user}"
                );
            }
        }
    }

    #[test]
    fn single_ap_subproblem_has_no_cross_coupling() {
        let cfg = SystemConfig {
            num_aps: 1,
            ..mid_cfg()
        }
        .validate()
        .unwrap();
        let realization = sample_channel(&cfg, 6);
        let channels = realization.user_channels();
        let stack = init_auxiliary(&cfg, &realization).unwrap();
        let combiners = update_combiners(&stack, &channels, 1.0).unwrap();
        let weights = update_weights(&combiners, &stack, &channels, 1.0).unwrap();
        let data = build_subproblem(&combiners, &weights, &stack, &channels, &cfg.user_weights_vec())
            .unwrap();
        for user in 0..cfg.num_users {
            assert!(data.cross_coupling(0, user).norm() < 1e-12);
            assert!(
                (data.rhs(0, user) - data.linear_block(0, user)).norm()
                    < 1e-12 * data.linear_block(0, user).norm()
            );
        }
    }

    #[test]
    fn block_grams_have_stream_count_rank() {
        let cfg = mid_cfg();
        let realization = sample_channel(&cfg, 7);
        let channels = realization.user_channels();
        let stack = init_auxiliary(&cfg, &realization).unwrap();
        let combiners = update_combiners(&stack, &channels, 1.0).unwrap();
        let weights = update_weights(&combiners, &stack, &channels, 1.0).unwrap();
        let data = build_subproblem(&combiners, &weights, &stack, &channels, &cfg.user_weights_vec())
            .unwrap();
        for ap in 0..cfg.num_aps {
            for user in 0..cfg.num_users {
                assert_eq!(
                    data.block_gram_eig(ap, user).numerical_rank(RANK_CUTOFF),
                    cfg.num_streams,
                    "ap {ap} user {user}"
                );
            }
        }
    }

    #[test]
    fn block_decomposition_reconstructs_the_quadratic_form() {
        let cfg = mid_cfg();
        let realization = sample_channel(&cfg, 8);
        let channels = realization.user_channels();
        let stack = init_auxiliary(&cfg, &realization).unwrap();
        let combiners = update_combiners(&stack, &channels, 1.0).unwrap();
        let weights = update_weights(&combiners, &stack, &channels, 1.0).unwrap();
        let user_weights = cfg.user_weights_vec();
        let data =
            build_subproblem(&combiners, &weights, &stack, &channels, &user_weights).unwrap();
        for user in 0..cfg.num_users {
            let direct = (stack.user(user).adjoint() * data.gram(user) * stack.user(user))
                .trace()
                .re
                * user_weights[user];
            let mut blockwise = 0.0;
            for ap in 0..cfg.num_aps {
                let block = stack.block(ap, user);
                blockwise += (block.adjoint() * data.block_gram(ap, user) * &block).trace().re;
                blockwise +=
                    user_weights[user] * (block.adjoint() * data.cross_coupling(ap, user)).trace().re;
            }
            assert!(
                (direct - blockwise).abs() <= 1e-8 * (1.0 + direct.abs()),
                "user {user}: {direct} vs {blockwise}"
            );
        }
    }

    #[test]
    fn power_profile_is_strictly_decreasing() {
        let cfg = mid_cfg();
        let realization = sample_channel(&cfg, 9);
        let channels = realization.user_channels();
        let stack = init_auxiliary(&cfg, &realization).unwrap();
        let combiners = update_combiners(&stack, &channels, 1.0).unwrap();
        let weights = update_weights(&combiners, &stack, &channels, 1.0).unwrap();
        let data = build_subproblem(&combiners, &weights, &stack, &channels, &cfg.user_weights_vec())
            .unwrap();
        let hybrid = HybridPrecoder::new(
            init_analog(&cfg, 9),
            init_digital(&cfg, &init_analog(&cfg, 9), &stack),
        );
        let hybrid_stack = hybrid.effective_stack();
        let penalty = cfg.penalty_param();
        let mut previous = f64::INFINITY;
        for k in 0..10 {
            let multiplier = k as f64 * 0.3;
            let power = ap_power_profile(0, &data, &hybrid_stack, penalty, multiplier);
            assert!(power < previous);
            previous = power;
        }
    }

    #[test]
    fn scalar_power_profile_matches_closed_form() {
        // one AP, one user, one antenna, zero Gram: power = p / (shift + m)^2
        let terms = ApPowerTerms {
            terms: vec![(vec![0.0], vec![1.0])],
        };
        for k in 0..5 {
            let multiplier = k as f64;
            let expected = 1.0 / (1.0 + multiplier).powi(2);
            assert!((terms.power_at(1.0, multiplier) - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn scalar_multiplier_solve_recovers_analytic_root() {
        // profile 1 / (1 + m)^2 with budget 0.25 has the root m = 1
        let terms = ApPowerTerms {
            terms: vec![(vec![0.0], vec![1.0])],
        };
        let upper = (terms.numerator_sum() / 0.25f64).sqrt();
        let result = numerics::bisect_decreasing(
            |m| terms.power_at(1.0, m),
            0.25,
            0.0,
            upper,
            1e-6,
        )
        .unwrap();
        assert!((result.root - 1.0).abs() < 1e-6 + 1e-12);
    }

    #[test]
    fn multiplier_bracket_upper_end_is_feasible() {
        let cfg = mid_cfg();
        let realization = sample_channel(&cfg, 10);
        let channels = realization.user_channels();
        let stack = init_auxiliary(&cfg, &realization).unwrap();
        let combiners = update_combiners(&stack, &channels, 1.0).unwrap();
        let weights = update_weights(&combiners, &stack, &channels, 1.0).unwrap();
        let data = build_subproblem(&combiners, &weights, &stack, &channels, &cfg.user_weights_vec())
            .unwrap();
        let analog = init_analog(&cfg, 10);
        let hybrid = HybridPrecoder::new(analog.clone(), init_digital(&cfg, &analog, &stack));
        let hybrid_stack = hybrid.effective_stack();
        let penalty = cfg.penalty_param();
        let budget = cfg.max_power().milliwatts();
        for ap in 0..cfg.num_aps {
            let shift = 1.0 / (2.0 * penalty);
            let rhs = shifted_rhs(ap, &data, &hybrid_stack, shift);
            let terms = data.spectral_power_terms(ap, &rhs);
            let upper = (terms.numerator_sum() / budget).sqrt();
            assert!(
                terms.power_at(shift, upper) < budget,
                "upper bracket end infeasible for AP {ap}"
            );
        }
    }

    #[test]
    fn tiny_rhs_keeps_the_multiplier_at_zero() {
        let cfg = mid_cfg();
        let realization = sample_channel(&cfg, 11);
        let channels = realization.user_channels();
        let mut stack = init_auxiliary(&cfg, &realization).unwrap();
        stack.scale(1e-9);
        let combiners = update_combiners(&stack, &channels, 1.0).unwrap();
        let weights = update_weights(&combiners, &stack, &channels, 1.0).unwrap();
        let data = build_subproblem(&combiners, &weights, &stack, &channels, &cfg.user_weights_vec())
            .unwrap();
        let analog = init_analog(&cfg, 11);
        let mut digital = init_digital(&cfg, &analog, &stack);
        for row in &mut digital {
            for block in row {
                *block *= Cpx::new(1e-9, 0.0);
            }
        }
        let hybrid = HybridPrecoder::new(analog, digital);
        let (solve, _) = solve_lambda(
            0,
            &data,
            &hybrid.effective_stack(),
            cfg.penalty_param(),
            cfg.max_power(),
            cfg.bisection_tol,
        )
        .unwrap();
        assert_eq!(solve.case, MultiplierCase::Interior);
        assert_eq!(solve.multiplier, 0.0);
    }

    #[test]
    fn auxiliary_update_is_feasible_and_does_not_decrease_objective() {
        let cfg = mid_cfg();
        let user_weights = cfg.user_weights_vec();
        let budget = cfg.max_power().milliwatts();
        for seed in 0..10u64 {
            let realization = sample_channel(&cfg, seed);
            let channels = realization.user_channels();
            let stack = init_auxiliary(&cfg, &realization).unwrap();
            let analog = init_analog(&cfg, seed);
            let hybrid = HybridPrecoder::new(analog.clone(), init_digital(&cfg, &analog, &stack));
            let combiners = update_combiners(&stack, &channels, 1.0).unwrap();
            let weights = update_weights(&combiners, &stack, &channels, 1.0).unwrap();

            let before = metrics::wmmse_objective(
                &combiners,
                &weights,
                &stack,
                &hybrid.effective_stack(),
                &channels,
                1.0,
                cfg.penalty_param(),
                &user_weights,
            )
            .unwrap();
            let (updated, reports) =
                update_auxiliary(&cfg, &combiners, &weights, &stack, &hybrid, &channels).unwrap();
            let after = metrics::wmmse_objective(
                &combiners,
                &weights,
                &updated,
                &hybrid.effective_stack(),
                &channels,
                1.0,
                cfg.penalty_param(),
                &user_weights,
            )
            .unwrap();
            assert!(
                after >= before - 1e-8 * (1.0 + before.abs()),
                "seed {seed}: objective fell from {before} to {after}"
            );
            for (ap, report) in reports.iter().enumerate() {
                let power = metrics::per_ap_power(ap, &updated).unwrap().milliwatts();
                assert!(
                    power <= budget * (1.0 + 1e-9),
                    "seed {seed} AP {ap}: power {power} over budget"
                );
                assert!(report.achieved_power_mw <= budget * (1.0 + 1e-9));
            }
        }
    }

    #[test]
    fn digital_update_reproduces_in_range_blocks() {
        let cfg = desk_cfg();
        let analog = init_analog(&cfg, 13);
        let mut stack = PrecoderStack::zeros(cfg.num_aps, cfg.num_tx_antennas(), cfg.num_users, 1);
        for ap in 0..cfg.num_aps {
            for user in 0..cfg.num_users {
                let coeffs = seeded_matrix(cfg.num_rf_chains, 1, 77 + (ap * 2 + user) as u64);
                stack.set_block(ap, user, &(&analog[ap] * coeffs));
            }
        }
        let digital = update_digital(&analog, &stack);
        for ap in 0..cfg.num_aps {
            for user in 0..cfg.num_users {
                let residual = (&analog[ap] * &digital[ap][user] - stack.block(ap, user)).norm();
                assert!(residual < 1e-8, "ap {ap} user {user}: {residual}");
            }
        }
    }

    #[test]
    fn digital_update_is_least_squares_optimal() {
        let cfg = desk_cfg();
        let analog = init_analog(&cfg, 14);
        let realization = sample_channel(&cfg, 14);
        let stack = init_auxiliary(&cfg, &realization).unwrap();
        let digital = update_digital(&analog, &stack);
        for ap in 0..cfg.num_aps {
            for user in 0..cfg.num_users {
                let target = stack.block(ap, user);
                let best = (&analog[ap] * &digital[ap][user] - &target).norm_squared();
                for k in 0..20 {
                    let perturbed = &digital[ap][user]
                        + seeded_matrix(cfg.num_rf_chains, 1, 500 + k).scale(0.02);
                    let loss = (&analog[ap] * perturbed - &target).norm_squared();
                    assert!(loss >= best - 1e-10);
                }
            }
        }
    }

    #[test]
    fn invertible_analog_makes_the_fit_exact() {
        // square unit-modulus analog with orthogonal columns: a DFT matrix
        let n = 4;
        let analog = CMat::from_fn(n, n, |i, j| {
            Cpx::from_polar(
                1.0,
                2.0 * std::f64::consts::PI * (i * j) as f64 / n as f64,
            )
        });
        let target = seeded_matrix(n, 2, 15);
        let mut stack = PrecoderStack::zeros(1, n, 1, 2);
        stack.set_block(0, 0, &target);
        let digital = update_digital(&[analog.clone()], &stack);
        let residual = (&analog * &digital[0][0] - &target).norm();
        assert!(residual < 1e-10 * target.norm().max(1.0));
    }

    #[test]
    fn analog_entry_updates_never_increase_the_residual() {
        let cfg = desk_cfg();
        let analog = init_analog(&cfg, 16);
        let realization = sample_channel(&cfg, 16);
        let stack = init_auxiliary(&cfg, &realization).unwrap();
        let digital = update_digital(&analog, &stack);
        for ap in 0..cfg.num_aps {
            let targets = concat_user_blocks(&stack, ap);
            let coeffs = concat_digital(&digital[ap]);
            let mut current = analog[ap].clone();
            let mut residual = &targets - &current * &coeffs;
            let mut loss = residual.norm_squared();
            for i in 0..current.nrows() {
                for j in 0..current.ncols() {
                    let coeff_row: Vec<Cpx> = coeffs.row(j).iter().copied().collect();
                    let residual_row: Vec<Cpx> = residual.row(i).iter().copied().collect();
                    let old = current[(i, j)];
                    let new = analog_entry_phase(&residual_row, &coeff_row, old);
                    let delta = old - new;
                    for k in 0..residual.ncols() {
                        residual[(i, k)] += delta * coeff_row[k];
                    }
                    current[(i, j)] = new;
                    let next_loss = residual.norm_squared();
                    assert!(
                        next_loss <= loss + 1e-10 * (1.0 + loss),
                        "entry ({i}, {j}) increased the residual"
                    );
                    loss = next_loss;
                }
            }
        }
    }

    #[test]
    fn scalar_analog_update_aligns_phases() {
        let target = Cpx::new(-0.3, 0.7);
        let coeff = Cpx::new(0.4, -0.2);
        let mut stack = PrecoderStack::zeros(1, 1, 1, 1);
        stack.set_block(0, 0, &CMat::from_element(1, 1, target));
        let analog = vec![CMat::from_element(1, 1, Cpx::from_polar(1.0, 2.1))];
        let digital = vec![vec![CMat::from_element(1, 1, coeff)]];
        let updated = update_analog(&analog, &digital, &stack);
        let expected = (coeff.conj() * target).arg();
        assert!((updated[0][(0, 0)].arg() - expected).abs() < 1e-12);
        assert!((updated[0][(0, 0)].norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn analog_update_keeps_unit_modulus() {
        let cfg = mid_cfg();
        let analog = init_analog(&cfg, 17);
        let realization = sample_channel(&cfg, 17);
        let stack = init_auxiliary(&cfg, &realization).unwrap();
        let digital = update_digital(&analog, &stack);
        let updated = update_analog(&analog, &digital, &stack);
        for m in &updated {
            for z in m.iter() {
                assert!((z.norm() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_coefficients_keep_the_previous_phase() {
        let mut stack = PrecoderStack::zeros(1, 1, 1, 1);
        stack.set_block(0, 0, &CMat::from_element(1, 1, Cpx::new(0.5, 0.5)));
        let previous = Cpx::from_polar(1.0, 1.234);
        let analog = vec![CMat::from_element(1, 1, previous)];
        let digital = vec![vec![CMat::zeros(1, 1)]];
        let updated = update_analog(&analog, &digital, &stack);
        assert_eq!(updated[0][(0, 0)], previous);
    }

    #[test]
    fn finalize_rescales_only_overloaded_aps() {
        let cfg = desk_cfg();
        let realization = sample_channel(&cfg, 18);
        let stack = init_auxiliary(&cfg, &realization).unwrap();
        let analog = init_analog(&cfg, 18);
        let digital = init_digital(&cfg, &analog, &stack);
        let feasible = HybridPrecoder::new(analog.clone(), digital.clone());
        let untouched = finalize(&feasible, cfg.max_power());
        for ap in 0..cfg.num_aps {
            assert_eq!(untouched.digital(ap, 0), feasible.digital(ap, 0));
        }

        // inflate to 4x the budget: finalize must halve the digital stage
        let mut overloaded = feasible.clone();
        for row in &mut overloaded.digital {
            for block in row {
                *block *= Cpx::new(2.0, 0.0);
            }
        }
        let fixed = finalize(&overloaded, cfg.max_power());
        let budget = cfg.max_power().milliwatts();
        for ap in 0..cfg.num_aps {
            assert!((fixed.ap_power(ap) - budget).abs() < 1e-6 * budget);
            assert_eq!(fixed.analog(ap), overloaded.analog(ap));
            let ratio = fixed.digital(ap, 0)[(0, 0)] / overloaded.digital(ap, 0)[(0, 0)];
            assert!((ratio.re - 0.5).abs() < 1e-12 && ratio.im.abs() < 1e-14);
        }
    }

    #[test]
    fn full_run_converges_and_satisfies_invariants() {
        let cfg = mid_cfg();
        let realization = sample_channel(&cfg, 19);
        let run = run(&cfg, &realization).unwrap();
        assert!(run.trace.converged(), "did not converge in 100 iterations");
        assert!(run.trace.is_monotone(1e-8), "objective trace not monotone");
        assert!(run.trace.records().len() <= cfg.max_iters + 1);
        let budget = cfg.max_power().milliwatts();
        for ap in 0..cfg.num_aps {
            assert!(run.precoder.ap_power(ap) <= budget * (1.0 + 1e-9));
        }
        assert!(run.precoder.max_unit_modulus_error() < 1e-12);
        let final_wsr = run.trace.final_record().unwrap().wsr_nats;
        assert!(final_wsr > 0.0);
    }
}
