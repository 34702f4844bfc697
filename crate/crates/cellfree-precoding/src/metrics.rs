//! Rate, MSE and power metrics shared by every solver.
//!
//! The central object is the [`PrecoderStack`]: one `(B * N_t) x N_s` matrix
//! per user whose row block `b` is the part transmitted by AP `b`. Auxiliary
//! precoders, effective hybrid products and fully digital precoders all use
//! this shape, so the same metrics apply to each of them.

use nalgebra::Cholesky;

use crate::channel::UserChannels;
use crate::config::LinearPower;
use crate::error::{Error, Result};
use crate::numerics::hermitianize;
use crate::{CMat, Cpx};

/// Per-user stacked precoders with a per-AP block view.
#[derive(Clone, Debug, PartialEq)]
pub struct PrecoderStack {
    mats: Vec<CMat>,
    num_aps: usize,
    num_tx: usize,
}

impl PrecoderStack {
    /// Wraps per-user stacked matrices; every matrix must have
    /// `num_aps * num_tx` rows for a common `num_tx`.
    pub fn from_users(mats: Vec<CMat>, num_aps: usize) -> Result<Self> {
        let rows = mats
            .first()
            .map(|m| m.nrows())
            .ok_or_else(|| Error::DimensionMismatch("empty precoder stack".into()))?;
        if num_aps == 0 || rows % num_aps != 0 {
            return Err(Error::DimensionMismatch(format!(
                "stack height {rows} is not a multiple of num_aps {num_aps}"
            )));
        }
        if mats.iter().any(|m| m.nrows() != rows) {
            return Err(Error::DimensionMismatch(
                "users disagree on stacked height".into(),
            ));
        }
        Ok(Self {
            mats,
            num_aps,
            num_tx: rows / num_aps,
        })
    }

    pub fn zeros(num_aps: usize, num_tx: usize, num_users: usize, num_streams: usize) -> Self {
        Self {
            mats: vec![CMat::zeros(num_aps * num_tx, num_streams); num_users],
            num_aps,
            num_tx,
        }
    }

    pub fn user(&self, user: usize) -> &CMat {
        &self.mats[user]
    }

    /// The rows of user `user`'s precoder owned by AP `ap`.
    pub fn block(&self, ap: usize, user: usize) -> CMat {
        self.mats[user]
            .view((ap * self.num_tx, 0), (self.num_tx, self.mats[user].ncols()))
            .clone_owned()
    }

    pub fn set_block(&mut self, ap: usize, user: usize, block: &CMat) {
        self.mats[user]
            .view_mut((ap * self.num_tx, 0), (self.num_tx, block.ncols()))
            .copy_from(block);
    }

    pub fn set_user(&mut self, user: usize, mat: CMat) {
        self.mats[user] = mat;
    }

    pub fn num_users(&self) -> usize {
        self.mats.len()
    }

    pub fn num_aps(&self) -> usize {
        self.num_aps
    }

    pub fn num_tx_antennas(&self) -> usize {
        self.num_tx
    }

    pub fn num_streams(&self) -> usize {
        self.mats.first().map(|m| m.ncols()).unwrap_or(0)
    }

    /// Scales every user's precoder by `factor`.
    pub fn scale(&mut self, factor: f64) {
        for m in &mut self.mats {
            *m *= Cpx::new(factor, 0.0);
        }
    }
}

/// Linear receive combiners, one `N_r x N_s` matrix per user.
#[derive(Clone, Debug)]
pub struct CombinerSet(pub Vec<CMat>);

impl CombinerSet {
    pub fn user(&self, user: usize) -> &CMat {
        &self.0[user]
    }

    pub fn num_users(&self) -> usize {
        self.0.len()
    }
}

/// Hermitian positive-definite MSE weighting matrices, one per user.
#[derive(Clone, Debug)]
pub struct MseWeights(pub Vec<CMat>);

impl MseWeights {
    pub fn user(&self, user: usize) -> &CMat {
        &self.0[user]
    }

    pub fn num_users(&self) -> usize {
        self.0.len()
    }
}

fn check_dims(stack: &PrecoderStack, channels: &UserChannels) -> Result<()> {
    if stack.num_users() != channels.num_users() {
        return Err(Error::DimensionMismatch(format!(
            "{} precoders vs {} user channels",
            stack.num_users(),
            channels.num_users()
        )));
    }
    let width = channels.user(0).ncols();
    if stack.user(0).nrows() != width {
        return Err(Error::DimensionMismatch(format!(
            "stack height {} vs channel width {width}",
            stack.user(0).nrows()
        )));
    }
    Ok(())
}

/// Log-determinant of a Hermitian positive-definite matrix.
pub(crate) fn logdet_hermitian_pd(a: &CMat) -> Result<f64> {
    let chol = Cholesky::new(hermitianize(a)).ok_or_else(|| {
        Error::SingularMatrix("log-determinant of a non-positive-definite matrix".into())
    })?;
    Ok(2.0 * chol.l().diagonal().iter().map(|z| z.re.ln()).sum::<f64>())
}

/// Solves `A X = B` for Hermitian positive-definite `A`.
pub(crate) fn solve_hermitian_pd(a: &CMat, b: &CMat) -> Result<CMat> {
    let chol = Cholesky::new(hermitianize(a)).ok_or_else(|| {
        Error::SingularMatrix("solve with a non-positive-definite matrix".into())
    })?;
    Ok(chol.solve(b))
}

/// Interference-plus-noise covariance seen by user `user`:
/// the sum of all other users' received signal covariances plus the noise
/// floor. Hermitian positive definite for positive noise power.
pub fn interference_plus_noise(
    user: usize,
    stack: &PrecoderStack,
    channels: &UserChannels,
    noise_power: f64,
) -> Result<CMat> {
    check_dims(stack, channels)?;
    let h = channels.user(user);
    let n_rx = h.nrows();
    let mut cov = CMat::identity(n_rx, n_rx).scale(noise_power);
    for other in 0..stack.num_users() {
        if other == user {
            continue;
        }
        let received = h * stack.user(other);
        cov += &received * received.adjoint();
    }
    Ok(hermitianize(&cov))
}

/// Weighted sum rate in nats.
pub fn wsr(
    stack: &PrecoderStack,
    channels: &UserChannels,
    noise_power: f64,
    user_weights: &[f64],
) -> Result<f64> {
    check_dims(stack, channels)?;
    let mut total = 0.0;
    for user in 0..stack.num_users() {
        let noise_and_interference =
            interference_plus_noise(user, stack, channels, noise_power)?;
        let received = channels.user(user) * stack.user(user);
        let with_signal =
            hermitianize(&(&noise_and_interference + &received * received.adjoint()));
        let rate =
            logdet_hermitian_pd(&with_signal)? - logdet_hermitian_pd(&noise_and_interference)?;
        total += user_weights[user] * rate;
    }
    Ok(total)
}

/// MSE covariance of user `user` under combiner `combiner`, including the
/// residual of the desired streams, the combined interference and the
/// combined noise.
pub fn mse_matrix(
    user: usize,
    combiner: &CMat,
    stack: &PrecoderStack,
    channels: &UserChannels,
    noise_power: f64,
) -> Result<CMat> {
    check_dims(stack, channels)?;
    let h = channels.user(user);
    if combiner.nrows() != h.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "combiner has {} rows, channel has {}",
            combiner.nrows(),
            h.nrows()
        )));
    }
    let n_streams = stack.user(user).ncols();
    let residual = combiner.adjoint() * h * stack.user(user) - CMat::identity(n_streams, n_streams);
    let mut mse = &residual * residual.adjoint();
    for other in 0..stack.num_users() {
        if other == user {
            continue;
        }
        let leaked = combiner.adjoint() * h * stack.user(other);
        mse += &leaked * leaked.adjoint();
    }
    mse += (combiner.adjoint() * combiner).scale(noise_power);
    Ok(hermitianize(&mse))
}

/// Transmit power of AP `ap` under the given stacked precoders, in mW.
pub fn per_ap_power(ap: usize, stack: &PrecoderStack) -> Result<LinearPower> {
    if ap >= stack.num_aps() {
        return Err(Error::IndexOutOfRange(format!(
            "AP {ap} outside 0..{}",
            stack.num_aps()
        )));
    }
    let mut total = 0.0;
    for user in 0..stack.num_users() {
        let block = stack.block(ap, user);
        total += block.norm_squared();
    }
    LinearPower::from_milliwatts(total)
}

/// Quadratic coupling penalty between the auxiliary and effective hybrid
/// precoders: `sum_{b,u} ||F_bu - F_hyb_bu||^2 / (2 rho)`.
pub fn coupling_penalty(stack: &PrecoderStack, hybrid_stack: &PrecoderStack, penalty: f64) -> f64 {
    let mut total = 0.0;
    for ap in 0..stack.num_aps() {
        for user in 0..stack.num_users() {
            let diff = stack.block(ap, user) - hybrid_stack.block(ap, user);
            total += diff.norm_squared() / (2.0 * penalty);
        }
    }
    total
}

/// Weighted-MMSE part of the objective:
/// `sum_u w_u [ log|W_u| - tr(W_u E_u) ]`.
pub fn wmmse_core(
    combiners: &CombinerSet,
    weights: &MseWeights,
    stack: &PrecoderStack,
    channels: &UserChannels,
    noise_power: f64,
    user_weights: &[f64],
) -> Result<f64> {
    let mut total = 0.0;
    for user in 0..stack.num_users() {
        let w = weights.user(user);
        let mse = mse_matrix(user, combiners.user(user), stack, channels, noise_power)?;
        let logdet = logdet_hermitian_pd(w)?;
        let traced = (w * mse).trace().re;
        total += user_weights[user] * (logdet - traced);
    }
    Ok(total)
}

/// Full convergence monitor of the hybrid design: the weighted-MMSE part
/// minus the coupling penalty toward the effective hybrid precoders.
pub fn wmmse_objective(
    combiners: &CombinerSet,
    weights: &MseWeights,
    stack: &PrecoderStack,
    hybrid_stack: &PrecoderStack,
    channels: &UserChannels,
    noise_power: f64,
    penalty: f64,
    user_weights: &[f64],
) -> Result<f64> {
    Ok(wmmse_core(combiners, weights, stack, channels, noise_power, user_weights)?
        - coupling_penalty(stack, hybrid_stack, penalty))
}
