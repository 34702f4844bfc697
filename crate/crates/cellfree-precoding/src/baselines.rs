//! Zero-forcing and maximum-ratio transmission baselines.
//!
//! Both apply to the single-antenna, single-stream downlink: user `u`'s
//! channel is one row of a `U x (B * N_t)` matrix. Directions are computed
//! centrally and scaled by one common factor chosen so the most loaded AP
//! meets its budget with equality; this keeps the zero-forcing nulls intact.

use crate::channel::ChannelRealization;
use crate::config::LinearPower;
use crate::digital::FdPrecoder;
use crate::error::{Error, Result};
use crate::metrics::PrecoderStack;
use crate::{CMat, Cpx};

/// Row-per-user channel matrix of a single-receive-antenna downlink.
#[derive(Clone, Debug)]
pub struct StackedChannel {
    rows: CMat,
    num_aps: usize,
}

impl StackedChannel {
    /// Stacks the per-user channel rows of a realization; every user must
    /// have exactly one receive antenna.
    pub fn from_realization(realization: &ChannelRealization) -> Result<Self> {
        if realization.num_rx_antennas() != 1 {
            return Err(Error::DimensionMismatch(format!(
                "baselines need single-antenna users, got {} receive antennas",
                realization.num_rx_antennas()
            )));
        }
        let num_users = realization.num_users();
        let width = realization.num_aps() * realization.num_tx_antennas();
        let mut rows = CMat::zeros(num_users, width);
        for user in 0..num_users {
            rows.row_mut(user)
                .copy_from(&realization.user_channel(user)?);
        }
        if rows.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite("stacked channel has non-finite entries".into()));
        }
        Ok(Self {
            rows,
            num_aps: realization.num_aps(),
        })
    }

    pub fn from_rows(rows: CMat, num_aps: usize) -> Result<Self> {
        if num_aps == 0 || rows.ncols() % num_aps != 0 {
            return Err(Error::DimensionMismatch(format!(
                "channel width {} is not a multiple of num_aps {num_aps}",
                rows.ncols()
            )));
        }
        Ok(Self { rows, num_aps })
    }

    pub fn num_users(&self) -> usize {
        self.rows.nrows()
    }

    pub fn num_aps(&self) -> usize {
        self.num_aps
    }

    pub fn rows(&self) -> &CMat {
        &self.rows
    }
}

/// Scales the direction columns by one common factor so the most loaded AP
/// transmits exactly at its budget, and wraps them as per-user precoders.
fn scale_to_budget(
    directions: CMat,
    num_aps: usize,
    max_power: LinearPower,
) -> Result<FdPrecoder> {
    let num_tx = directions.nrows() / num_aps;
    let num_users = directions.ncols();
    let mut heaviest = 0.0f64;
    for ap in 0..num_aps {
        let load = directions
            .view((ap * num_tx, 0), (num_tx, num_users))
            .norm_squared();
        heaviest = heaviest.max(load);
    }
    if heaviest <= 0.0 {
        return Err(Error::SingularMatrix(
            "baseline directions are all zero".into(),
        ));
    }
    let factor = Cpx::new((max_power.milliwatts() / heaviest).sqrt(), 0.0);
    let users = (0..num_users)
        .map(|u| {
            CMat::from_fn(directions.nrows(), 1, |i, _| directions[(i, u)] * factor)
        })
        .collect();
    Ok(FdPrecoder::new(PrecoderStack::from_users(users, num_aps)?))
}

/// Maximum-ratio transmission: each user's precoder points along its own
/// conjugated channel.
pub fn mrt_precoder(stacked: &StackedChannel, max_power: LinearPower) -> Result<FdPrecoder> {
    for user in 0..stacked.num_users() {
        if stacked.rows.row(user).norm() == 0.0 {
            return Err(Error::SingularMatrix(format!(
                "user {user} has a zero channel row"
            )));
        }
    }
    scale_to_budget(stacked.rows.adjoint(), stacked.num_aps, max_power)
}

/// Zero-forcing: directions from the right pseudo-inverse of the stacked
/// channel, nulling all cross-user interference.
pub fn zf_precoder(stacked: &StackedChannel, max_power: LinearPower) -> Result<FdPrecoder> {
    let gram = &stacked.rows * stacked.rows.adjoint();
    let inverse = nalgebra::Cholesky::new(crate::numerics::hermitianize(&gram))
        .ok_or_else(|| {
            Error::SingularMatrix("stacked channel is rank deficient; zero-forcing impossible".into())
        })?
        .inverse();
    scale_to_budget(
        stacked.rows.adjoint() * inverse,
        stacked.num_aps,
        max_power,
    )
}
