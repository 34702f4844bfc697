//! Narrow-band multipath mmWave channel synthesis.
//!
//! Every AP-user link is a sum of `num_paths` planar-wave components over
//! uniform planar arrays on both ends:
//!
//! ```text
//! H = sqrt(N_t N_r / L) * sum_l gain_l * a_rx(arrival_l) * a_tx(departure_l)^H
//! ```
//!
//! with unit-variance complex Gaussian path gains, azimuth angles uniform on
//! (-pi, pi] and elevation angles uniform on (-pi/2, pi/2]. Sampling is a
//! pure function of `(config, trial, ap, user)`: every link draws from its
//! own counter-derived RNG stream, so trials can run in any order or in
//! parallel and still reproduce bit for bit.

use std::io::{Read, Write};

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::{AntennaGrid, SystemConfig};
use crate::error::{Error, Result};
use crate::{CMat, CVec, Cpx};

/// Array response of a uniform planar array toward one direction.
///
/// Entries have constant modulus `1 / sqrt(count)` and the vector has unit
/// Euclidean norm. The element for grid position `(m, n)` (column `m` of
/// `width`, row `n` of `height`) lives at flat index `m * height + n` and
/// carries the phase `2 pi * spacing_ratio * (m sin(az) sin(el) + n cos(el))`.
#[derive(Clone, Debug)]
pub struct SteeringVector {
    entries: CVec,
    azimuth: f64,
    elevation: f64,
}

impl SteeringVector {
    pub fn entries(&self) -> &CVec {
        &self.entries
    }

    pub fn azimuth(&self) -> f64 {
        self.azimuth
    }

    pub fn elevation(&self) -> f64 {
        self.elevation
    }
}

/// Computes the array response for the given direction and panel.
pub fn steering_vector(
    azimuth: f64,
    elevation: f64,
    grid: AntennaGrid,
    spacing_ratio: f64,
) -> SteeringVector {
    let count = grid.count();
    let amp = 1.0 / (count as f64).sqrt();
    let horizontal = azimuth.sin() * elevation.sin();
    let vertical = elevation.cos();
    let mut entries = DVector::zeros(count);
    for m in 0..grid.width {
        for n in 0..grid.height {
            let phase =
                2.0 * std::f64::consts::PI * spacing_ratio * (m as f64 * horizontal + n as f64 * vertical);
            entries[m * grid.height + n] = Cpx::from_polar(amp, phase);
        }
    }
    SteeringVector {
        entries,
        azimuth,
        elevation,
    }
}

/// Gain and geometry of a single propagation path.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PathParams {
    pub gain: Cpx,
    pub departure_azimuth: f64,
    pub departure_elevation: f64,
    pub arrival_azimuth: f64,
    pub arrival_elevation: f64,
}

/// One drawn set of channel matrices for every AP-user pair.
#[derive(Clone, Debug)]
pub struct ChannelRealization {
    num_aps: usize,
    num_users: usize,
    num_rx: usize,
    num_tx: usize,
    /// Channel blocks H[b][u], each `num_rx x num_tx`.
    blocks: Vec<Vec<CMat>>,
    /// Generating path parameters, indexed like `blocks`.
    paths: Vec<Vec<Vec<PathParams>>>,
    master_seed: u64,
    trial: u64,
}

impl ChannelRealization {
    /// Wraps explicit channel blocks `blocks[ap][user]`, all of one shape.
    ///
    /// `paths` may be empty when the matrices did not come from the multipath
    /// generator.
    pub fn from_blocks(
        blocks: Vec<Vec<CMat>>,
        paths: Vec<Vec<Vec<PathParams>>>,
        master_seed: u64,
        trial: u64,
    ) -> Result<Self> {
        let num_aps = blocks.len();
        let num_users = blocks.first().map(|row| row.len()).unwrap_or(0);
        if num_aps == 0 || num_users == 0 {
            return Err(Error::DimensionMismatch("empty channel block grid".into()));
        }
        let (num_rx, num_tx) = blocks[0][0].shape();
        for row in &blocks {
            if row.len() != num_users {
                return Err(Error::DimensionMismatch(
                    "ragged channel block grid".into(),
                ));
            }
            for block in row {
                if block.shape() != (num_rx, num_tx) {
                    return Err(Error::DimensionMismatch(format!(
                        "channel block is {:?}, expected {:?}",
                        block.shape(),
                        (num_rx, num_tx)
                    )));
                }
            }
        }
        Ok(Self {
            num_aps,
            num_users,
            num_rx,
            num_tx,
            blocks,
            paths,
            master_seed,
            trial,
        })
    }

    pub fn num_aps(&self) -> usize {
        self.num_aps
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_rx_antennas(&self) -> usize {
        self.num_rx
    }

    pub fn num_tx_antennas(&self) -> usize {
        self.num_tx
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn trial(&self) -> u64 {
        self.trial
    }

    /// Channel matrix from AP `ap` to user `user`.
    pub fn block(&self, ap: usize, user: usize) -> Result<&CMat> {
        self.blocks
            .get(ap)
            .and_then(|row| row.get(user))
            .ok_or_else(|| {
                Error::IndexOutOfRange(format!(
                    "channel block ({ap}, {user}) outside {}x{}",
                    self.num_aps, self.num_users
                ))
            })
    }

    /// Path parameters behind `block(ap, user)`.
    pub fn paths(&self, ap: usize, user: usize) -> Result<&[PathParams]> {
        self.paths
            .get(ap)
            .and_then(|row| row.get(user))
            .map(|p| p.as_slice())
            .ok_or_else(|| {
                Error::IndexOutOfRange(format!(
                    "path set ({ap}, {user}) outside {}x{}",
                    self.num_aps, self.num_users
                ))
            })
    }

    /// Aggregated channel of one user: the horizontal concatenation of its
    /// per-AP blocks, `num_rx x (num_aps * num_tx)`.
    pub fn user_channel(&self, user: usize) -> Result<CMat> {
        if user >= self.num_users {
            return Err(Error::IndexOutOfRange(format!(
                "user {user} outside 0..{}",
                self.num_users
            )));
        }
        let mut aggregated = CMat::zeros(self.num_rx, self.num_aps * self.num_tx);
        for ap in 0..self.num_aps {
            aggregated
                .view_mut((0, ap * self.num_tx), (self.num_rx, self.num_tx))
                .copy_from(&self.blocks[ap][user]);
        }
        Ok(aggregated)
    }

    /// Aggregated channels for all users.
    pub fn user_channels(&self) -> UserChannels {
        let mats = (0..self.num_users)
            .map(|u| self.user_channel(u).expect("user index in range"))
            .collect();
        UserChannels {
            mats,
            num_aps: self.num_aps,
            num_tx: self.num_tx,
        }
    }

    /// Serializes the realization to the documented JSON container.
    pub fn save_json<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer(writer, &RealizationDto::from(self))?;
        Ok(())
    }

    /// Reads a realization back from the JSON container.
    pub fn load_json<R: Read>(reader: R) -> Result<Self> {
        let dto: RealizationDto = serde_json::from_reader(reader)?;
        dto.try_into()
    }
}

/// Aggregated per-user channels shared by the solvers and metrics.
#[derive(Clone, Debug)]
pub struct UserChannels {
    mats: Vec<CMat>,
    num_aps: usize,
    num_tx: usize,
}

impl UserChannels {
    pub fn from_mats(mats: Vec<CMat>, num_aps: usize) -> Result<Self> {
        let first_cols = mats
            .first()
            .map(|m| m.ncols())
            .ok_or_else(|| Error::DimensionMismatch("no user channels given".into()))?;
        if num_aps == 0 || first_cols % num_aps != 0 {
            return Err(Error::DimensionMismatch(format!(
                "channel width {first_cols} is not a multiple of num_aps {num_aps}"
            )));
        }
        if mats.iter().any(|m| m.ncols() != first_cols) {
            return Err(Error::DimensionMismatch(
                "user channels disagree on total antenna count".into(),
            ));
        }
        Ok(Self {
            mats,
            num_aps,
            num_tx: first_cols / num_aps,
        })
    }

    pub fn user(&self, user: usize) -> &CMat {
        &self.mats[user]
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

    pub fn num_rx_antennas(&self) -> usize {
        self.mats.first().map(|m| m.nrows()).unwrap_or(0)
    }
}

const STREAM_DOMAIN_CHANNEL: u64 = 0x11;
pub(crate) const STREAM_DOMAIN_ANALOG_INIT: u64 = 0x22;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives the RNG stream seed for one `(domain, trial, ap, user)` cell by
/// folding the coordinates through SplitMix64. Streams are independent of
/// the order in which cells are visited.
pub(crate) fn stream_seed(master: u64, domain: u64, trial: u64, ap: u64, user: u64) -> u64 {
    let mut state = splitmix64(master ^ domain);
    state = splitmix64(state ^ trial);
    state = splitmix64(state ^ ap);
    splitmix64(state ^ user)
}

pub(crate) fn stream_rng(master: u64, domain: u64, trial: u64, ap: u64, user: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(master, domain, trial, ap, user))
}

/// Builds one channel block from explicit path parameters.
pub fn block_from_paths(
    paths: &[PathParams],
    tx_grid: AntennaGrid,
    rx_grid: AntennaGrid,
    spacing_ratio: f64,
) -> CMat {
    let num_tx = tx_grid.count();
    let num_rx = rx_grid.count();
    let scale = ((num_tx * num_rx) as f64 / paths.len() as f64).sqrt();
    let mut block = CMat::zeros(num_rx, num_tx);
    for path in paths {
        let tx_response = steering_vector(
            path.departure_azimuth,
            path.departure_elevation,
            tx_grid,
            spacing_ratio,
        );
        let rx_response = steering_vector(
            path.arrival_azimuth,
            path.arrival_elevation,
            rx_grid,
            spacing_ratio,
        );
        block += (rx_response.entries() * tx_response.entries().adjoint())
            .scale(scale)
            * path.gain;
    }
    block
}

/// Draws the channel realization for one Monte-Carlo trial.
///
/// Per path the draw order is: gain (real, imaginary), departure azimuth,
/// departure elevation, arrival azimuth, arrival elevation.
pub fn sample_channel(cfg: &SystemConfig, trial: u64) -> ChannelRealization {
    let num_aps = cfg.num_aps;
    let num_users = cfg.num_users;
    let mut blocks = Vec::with_capacity(num_aps);
    let mut paths = Vec::with_capacity(num_aps);
    for ap in 0..num_aps {
        let mut block_row = Vec::with_capacity(num_users);
        let mut path_row = Vec::with_capacity(num_users);
        for user in 0..num_users {
            let mut rng = stream_rng(
                cfg.seed,
                STREAM_DOMAIN_CHANNEL,
                trial,
                ap as u64,
                user as u64,
            );
            let link_paths: Vec<PathParams> = (0..cfg.num_paths)
                .map(|_| draw_path(&mut rng))
                .collect();
            block_row.push(block_from_paths(
                &link_paths,
                cfg.tx_grid,
                cfg.rx_grid,
                cfg.antenna_spacing_ratio,
            ));
            path_row.push(link_paths);
        }
        blocks.push(block_row);
        paths.push(path_row);
    }
    ChannelRealization {
        num_aps,
        num_users,
        num_rx: cfg.num_rx_antennas(),
        num_tx: cfg.num_tx_antennas(),
        blocks,
        paths,
        master_seed: cfg.seed,
        trial,
    }
}

fn draw_path(rng: &mut ChaCha8Rng) -> PathParams {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    let gain = Cpx::new(re, im) / Cpx::new(2f64.sqrt(), 0.0);
    // x in [0, 1) maps onto azimuth (-pi, pi] and elevation (-pi/2, pi/2]
    let departure_azimuth = std::f64::consts::PI * (1.0 - 2.0 * rng.random::<f64>());
    let departure_elevation = std::f64::consts::FRAC_PI_2 * (1.0 - 2.0 * rng.random::<f64>());
    let arrival_azimuth = std::f64::consts::PI * (1.0 - 2.0 * rng.random::<f64>());
    let arrival_elevation = std::f64::consts::FRAC_PI_2 * (1.0 - 2.0 * rng.random::<f64>());
    PathParams {
        gain,
        departure_azimuth,
        departure_elevation,
        arrival_azimuth,
        arrival_elevation,
    }
}

#[derive(Serialize, Deserialize)]
struct BlockDto {
    ap: usize,
    user: usize,
    /// Entries as `[re, im]` pairs, row-major.
    entries: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
struct RealizationDto {
    num_aps: usize,
    num_users: usize,
    num_rx: usize,
    num_tx: usize,
    master_seed: u64,
    trial: u64,
    blocks: Vec<BlockDto>,
    paths: Vec<Vec<Vec<PathParams>>>,
}

impl From<&ChannelRealization> for RealizationDto {
    fn from(r: &ChannelRealization) -> Self {
        let mut blocks = Vec::with_capacity(r.num_aps * r.num_users);
        for ap in 0..r.num_aps {
            for user in 0..r.num_users {
                let m = &r.blocks[ap][user];
                let entries = (0..m.nrows())
                    .flat_map(|i| (0..m.ncols()).map(move |j| (i, j)))
                    .map(|(i, j)| [m[(i, j)].re, m[(i, j)].im])
                    .collect();
                blocks.push(BlockDto { ap, user, entries });
            }
        }
        Self {
            num_aps: r.num_aps,
            num_users: r.num_users,
            num_rx: r.num_rx,
            num_tx: r.num_tx,
            master_seed: r.master_seed,
            trial: r.trial,
            blocks,
            paths: r.paths.clone(),
        }
    }
}

impl TryFrom<RealizationDto> for ChannelRealization {
    type Error = Error;

    fn try_from(dto: RealizationDto) -> Result<Self> {
        let mut blocks =
            vec![vec![CMat::zeros(dto.num_rx, dto.num_tx); dto.num_users]; dto.num_aps];
        let mut seen = vec![vec![false; dto.num_users]; dto.num_aps];
        for block in &dto.blocks {
            if block.ap >= dto.num_aps || block.user >= dto.num_users {
                return Err(Error::IndexOutOfRange(format!(
                    "block ({}, {}) outside header dimensions",
                    block.ap, block.user
                )));
            }
            if block.entries.len() != dto.num_rx * dto.num_tx {
                return Err(Error::DimensionMismatch(format!(
                    "block ({}, {}) has {} entries, expected {}",
                    block.ap,
                    block.user,
                    block.entries.len(),
                    dto.num_rx * dto.num_tx
                )));
            }
            let m = CMat::from_fn(dto.num_rx, dto.num_tx, |i, j| {
                let [re, im] = block.entries[i * dto.num_tx + j];
                Cpx::new(re, im)
            });
            blocks[block.ap][block.user] = m;
            seen[block.ap][block.user] = true;
        }
        if seen.iter().flatten().any(|&s| !s) {
            return Err(Error::DimensionMismatch(
                "channel container is missing blocks".into(),
            ));
        }
        Ok(Self {
            num_aps: dto.num_aps,
            num_users: dto.num_users,
            num_rx: dto.num_rx,
            num_tx: dto.num_tx,
            blocks,
            paths: dto.paths,
            master_seed: dto.master_seed,
            trial: dto.trial,
        })
    }
}
