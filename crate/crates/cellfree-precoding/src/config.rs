//! Scenario configuration, validation and unit conventions.
//!
//! All powers are carried on the linear milliwatt scale internally; the noise
//! floor `noise_power = 1.0` is read as 1 mW and AP budgets given in dBm are
//! referenced to 1 mW, so a 30 dBm budget is 1000 mW. Tolerances, weights and
//! penalties are dimensionless.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rectangular antenna panel with `width` columns and `height` rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AntennaGrid {
    pub width: usize,
    pub height: usize,
}

impl AntennaGrid {
    pub const fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }

    /// Total number of elements in the panel.
    pub const fn count(&self) -> usize {
        self.width * self.height
    }
}

/// Transmit power on the linear milliwatt scale. Never negative.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct LinearPower(f64);

impl LinearPower {
    /// Wraps a nonnegative finite power in mW.
    pub fn from_milliwatts(mw: f64) -> Result<Self> {
        if !mw.is_finite() || mw < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "linear power must be finite and nonnegative, got {mw}"
            )));
        }
        Ok(Self(mw))
    }

    pub fn from_dbm(dbm: f64) -> Self {
        dbm_to_linear(dbm)
    }

    pub fn milliwatts(&self) -> f64 {
        self.0
    }
}

/// Converts a dBm value to linear milliwatts: `10^(dbm / 10)`.
///
/// The input must be finite; the result is always strictly positive.
pub fn dbm_to_linear(dbm: f64) -> LinearPower {
    debug_assert!(dbm.is_finite());
    LinearPower(10f64.powf(dbm / 10.0))
}

/// Full description of one cell-free downlink scenario.
///
/// The defaults describe 2 APs with 8x8 transmit panels and 8 RF chains each,
/// serving 4 users with 2x2 receive panels and 2 streams per user over
/// 8-path channels at a 30 dBm per-AP budget.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SystemConfig {
    /// Number of APs.
    pub num_aps: usize,
    /// Number of users.
    pub num_users: usize,
    /// Transmit panel at every AP.
    pub tx_grid: AntennaGrid,
    /// Receive panel at every user.
    pub rx_grid: AntennaGrid,
    /// RF chains per AP; must not exceed the transmit antenna count.
    pub num_rf_chains: usize,
    /// Data streams per user; must not exceed the receive antenna count.
    pub num_streams: usize,
    /// Multipath components per AP-user link.
    pub num_paths: usize,
    /// Noise power in mW; strictly positive.
    pub noise_power: f64,
    /// Per-AP transmit power budget in dBm.
    pub max_power_dbm: f64,
    /// Per-user rate weights. Empty means every user has weight 1.
    pub user_weights: Vec<f64>,
    /// Coupling-penalty parameter. `None` selects `100 / num_tx_antennas`.
    pub penalty: Option<f64>,
    /// Bracket width at which the multiplier bisection stops.
    pub bisection_tol: f64,
    /// Objective change below which the outer loop stops.
    pub convergence_tol: f64,
    /// Outer iteration cap.
    pub max_iters: usize,
    /// Antenna spacing as a fraction of the carrier wavelength.
    pub antenna_spacing_ratio: f64,
    /// Master seed for every random quantity derived from this config.
    pub seed: u64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            num_aps: 2,
            num_users: 4,
            tx_grid: AntennaGrid::new(8, 8),
            rx_grid: AntennaGrid::new(2, 2),
            num_rf_chains: 8,
            num_streams: 2,
            num_paths: 8,
            noise_power: 1.0,
            max_power_dbm: 30.0,
            user_weights: Vec::new(),
            penalty: None,
            bisection_tol: 1e-6,
            convergence_tol: 1e-4,
            max_iters: 100,
            antenna_spacing_ratio: 0.5,
            seed: 1,
        }
    }
}

impl SystemConfig {
    /// Transmit antennas per AP.
    pub fn num_tx_antennas(&self) -> usize {
        self.tx_grid.count()
    }

    /// Receive antennas per user.
    pub fn num_rx_antennas(&self) -> usize {
        self.rx_grid.count()
    }

    /// Effective coupling-penalty parameter.
    pub fn penalty_param(&self) -> f64 {
        self.penalty
            .unwrap_or(100.0 / self.num_tx_antennas() as f64)
    }

    /// Per-AP power budget on the linear scale.
    pub fn max_power(&self) -> LinearPower {
        dbm_to_linear(self.max_power_dbm)
    }

    /// Weight of user `u`, defaulting to 1 when no weights were given.
    pub fn user_weight(&self, user: usize) -> f64 {
        self.user_weights.get(user).copied().unwrap_or(1.0)
    }

    /// Weights for all users as a dense vector.
    pub fn user_weights_vec(&self) -> Vec<f64> {
        (0..self.num_users).map(|u| self.user_weight(u)).collect()
    }

    /// Checks every documented constraint and returns the config unchanged.
    ///
    /// Validation is idempotent. Errors name the violated constraint.
    pub fn validate(self) -> Result<Self> {
        fn positive(name: &str, v: usize) -> Result<()> {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
            Ok(())
        }
        fn positive_real(name: &str, v: f64) -> Result<()> {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be finite and > 0, got {v}"
                )));
            }
            Ok(())
        }

        positive("num_aps", self.num_aps)?;
        positive("num_users", self.num_users)?;
        positive("tx_grid.width", self.tx_grid.width)?;
        positive("tx_grid.height", self.tx_grid.height)?;
        positive("rx_grid.width", self.rx_grid.width)?;
        positive("rx_grid.height", self.rx_grid.height)?;
        positive("num_rf_chains", self.num_rf_chains)?;
        positive("num_streams", self.num_streams)?;
        positive("num_paths", self.num_paths)?;
        positive("max_iters", self.max_iters)?;

        if self.num_rf_chains > self.num_tx_antennas() {
            return Err(Error::InvalidConfig(format!(
                "num_rf_chains <= num_tx_antennas violated: {} > {}",
                self.num_rf_chains,
                self.num_tx_antennas()
            )));
        }
        if self.num_streams > self.num_rx_antennas() {
            return Err(Error::InvalidConfig(format!(
                "num_streams <= num_rx_antennas violated: {} > {}",
                self.num_streams,
                self.num_rx_antennas()
            )));
        }
        if self.num_users * self.num_streams > self.num_aps * self.num_rf_chains {
            return Err(Error::InvalidConfig(format!(
                "num_users * num_streams <= num_aps * num_rf_chains violated: {} > {}",
                self.num_users * self.num_streams,
                self.num_aps * self.num_rf_chains
            )));
        }

        positive_real("noise_power", self.noise_power)?;
        positive_real("bisection_tol", self.bisection_tol)?;
        positive_real("convergence_tol", self.convergence_tol)?;
        positive_real("antenna_spacing_ratio", self.antenna_spacing_ratio)?;
        if let Some(p) = self.penalty {
            positive_real("penalty", p)?;
        }
        if !self.max_power_dbm.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "max_power_dbm must be finite, got {}",
                self.max_power_dbm
            )));
        }
        if !self.user_weights.is_empty() {
            if self.user_weights.len() != self.num_users {
                return Err(Error::InvalidConfig(format!(
                    "user_weights has {} entries, expected {} (or empty for all-ones)",
                    self.user_weights.len(),
                    self.num_users
                )));
            }
            for (u, &w) in self.user_weights.iter().enumerate() {
                positive_real(&format!("user_weights[{u}]"), w)?;
            }
        }

        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dbm_conversion_matches_definition() {
        assert_eq!(dbm_to_linear(30.0).milliwatts(), 1000.0);
        assert_eq!(dbm_to_linear(0.0).milliwatts(), 1.0);
        assert!((dbm_to_linear(10.0).milliwatts() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn dbm_conversion_is_strictly_increasing() {
        let mut prev = dbm_to_linear(-40.0).milliwatts();
        for tenths in -399..=400 {
            let cur = dbm_to_linear(tenths as f64 / 10.0).milliwatts();
            assert!(cur > prev, "not increasing at {} dBm", tenths as f64 / 10.0);
            prev = cur;
        }
    }

    #[test]
    fn linear_power_rejects_negative() {
        assert!(LinearPower::from_milliwatts(-1.0).is_err());
        assert!(LinearPower::from_milliwatts(f64::NAN).is_err());
        assert!(LinearPower::from_milliwatts(0.0).is_ok());
    }

    #[test]
    fn default_config_is_valid() {
        let cfg = SystemConfig::default().validate().unwrap();
        assert_eq!(cfg.num_aps, 2);
        assert_eq!(cfg.num_users, 4);
        assert_eq!(cfg.num_tx_antennas(), 64);
        assert_eq!(cfg.num_rx_antennas(), 4);
        assert_eq!(cfg.num_rf_chains, 8);
        assert_eq!(cfg.num_streams, 2);
        // validation is idempotent
        let again = cfg.clone().validate().unwrap();
        assert_eq!(again.num_tx_antennas(), cfg.num_tx_antennas());
    }

    #[test]
    fn rf_chain_count_cannot_exceed_antennas() {
        let cfg = SystemConfig {
            tx_grid: AntennaGrid::new(4, 2),
            num_rf_chains: 9,
            ..SystemConfig::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("num_rf_chains <= num_tx_antennas"), "{err}");
    }

    #[test]
    fn stream_budget_cannot_exceed_rf_budget() {
        let cfg = SystemConfig {
            num_users: 5,
            num_streams: 2,
            num_aps: 2,
            num_rf_chains: 4,
            ..SystemConfig::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(
            err.contains("num_users * num_streams <= num_aps * num_rf_chains"),
            "{err}"
        );
    }

    #[test]
    fn non_positive_scalars_are_rejected() {
        for mutate in [
            (|c: &mut SystemConfig| c.noise_power = 0.0) as fn(&mut SystemConfig),
            |c| c.bisection_tol = -1e-6,
            |c| c.convergence_tol = 0.0,
            |c| c.penalty = Some(0.0),
            |c| c.antenna_spacing_ratio = 0.0,
            |c| c.user_weights = vec![1.0, 1.0, -1.0, 1.0],
        ] {
            let mut cfg = SystemConfig::default();
            mutate(&mut cfg);
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn penalty_defaults_to_scaled_antenna_count() {
        let cfg = SystemConfig::default();
        assert!((cfg.penalty_param() - 100.0 / 64.0).abs() < 1e-15);
        let overridden = SystemConfig {
            penalty: Some(0.64),
            ..SystemConfig::default()
        };
        assert_eq!(overridden.penalty_param(), 0.64);
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = SystemConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: SystemConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.num_tx_antennas(), cfg.num_tx_antennas());
        assert_eq!(back.seed, cfg.seed);
        // partial documents fall back to defaults
        let partial: SystemConfig = serde_json::from_str(r#"{"num_aps": 3}"#).unwrap();
        assert_eq!(partial.num_aps, 3);
        assert_eq!(partial.num_users, 4);
    }
}
