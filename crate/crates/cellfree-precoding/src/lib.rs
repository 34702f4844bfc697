//! Weighted-sum-rate precoder design for the mmWave cell-free MIMO downlink.
//!
//! A set of distributed multi-antenna access points (APs), coordinated by a
//! central unit, jointly serves multi-antenna users over narrow-band
//! multipath mmWave channels. Each AP is either hybrid (a phase-shifter
//! analog stage driving a small number of RF chains, cascaded with per-user
//! digital precoders) or fully digital. This crate designs the precoders that
//! maximize the weighted sum rate (WSR) subject to a per-AP transmit power
//! budget and, for hybrid APs, the constant-modulus constraint of the phase
//! shifters.
//!
//! What is provided:
//!
//! - a block-coordinate-descent solver for the hybrid analog/digital design,
//!   built on a weighted-MMSE reformulation, quadratic coupling penalties and
//!   Lagrangian bisection for the per-AP power budgets ([`hybrid`]);
//! - the closed-form fully digital variant with rank-aware multiplier search
//!   ([`digital`]);
//! - zero-forcing and maximum-ratio transmission baselines for single-antenna
//!   users ([`baselines`]);
//! - a seeded uniform-planar-array multipath channel generator ([`channel`]);
//! - rate/MSE/power metrics ([`metrics`]) and the numerical kernels they rely
//!   on ([`numerics`]);
//! - independent numerical cross-checks of the solver algebra
//!   ([`validation`]);
//! - a deterministic Monte-Carlo experiment harness with CSV output
//!   ([`experiment`]), also exposed through the `cellfree-sim` binary.
//!
//! ```
//! use cellfree_precoding::config::SystemConfig;
//! use cellfree_precoding::channel::sample_channel;
//! use cellfree_precoding::{digital, hybrid};
//!
//! let cfg = SystemConfig {
//!     tx_grid: cellfree_precoding::config::AntennaGrid::new(4, 4),
//!     ..SystemConfig::default()
//! }
//! .validate()
//! .unwrap();
//! let realization = sample_channel(&cfg, 0);
//!
//! let hybrid_run = hybrid::run(&cfg, &realization).unwrap();
//! let digital_run = digital::run_fd(&cfg, &realization).unwrap();
//! assert!(hybrid_run.trace.converged() || digital_run.trace.converged());
//! ```

pub mod baselines;
pub mod channel;
pub mod config;
pub mod digital;
pub mod error;
pub mod experiment;
pub mod hybrid;
pub mod metrics;
pub mod numerics;
pub mod trace;
pub mod validation;

pub use error::{Error, Result};

/// Complex scalar used throughout the crate.
pub type Cpx = num_complex::Complex<f64>;
/// Dynamically sized complex matrix.
pub type CMat = nalgebra::DMatrix<Cpx>;
/// Dynamically sized complex column vector.
pub type CVec = nalgebra::DVector<Cpx>;
