//! Toolkit for a redundant photo-reflector joint torque sensor.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! * [`beam`] flexure stiffness and torsional natural frequency,
//! * [`sensor_sim`] synthetic 8-channel photo-reflector streams with ADC quantization,
//! * [`qp`] a dense primal active-set QP solver,
//! * [`calibration`] least-squares and quiet-segment QP calibration,
//! * [`metrics`] sensor evaluation metrics in percent of full scale,
//! * [`thermal`] rational zero-drift fitting and compensation,
//! * [`control`] stiction plant, PI torque loop and admittance control,
//! * [`io`] dataset/config/model formats and end-to-end pipeline commands.

pub mod beam;
pub mod calibration;
pub mod control;
pub mod io;
mod linalg;
pub mod metrics;
pub mod qp;
pub mod sensor_sim;
pub mod thermal;

mod error;

pub use error::{Error, Result};

/// Design maximum z-axis torque, N·m. Denominator of every %FS metric.
pub const FULL_SCALE_NM: f64 = 80.0;

/// Sampling rate of every simulated stream and control loop, Hz.
pub const SAMPLE_RATE_HZ: f64 = 1000.0;
