//! Gray-box model, simulation, identification and switched PID current
//! control for short-circuit GMAW.
//!
//! * [`model`]: circuit parameters and the two phase subcircuits
//! * [`simulator`]: switched fixed-step simulation, open and closed loop
//! * [`identification`]: prediction-error fitting of the phase parameters
//! * [`control`]: ramp reference, phase detector and switched PID
//! * [`analysis`]: closed-loop poles, gain sweeps and settling checks
//! * [`metrics`]: per-cycle welding performance measures

pub mod analysis;
pub mod config;
pub mod control;
pub mod error;
pub mod identification;
pub mod metrics;
pub mod model;
pub mod poly;
pub mod simulator;
pub mod waveform;

pub use error::{Error, Result};
