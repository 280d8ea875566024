//! Innovation-based monitoring of Kalman filters and synthesis of stealthy
//! FIR-Gaussian disturbances.
//!
//! The crate is organized bottom-up:
//!
//! * [`model`] / [`rng`]: LTI plant with disturbance channels and a seeded simulator.
//! * [`kalman`]: time-varying Kalman filter with whitened innovations.
//! * [`statkit`]: incomplete gamma, chi-square and normal primitives.
//! * [`sds`]: the four-test detection suite and Fisher fusion.
//! * [`channels`]: finite-horizon detection/damage operators and block-Toeplitz FIR maps.
//! * [`attack`]: convex relaxation, FIR recovery, scaling and certification.
//! * [`scenario`]: the constant-velocity vessel case study and its experiment harness.

pub mod attack;
pub mod channels;
pub mod error;
pub mod kalman;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod scenario;
pub mod sds;
pub mod statkit;

pub use error::{Error, Result};
