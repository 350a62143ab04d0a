//! Characterization and calibration toolkit for a simulated noisy qubit.
//!
//! The crate simulates a single qubit driven by a Gaussian pulse under
//! colored control noise, trains a deterministic graybox model (SGM) and a
//! Bayesian one (PGM) on finite-shot tomography data, compares predicted and
//! device distributions of the √X gate fidelity, and calibrates the pulse.

pub mod calibrate;
pub mod dataset;
pub mod device;
pub mod distribution;
pub mod error;
pub mod eval;
pub mod models;
pub mod nn;
pub mod noise;
pub mod quantum;
pub mod seed;

pub use error::{Error, Result};
