//! Simulation library for reciprocity calibration in TDD distributed MIMO
//! with hybrid analog/digital beamforming.
//!
//! The crate models pairs of multi-antenna nodes whose transmit and receive
//! chains carry unknown diagonal hardware responses, estimates those
//! responses from over-the-air pilots (digital chains first, then the analog
//! front ends, then the cross-node scale between access points), reconstructs
//! downlink channels from uplink pilots, and scores the result with
//! zero-forcing sum rates.

pub mod airlink;
pub mod beamsearch;
pub mod calibration;
pub mod error;
pub mod estimation;
pub mod harness;
pub mod model;
pub mod zfbf;

pub use error::{Error, Result};

/// Complex sample type used throughout.
pub type C64 = num_complex::Complex<f64>;
