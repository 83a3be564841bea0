//! Two-sample testing of large covariance matrices.
//!
//! The crate implements a max-type statistic over all standardised
//! entrywise covariance differences, calibrated by a Gaussian-multiplier
//! bootstrap ([`two_sample`]), the data generators used to study its size
//! and power ([`sim`]), and a variable-clustering procedure built from
//! block-wise one-sample versions of the same test ([`cluster`]).

mod bootstrap;
pub mod cluster;
pub mod error;
pub mod io;
pub mod matrix;
pub mod packed;
pub mod rng;
pub mod sim;
pub mod two_sample;

pub use nalgebra;

pub use error::{Error, Result};
pub use matrix::{compute_moment_summary, DataMatrix, MomentSummary};
pub use packed::PackedSym;
pub use two_sample::{run_two_sample_test, BootstrapConfig, TestReport};
