//! Deterministic federated-learning simulator built around look-back gradient
//! recycling: workers that can express their accumulated gradient as a scalar
//! multiple of a previously transmitted gradient send only that scalar.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: flat parameter vectors and splittable seeded RNG streams.
//! * [`models`]: small models with hand-written gradients.
//! * [`data`]: IDX loading, synthetic datasets and worker partitions.
//! * [`fl`]: local SGD rounds and server aggregation.
//! * [`lbgm`]: look-back coefficients, the transmission gate and reconstruction.
//! * [`compress`]: top-k, sign and low-rank compressors, error feedback and stacking.
//! * [`analyzer`]: gradient-space PCA over centralized training.
//! * [`harness`]: configuration, ledgers, metrics and the experiment runner.

pub mod analyzer;
pub mod compress;
pub mod data;
mod error;
pub mod fl;
pub mod harness;
pub mod lbgm;
pub mod models;
pub mod numerics;

pub use error::{Error, Result};
pub use numerics::{ParamVector, RngStream};
