//! Context-rich minority oversampling (CMO) laboratory.
//!
//! The crate is organised bottom-up:
//!
//! - [`corpus`]: long-tailed class histograms, datasets, the synthetic
//!   context-shift generator and the binary dataset format.
//! - [`sampler`]: the original distribution P, the minority-weighted
//!   distribution Q, ROS expansion and deferred re-weighting weights.
//! - [`mixer`]: lambda and paste-region sampling, CutMix/Mixup compositors,
//!   soft labels, variant dispatch and the blur/jitter baselines.
//! - [`nn`]: a small dependency-free classifier, soft-target loss, SGD and
//!   the training loop.
//! - [`eval`]: accuracy by shot group and calibration statistics.
//! - [`experiment`]: TOML-driven (method x seed) grids, results manifests
//!   and report tables.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod mixer;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod selfcheck;

pub use error::{Error, Result};
