//! Experiment engine for inference-time model hijacking.
//!
//! A frozen classifier trained on one task leaks enough structure through
//! its logits or hidden activations to solve a different task by nearest
//! reference in that space. This crate trains small networks, runs the
//! distance-rule attack with top-N scoring, studies why it works
//! (task-complexity ratios, overparametrization, random projections,
//! feature correlations), and implements two defenses: width-compression
//! search with TOPSIS selection, and meta-unlearning.
//!
//! Everything is seeded and deterministic; experiment runs serialize to
//! JSON reports that reproduce byte-for-byte.

// Index-based loops are kept where they mirror the matrix math.
#![allow(clippy::needless_range_loop)]

pub mod analysis;
pub mod compression;
pub mod config;
pub mod datasets;
pub mod error;
pub mod hijack;
pub mod network;
pub mod report;
pub mod runner;
pub mod training;
pub mod util;

pub use error::{Error, Result};
