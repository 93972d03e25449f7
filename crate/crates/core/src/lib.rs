//! Curriculum-based disambiguation with consistency regularization (CDCR)
//! for partial multi-label classification, at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! - [`numeric`]: dense matrices, binary label matrices and a split-stream RNG.
//! - [`datagen`]: synthetic multi-label data and its corruption into candidate sets.
//! - [`classifier`]: a small MLP with analytic gradients, Adam, one-cycle LR and EMA.
//! - [`losses`]: BCE, weighted BCE, the self-paced penalty and the CDCR objective.
//! - [`curriculum`]: disambiguation weight estimation and its diagnostics.
//! - [`augment`]: stochastic feature-space augmentation.
//! - [`metrics`]: mAP and the CP/CR/CF1, OP/OR/OF1 family.
//! - [`trainer`]: warm-up, the per-epoch curriculum loop, ablations and alpha sweeps.
//! - [`cli`]: the `cdcr` command-line front end.

pub mod augment;
pub mod classifier;
pub mod cli;
pub mod curriculum;
pub mod datagen;
mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod numeric;
pub mod trainer;

pub use error::{Error, Result};
