//! Iterative structured pruning with similarity-guided decisions.
//!
//! The crate is organized around a small training substrate and a decision
//! engine built on top of it:
//!
//! - [`nn`]: network topology, parameters, forward/backward kernels, SGD
//!   training, FLOP accounting, datasets, and checkpoints.
//! - [`similarity`]: kernel Gram matrices, dependence estimation, and the
//!   normalized similarity score used to compare representations.
//! - [`criteria`]: importance scores that rank prunable structures.
//! - [`surgery`]: structural removal of blocks and filter groups, plus
//!   capacity-matched candidate construction.
//! - [`engine`]: the per-iteration prune/fine-tune/select loop, its random
//!   baseline, and run artifacts.
//!
//! Everything is deterministic for a fixed seed: random state is always an
//! explicit stream derived in [`rng`], and all reductions accumulate in f64.

pub mod criteria;
pub mod engine;
pub mod error;
pub mod matrix;
pub mod nn;
pub mod rng;
pub mod similarity;
pub mod surgery;

pub use error::Error;
pub use matrix::Matrix;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
