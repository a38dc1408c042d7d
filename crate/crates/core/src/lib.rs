//! Hierarchical self/full supervision on top of a unified pairwise
//! similarity objective.
//!
//! The crate is `no_std` with `alloc`. It contains everything that is pure
//! computation: dense matrices and a deterministic generator, the two-level
//! label hierarchy, the pairwise weight schemes and their analytic
//! gradients, the linear-hierarchy equivalence checks, a small MLP with
//! batch-norm and manual backprop, the online/target training loop and the
//! frozen-feature evaluations. File formats and the command line live in
//! the `opera` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod data;
pub mod error;
pub mod evaluation;
pub mod labels;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
pub use labels::{LabelPair, Level, PairRelation};
pub use numerics::{Matrix, Rng};
