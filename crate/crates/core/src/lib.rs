//! Structured prediction cascades.
//!
//! A cascade is a sequence of increasingly expressive linear structured
//! models. Each level computes max-marginals over a sparse set of surviving
//! clique assignments, discards every assignment whose max-marginal falls at
//! or below an input-adaptive threshold, and hands the reduced output space
//! to the next level. Levels are trained with a convex surrogate of the
//! filtering loss; loopy grid models are handled with an ensemble of
//! tractable comb-shaped trees whose max-marginals are summed.
//!
//! This crate is `no_std` and only needs `alloc`. File formats, synthetic
//! data and the command line live in the `structcascade` crate.

#![no_std]

extern crate alloc;

mod error;
mod hash;

pub mod ensemble;
pub mod inference;
pub mod lattice;
pub mod losses;
pub mod model;
pub mod threshold;
pub mod training;

pub use error::{Error, Result};
pub use hash::{hash_key, hash_str};
pub use inference::{LogMarginalTable, MaxMarginalTable};
pub use lattice::{CliqueAssignment, SparseLattice, StateHierarchy};
pub use model::{FeatureTemplate, FeatureVector, LinearModel, Output, SequenceInput};
pub use threshold::ThresholdParams;
