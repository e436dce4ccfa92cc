//! Two-layer marginalized invariant feature learning and marginalized
//! second-order metric learning for cross-view matching.
//!
//! Pipeline: stripe descriptors ([`features`]) → RBF-χ² exemplar responses
//! ([`kernelmap`]) → paired invariant linear encoders trained with an
//! analytic corruption penalty ([`layer1`]) → PCA → second-order metric
//! ([`metric`]) → CMC ranking ([`eval`]).

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod kernelmap;
pub mod layer1;
pub mod metric;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod tensorio;
pub mod verify;

pub use error::{Error, Result};
