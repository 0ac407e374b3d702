//! Linear-in-means peer effects with misspecified groups.
//!
//! The crate covers the structural model and its reduced form ([`model`]),
//! binomial sampling of group members and recovery of the true group-size
//! distribution ([`sampling`]), identification diagnostics ([`identification`]),
//! NLS/GMM estimation ([`estimators`]) and the Monte-Carlo harness
//! ([`montecarlo`]) that regenerates the missing-data and group-uncertainty
//! experiments.
//!
//! Monte-Carlo replications run on rayon when the `parallel` feature is on
//! (the default); [`montecarlo::Execution::Sequential`] is always available.

// `!(x > 0.0)` is used on purpose so NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimators;
pub mod identification;
pub mod io;
pub mod model;
pub mod montecarlo;
pub mod optim;
pub mod rng;
pub mod sampling;

pub use error::{Error, Result};
pub use model::{Dataset, Individual, Population, Row, StructuralParams};
pub use sampling::{GroupSizeDistribution, SamplingDesign};
