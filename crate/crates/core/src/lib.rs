//! State-action control barrier functions for constrained piecewise-affine
//! systems: barrier synthesis, exact reachability labeling, learned
//! certificates and the convex safety filters built on them.

pub mod cbf_init;
pub mod dataset;
pub mod error;
pub mod filter;
pub mod horizon;
pub mod learner;
pub mod optkit;
pub mod policies;
pub mod reach_gen;
pub mod sim;
pub mod sysmodel;

pub use error::{Error, Result};
