//! Learned reference correction for a flexible-joint arm.
//!
//! A soft actor-critic agent with a Beta policy learns small corrections to
//! the reference fed to a fixed baseline controller, either from scratch or
//! after pretraining on a learned dynamics model.

// Validation uses `!(x > 0.0)` so NaN is rejected; joint loops index several
// parallel slices.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod arm;
pub mod config;
pub mod dynamics;
pub mod env;
pub mod error;
pub mod mdp;
pub mod nn;
pub mod pipeline;
pub mod sac;
pub mod training;
pub mod trajectory;

pub use error::{Error, Result};
