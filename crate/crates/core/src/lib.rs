//! Intrinsically motivated goal exploration with learned goal spaces.
//!
//! The crate bundles a kinematic arm-and-ball simulator ([`env_sim`]),
//! movement-primitive actions ([`dmp`]), a rasterizer ([`renderer`]), a small
//! reverse-mode tensor library ([`tensor`]), VAE goal-space learning
//! ([`representation`]), the exploration engine ([`imgep`]) and coverage
//! metrics ([`evaluation`]).

// `!(x > 0.0)` is how validation rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dmp;
pub mod env_sim;
mod error;
pub mod evaluation;
pub mod imgep;
pub mod renderer;
pub mod representation;
pub mod seeding;
pub mod tensor;

pub use error::{Error, Result};
