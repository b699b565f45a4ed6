#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod error;
pub mod geometry;
pub mod harness;
pub mod integrators;
pub mod lie;
pub mod measures;
pub mod moment_flow;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
