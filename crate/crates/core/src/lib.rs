//! Parallel-beam CT reconstruction with joint estimation of the attenuation
//! image and the detector flat-field.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod experiment;
pub mod fbp;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod phantoms;
pub mod objectives;
pub mod priors;
pub mod simulate;
pub mod solver;

pub use error::{Error, Result};
