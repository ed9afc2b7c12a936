//! Weight decay, rotational equilibrium and the rotational optimizer wrapper.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiment;
pub mod math;
pub mod optim;
pub mod predict;
pub mod rotational;
pub mod system;
pub mod telemetry;

pub use error::{Error, Result};
