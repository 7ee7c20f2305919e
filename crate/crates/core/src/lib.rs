//! Micro-transformer training laboratory for studying how the training
//! objective affects recall of facts in the reverse direction.

pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod model;
pub mod numeric;
pub mod objectives;
pub mod rope;
pub mod train;

pub use error::{Error, Result};
