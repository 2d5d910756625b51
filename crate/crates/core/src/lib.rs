//! Forecasting engine built on a Mamba-style encoder whose state
//! transitions are low-rank continuous-time ODEs integrated with a
//! fixed-step solver and scanned selectively within segments.

pub mod data;
pub mod error;
pub mod numerics;
pub mod model;
pub mod param_gen;
pub mod ssm;
pub mod training;

pub use error::{Error, Result};
