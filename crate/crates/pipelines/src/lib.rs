//! Training stages, rectified-flow sampling and the design pipelines.

pub mod bench;
pub mod clients;
pub mod config;
pub mod data;
pub mod design;
mod error;
pub mod sampler;
pub mod system;
pub mod train;

pub use error::{Error, Result};
