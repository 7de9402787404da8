//! Neural components for glyph generation: the multi-modal diffusion
//! transformer, its encoders, training objectives and the transparency
//! autoencoder.

pub mod checkpoint;
pub mod dit;
pub mod encoders;
mod error;
pub mod gradcheck;
pub mod nn;
pub mod objectives;
pub mod params;
pub mod rope;
pub mod tvae;

pub use error::{Error, Result};
pub use params::{Init, ParamStore, Params};
