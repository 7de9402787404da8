//! Tensor-free building blocks for the glyph generation stack.
//!
//! - [`glyph`]: procedural glyph rasterization, triplet composition, reference
//!   perturbations, alpha blending and the on-disk dataset shard format.
//! - [`layout`]: box geometry, layout rewards, group-relative advantages,
//!   coarse/fine planners and the JSON planner protocol.
//! - [`filter`]: k-means over style features and style-distance filtering.
//! - [`metrics`]: OCR-style text-rendering metrics and the benchmark runner.
//! - [`image`]: small float image containers shared by everything above.

pub mod error;
pub mod filter;
pub mod glyph;
pub mod image;
pub mod layout;
pub mod metrics;
pub mod rng;

pub use error::{Error, Result};
