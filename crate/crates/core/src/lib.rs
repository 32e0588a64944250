//! Anchor-diffusion video object segmentation.

pub mod cli;
pub mod error;
pub mod image;
pub mod infer;
pub mod io;
pub mod metrics;
pub mod model;
pub mod pruning;
pub mod synthdata;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
