//! Convolution-free learned image compression with attention transforms
//! over learned image queries.

pub mod analysis;
pub mod attention;
pub mod cli;
pub mod codec;
pub mod coder;
pub mod config;
pub mod entropy;
pub mod eval;
pub mod error;
pub mod image;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod patch;
pub mod perceptual;
pub mod synthetic;
pub mod train;
pub mod transforms;

pub use config::{ModelConfig, RunConfig};
pub use error::{CodecError, Result};
pub use image::ImageTensor;
pub use model::{Checkpoint, Codec};
