//! A layered learned image codec.
//!
//! A stack of convolutional auto-encoders codes an image progressively: the
//! base layer codes the image, and every enhance layer codes the residual
//! left by the sum of all reconstructions before it. The per-layer payloads
//! form one bitstream that can be truncated at any layer boundary.

mod bytes;
pub mod error;
pub mod entropy_model;
pub mod image_io;
pub mod metrics;
pub mod model_file;
pub mod network;
pub mod numerics;
pub mod pipeline;
pub mod range_coder;
pub mod training;

pub use error::{Error, Result};
