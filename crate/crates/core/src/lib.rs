//! Desk-scale GAN training with a dynamically masked discriminator.
//!
//! The discriminator periodically checks whether masking one of its layers'
//! inputs still changes that layer's response. When masked and unmasked
//! features are nearly collinear the discriminator is treated as retarded and
//! trained under a fixed feature mask for the following interval.

pub mod analytics;
pub mod svg;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod gan;
pub mod nn;
pub mod report;
pub mod run;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
