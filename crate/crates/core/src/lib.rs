//! One-shot additive artifact reduction for 2-D grayscale images.
//!
//! A single image plus a handful of labelled 32x32 ROIs is enough to train
//! a patch classifier, synthesize dirty/clean training pairs from the
//! image's own artifact patterns, train an attention-supervised
//! autoencoder on them, and run it over the full image.

pub mod aarn;
pub mod error;
pub mod idsn;
pub mod image_io;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Rng, Tensor};
