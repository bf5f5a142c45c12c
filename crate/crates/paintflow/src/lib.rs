//! paintflow: a desk-scale bidirectional pixel-space generative model.
//!
//! Captions live on the canvas: text is painted onto raster images with a
//! fixed bitmap font, and a single rectified-flow transformer learns both
//! image -> painted-caption and painted-caption -> image as opposite
//! directions of one translation, selected by a learnable task embedding.

pub mod backbone;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod dataset;
pub mod error;
pub mod flow;
pub mod font;
pub mod graph;
pub mod hash;
pub mod image;
pub mod kernels;
pub mod nn;
pub mod painted;
pub mod pipelines;
pub mod rng;
pub mod scene;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
