//! Few-shot semantic segmentation with a prototype-as-Query transformer
//! decoder, built on a from-scratch reverse-mode autodiff tensor engine.
//!
//! The pipeline: a small shared-weight CNN backbone extracts mid- and
//! high-level features; support features are pooled into a class prototype;
//! a training-free prior mask scores query/support affinity; a pixel decoder
//! fuses and enriches query features; and a transformer decoder turns the
//! prototype into a mask embedding that is dotted against the pixel
//! embeddings to predict the segmentation mask.

pub mod backbone;
pub mod config;
pub mod cost;
pub mod data;
pub mod decoder;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod par;
pub mod params;
pub mod pixel_decoder;
pub mod protoprior;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
