//! Mesh sequencing, a face-token variational autoencoder and a rectified-flow
//! transformer over its latents, with point-cloud evaluation metrics.

pub mod autoencoder;
mod binio;
pub mod checkpoint;
pub mod dit;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod kv;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod spatial;

pub use error::{Error, Result};
