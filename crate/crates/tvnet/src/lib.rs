//! Referring image segmentation on a synthetic shapes corpus.
//!
//! The pipeline retrieves related images for each query, enriches the query's
//! visual features with cross-image attention, fuses them with an encoded
//! referring expression across several resolutions, and decodes a mask at
//! twice the coarse feature resolution. Everything runs on the CPU with
//! hand-derived gradients; `f64` variants of each layer back the finite
//! difference checks in the unit tests.

pub mod checkpoint;
pub mod config;
pub mod crossmodal;
pub mod data;
pub mod encoders;
pub mod enrich;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod multires;
pub mod ops;
pub mod plot;
pub mod retrieval;
pub mod rng;
pub mod synth;
pub mod train;
pub mod tensor;

pub use config::Config;
pub use error::{Error, Result};
pub use tensor::{Param, Real, Tensor};
