//! Neural fields from a multiresolution hash-grid encoder and a single-layer
//! Gaussian radial basis decoder.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod grid;
pub mod image;
pub mod model;
pub mod numerics;
pub mod par;
pub mod pipeline;
pub mod radiance;
pub mod rbf;
pub mod sdf;
pub mod training;

pub use error::{Error, Result};
