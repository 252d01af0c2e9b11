//! Synthetic sonar training-image generation.
//!
//! Simulator depth images become noisy colormapped base images, a StyleBank
//! network restyles them into one or more target sonar environments, and the
//! results are augmented into detector-ready datasets. Style fidelity and
//! detection quality can be evaluated with the same crate.

pub mod basegen;
pub mod checkpoint;
pub mod config;
pub mod detecteval;
pub mod error;
pub mod featurenet;
pub mod image;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod stylebank;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use image::{BoundingBox, DatasetManifest, Image};
pub use tensor::FeatureMap;
