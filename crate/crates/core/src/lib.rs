//! Semi-supervised segmentation with dual image-level perturbation streams,
//! bottleneck feature perturbations and confidence-masked self-distillation.

pub mod ablation;
pub mod augment;
pub mod datasets;
pub mod error;
pub mod featperturb;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod plot;
pub mod raster;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
