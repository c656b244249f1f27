//! Weakly-supervised discovery of object parts from image-level class labels.
//!
//! The model pools a CNN feature map through K+1 prototype attention maps and
//! classifies from the modulated part vectors, trained with a classification
//! loss plus compactness, orthogonality, equivariance and presence priors.
//! Everything runs on a small self-contained f64 autodiff engine, and a
//! procedural glyph dataset with exact part annotations makes the discovered
//! parts measurable (NMI / ARI / keypoint regression).

pub mod autodiff;
pub mod commands;
pub mod config;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod synthgen;
pub mod trainer;
pub mod tensor;
pub mod transforms;

pub use error::{Error, Result};
pub use tensor::Tensor;
