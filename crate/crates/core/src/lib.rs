//! Background-replacement training variants and activation-maximization
//! feature visualization for small residual image classifiers.
//!
//! The pipeline: segmented images ([`dataset`]) are turned into four
//! training sets ([`transforms`]), identical ResNet-style classifiers
//! ([`model`]) are trained on each ([`training`]), and class-logit
//! visualizations are synthesized from every model ([`featviz`]) and laid out
//! as comparison grids ([`report`], [`experiment`]).

pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod featviz;
pub mod model;
pub mod pnm;
pub mod report;
pub mod seed;
pub mod tensor;
pub mod training;
pub mod transforms;

pub use error::{Error, Result};
pub use tensor::Tensor;
