//! Graph neural networks trained with a graph smoothness loss, plus the
//! label-diffusion solver that the smoothness objective reduces to.
//!
//! The pipeline is: load a [`data::LabeledDataset`], draw [`data::Split`]s,
//! build a [`models::Model`], and fit it with [`trainer::train`] under a
//! [`losses::LossConfig`]. [`diffusion::propagate_labels`] classifies nodes
//! without any learned parameters.

pub mod autodiff;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod linalg;
pub mod losses;
pub mod models;
pub mod trainer;

pub use error::{Error, Result};
