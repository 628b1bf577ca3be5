//! Multimodal spatial-temporal prediction: semantic text and trend-image
//! views of environmental records, sparse mixture-of-experts imputation of
//! missing features, and fusion through a frozen decoder.

pub mod autodiff;
pub mod gradcheck;
pub mod tensor;

pub use autodiff::{Gradients, Graph, Segment, Var};
pub use tensor::{Tensor, TensorError};
pub mod dataset;
pub mod textual;
pub mod params;
pub mod raster;
pub mod encoders;
pub mod fusion;
pub mod smoe;
pub mod model;
pub mod optim;
pub mod train;
pub mod checkpoint;
pub mod config;
pub mod protocols;
pub mod cli;
