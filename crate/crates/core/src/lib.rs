//! Multi-layer one-class anomaly detection on top of a convolutional
//! autoencoder: reconstruction pretraining, per-layer hypersphere
//! fine-tuning, layer-combined scoring and evaluation.

pub mod data;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod model;
pub mod objective;
pub mod scoring;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
