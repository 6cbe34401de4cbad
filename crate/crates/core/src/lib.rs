//! Semi-supervised hyperspectral image classification with a pixel-level
//! similarity graph and a graph-weighted contrastive objective.
//!
//! The pipeline: load a cube and its ground truth ([`data`]), reduce spectra
//! and append normalized coordinates ([`features`]), build a sparse K-NN
//! similarity graph ([`graph`]), train a small MLP in two stages
//! ([`trainer`], [`net`], [`objective`]) and score it ([`metrics`]).
//! [`pipeline`] wires the stages together and handles repetitions.
//!
//! Interchangeable pieces are looked up by name through [`registry`]:
//! neighbour-search backends, spectral reducers, activations, optimizers
//! and pair weightings.

pub mod config;
pub mod data;
pub mod error;
pub mod features;
pub mod graph;
pub mod metrics;
pub mod net;
pub mod objective;
pub mod optim;
pub mod pipeline;
pub mod rawio;
pub mod registry;
pub mod rng;
pub mod trainer;

pub use config::TrainConfig;
pub use error::{GwclError, Result};
