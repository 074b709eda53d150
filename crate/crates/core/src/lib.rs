//! Self-supervised pretraining of histology tile encoders with a momentum
//! contrast objective over two augmentation families, plus the linear-probe
//! and clustering evaluation used to measure cross-domain transfer.

pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod image;
pub mod loss;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pretrain;
pub mod probe;
pub mod seed;

pub use error::{Error, Result};
