//! Cross-laterality feature alignment pre-training and self-attention
//! camera adaptation for paired-camera regression models.

pub mod adaptor;
pub mod augment;
pub mod backbone;
pub mod checkpoint;
pub mod clfa;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod seed;
pub mod synthdata;

pub use error::{Error, Result};
