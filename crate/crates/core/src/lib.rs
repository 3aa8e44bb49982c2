//! Filter pruning for convolutional networks guided by feature-map
//! similarity.
//!
//! The pipeline: load a [`model::Model`], sample a [`dataset::ProbeSet`],
//! capture each block's feature maps, score filter pairs with
//! [`similarity`], break ties with an [`auxiliary`] statistic, delete
//! channels with [`pruner`] and report costs with [`metrics`].

pub mod auxiliary;
pub mod dataset;
mod error;
pub mod fixtures;
pub mod inference;
pub mod metrics;
pub mod model;
mod probe;
pub mod pruner;
pub mod similarity;
pub mod tensor;

pub use error::{Error, Result};
