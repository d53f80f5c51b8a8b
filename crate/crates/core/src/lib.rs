//! Relation-aware GCN topology encoder and Transformer semantic encoder, fused
//! by residual self-attention, for fraud detection on multi-relation graphs.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod sparse;
pub mod train;

pub use error::{Error, Result};
