//! Geometry-token fusion for spatial reasoning: additive and QFormer-style
//! baselines, relevance-guided masking of vision tokens, gated
//! geometry/vision fusion, and everything needed to train and verify them
//! at toy scale.

pub mod attention;
pub mod error;
pub mod fusion;
pub mod masking;
pub mod params;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::{Graph, NodeId, NumericsConfig, Tensor};
