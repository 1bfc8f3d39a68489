//! Embedding-space toolkit for local adaptation of recognition models.
//!
//! The pipeline: build a K-NN affinity graph over a domain's embeddings,
//! predict per-vertex confidences with a meta-trained GCN, turn confidences
//! into pseudo identity labels, adapt a pre-trained backbone to the domain
//! with regularized center transfer, and optionally aggregate adapted
//! backbones across clients with partial federated averaging.

pub mod cluster;
mod container;
pub mod data;
pub mod error;
pub mod federated;
pub mod gcn;
pub mod graph;
pub mod linalg;
pub mod meta;
pub mod params;
pub mod recognition;
pub mod rng;
mod tape;

pub use error::{LafrError, Result};
pub use params::ParamVector;
