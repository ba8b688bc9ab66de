//! Concept-level causal effect estimation for black-box predictors.
//!
//! The crate simulates data-generating processes with known ground truth,
//! approximates counterfactuals by generation or by learned-embedding
//! matching, estimates individual and average concept effects, and audits
//! explanation methods for order-faithfulness.

// `!(x > 0.0)` style checks are deliberate: they reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod concept;
pub mod confound;
pub mod data;
pub mod effect;
pub mod encoder;
pub mod estimate;
pub mod eval;
pub mod experiment;
pub mod fixtures;
pub mod graph;
pub mod matching;
pub mod model;
pub mod provider;
pub mod quads;
pub mod rng;
pub mod scm;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] graph::GraphError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Scm(#[from] scm::ScmError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Provider(#[from] provider::ProviderError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Sizes the global worker pool used by parallel stages. Call once, before
/// any parallel work.
pub fn set_threads(n: usize) -> std::result::Result<(), String> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}
