//! Plan-aware context compression for long-horizon tool-using agents.
//!
//! The numeric kernels (embeddings, similarity, statistics) are generic over
//! [`scalar::Scalar`]; the aliases below fix them to `f64` for the pipeline.

pub mod backends;
pub mod baselines;
pub mod config;
pub mod evolution;
pub mod executor;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod scalar;
pub mod scoring;
pub mod store;
pub mod supervision;
pub mod synth;
pub mod tokens;

pub type Real = f64;
pub type Embedding = backends::EmbeddingVector<Real>;
