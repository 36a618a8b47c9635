//! Multi-label query classification over a label taxonomy.
//!
//! A single shared text encoder embeds queries, label names with their side
//! information, and free-text knowledge records. Label embeddings are refined
//! by a two-layer GCN over a fused co-occurrence / similarity / hierarchy graph,
//! and queries are scored against the resulting leaf embeddings. Training mixes
//! click targets with soft pseudo-labels from knowledge-fused cosine similarity.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used by the CLI and the file formats.

pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod knowledge;
pub mod scalar;
pub mod serving;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::{MetricScalar, Scalar};

/// Double-precision model state (the checkpoint and cache precision).
pub type Model = trainer::ModelState<f64>;
pub type Model32 = trainer::ModelState<f32>;
pub type Graph = graph::GraphBundle<f64>;
pub type Cache = serving::LeafCache<f64>;
pub type Encoder = encoder::EncoderParams<f64>;
pub type Adam = trainer::AdamState<f64>;
pub type Report = eval::MetricsReport<f64>;
/// Metrics in exact rational arithmetic.
pub type ExactReport = eval::MetricsReport<num_rational::Rational64>;
