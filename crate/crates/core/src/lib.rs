//! Multi-context synthetic image-text data: caption corpora, embeddings,
//! similarity groups and greedy cover, LLM selection and summarization,
//! generation manifests, GenT corpus generation and caption metrics.
//!
//! Numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision used by the command-line tool.

pub mod binfile;
pub mod corpus;
pub mod corpusgen;
pub mod embed;
pub mod group;
pub mod hashing;
pub mod llm;
pub mod metrics;
pub mod scalar;
pub mod store;
pub mod synth;

pub use scalar::Scalar;

pub type EmbeddingVector = embed::Embedding<f32>;
pub type EmbeddingMatrix = embed::EmbeddingTable<f32>;
pub type Group = group::ScoredGroup<f32>;
pub type ImageIndex = synth::ImageIndex<f32>;

pub type EmbeddingVector64 = embed::Embedding<f64>;
pub type EmbeddingMatrix64 = embed::EmbeddingTable<f64>;
pub type Group64 = group::ScoredGroup<f64>;
pub type ImageIndex64 = synth::ImageIndex<f64>;
