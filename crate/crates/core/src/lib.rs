//! Shared-codebook product quantization of user-behavior embeddings.
//!
//! The pipeline: a balanced k-means initialized prototype codebook shared by
//! every subspace ([`balanced_kmeans`], [`quantizer`]), trained with
//! quantization, diversity and usage losses ([`pcc`]); an MLP adapter aligned
//! against a frozen decoder ([`pba`]); utilization metrics ([`metrics`]);
//! bit-exact file formats ([`codec_io`]); and an edge-to-cloud index-stream
//! protocol ([`edge_protocol`]).

pub mod balanced_kmeans;
pub mod cli;
pub mod codec_io;
pub mod edge_protocol;
pub mod error;
pub mod metrics;
pub mod pba;
pub mod pcc;
pub mod quantizer;
pub mod types;

pub use error::{CurpError, Result};
pub use types::{
    generate_mixture_pool, split_subspaces, validate_spec, Codebook, CodebookSpec, EmbeddingPool, MixturePool, PQCode,
    PccConfig, UserRecord,
};
