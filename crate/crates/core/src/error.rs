use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CurpError>;

#[derive(Debug, Error)]
pub enum CurpError {
    #[error("dimension {dim} is not divisible by {subspaces} subspaces")]
    DimNotDivisible { dim: usize, subspaces: usize },

    #[error("vocabulary size {0} is too small (need at least 2 entries)")]
    VocabTooSmall(usize),

    #[error("invalid codebook spec: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("too few points: {points} points for {clusters} clusters")]
    TooFewPoints { points: usize, clusters: usize },

    #[error("index {index} out of range for vocabulary of {bound}")]
    IndexOutOfRange { index: u64, bound: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty embedding pool")]
    EmptyPool,

    #[error("record has no response tokens")]
    EmptyResponse,

    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("row {0} is a zero vector")]
    ZeroVector(usize),

    #[error("need at least 2 rows, got {0}")]
    TooFewRows(usize),

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("crc mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },

    #[error("input truncated")]
    Truncated,

    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),

    #[error("inconsistent codebook header: dim {dim} != {subspaces} x {sub_dim}")]
    SpecInconsistent {
        dim: usize,
        subspaces: usize,
        sub_dim: usize,
    },

    #[error("unknown frame type {0:#04x}")]
    UnknownFrameType(u8),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("codebook mismatch: local {local:#010x}, remote {remote:#010x}")]
    CodebookMismatch { local: u32, remote: u32 },

    #[error("reconstruction mismatch: local {local:#010x}, remote {remote:#010x}")]
    ReconstructionMismatch { local: u32, remote: u32 },

    #[error("connection closed")]
    ConnectionClosed,

    #[error(transparent)]
    Io(#[from] io::Error),
}
