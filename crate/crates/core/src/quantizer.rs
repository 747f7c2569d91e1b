//! Product quantization against the shared codebook.

use crate::error::{CurpError, Result};
use crate::types::{split_subspaces, squared_distance, Codebook, EmbeddingPool, PQCode};

/// Nearest codebook entry to `sub` by squared Euclidean distance, lowest
/// index on ties.
pub fn quantize_subvector(sub: &[f64], cb: &Codebook) -> Result<(usize, f64)> {
    if sub.len() != cb.sub_dim() {
        return Err(CurpError::DimMismatch {
            expected: cb.sub_dim(),
            got: sub.len(),
        });
    }
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, entry) in cb.rows().enumerate() {
        let d = squared_distance(sub, entry);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    Ok((best, best_d))
}

/// Encodes `e` and also returns its squared reconstruction error (the sum of
/// the per-subspace minimum distances).
pub fn encode_with_error(e: &[f64], cb: &Codebook) -> Result<(PQCode, f64)> {
    let parts = split_subspaces(e, cb.spec())?;
    let mut indices = Vec::with_capacity(parts.len());
    let mut err = 0.0;
    for sub in parts {
        let (k, d) = quantize_subvector(sub, cb)?;
        indices.push(k as u32);
        err += d;
    }
    Ok((PQCode::from_indices_unchecked(indices), err))
}

pub fn encode_pq(e: &[f64], cb: &Codebook) -> Result<PQCode> {
    Ok(encode_with_error(e, cb)?.0)
}

/// Concatenates the selected entries back into a `dim`-vector.
pub fn reconstruct(code: &PQCode, cb: &Codebook) -> Result<Vec<f64>> {
    code.validate(cb.spec())?;
    let mut out = Vec::with_capacity(cb.spec().dim());
    for &k in code.indices() {
        out.extend_from_slice(cb.entry(k as usize));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchEncoding {
    pub codes: Vec<PQCode>,
    /// Mean squared reconstruction error over rows; 0 for an empty pool.
    pub mean_error: f64,
}

pub fn encode_batch(pool: &EmbeddingPool, cb: &Codebook) -> Result<BatchEncoding> {
    pool.check_spec(cb.spec())?;
    let mut codes = Vec::with_capacity(pool.count());
    let mut total = 0.0;
    for row in pool.rows() {
        let (code, err) = encode_with_error(row, cb)?;
        codes.push(code);
        total += err;
    }
    let mean_error = if codes.is_empty() { 0.0 } else { total / codes.len() as f64 };
    Ok(BatchEncoding { codes, mean_error })
}

/// Reconstructs every code into a pool of quantized embeddings.
pub fn reconstruct_batch(codes: &[PQCode], cb: &Codebook) -> Result<EmbeddingPool> {
    let dim = cb.spec().dim();
    let mut data = Vec::with_capacity(codes.len() * dim);
    for code in codes {
        data.extend(reconstruct(code, cb)?);
    }
    EmbeddingPool::new(codes.len(), dim, data)
}

/// How history embeddings reach the adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantizeMode {
    /// Encode through the codebook and hand over the reconstruction.
    Quantized,
    /// Skip the codebook and hand over the raw embedding ("w/o cb" ablation).
    Passthrough,
}

/// Maps a pool to what the downstream consumer sees under `mode`.
pub fn project_batch(pool: &EmbeddingPool, cb: &Codebook, mode: QuantizeMode) -> Result<EmbeddingPool> {
    pool.check_spec(cb.spec())?;
    match mode {
        QuantizeMode::Passthrough => Ok(pool.clone()),
        QuantizeMode::Quantized => reconstruct_batch(&encode_batch(pool, cb)?.codes, cb),
    }
}
