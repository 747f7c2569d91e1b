//! Binary file formats and the packed index stream.
//!
//! Every file is `magic (8 bytes) | body | u32 LE CRC-32 of body`. All
//! integers are little-endian `u32`, all reals little-endian IEEE-754 `f32`.
//!
//! | file       | magic      | body                                                         |
//! |------------|------------|--------------------------------------------------------------|
//! | pool       | `CURPEMB1` | count, dim, count*dim reals                                  |
//! | codebook   | `CURPCBK1` | K, L, sub_dim, dim, K*sub_dim reals                          |
//! | indices    | `CURPIDX1` | K, L, count, codebook CRC, packed index stream               |
//! | records    | `CURPREC1` | users, dim, then per user: id len, id UTF-8, J, J*dim reals, |
//! |            |            | query len, query ids, response len, response ids             |
//! | adapter    | `CURPADP1` | input dim, hidden, w1, b1, w2, b2                            |
//!
//! In-memory values are `f64`; writing narrows them to `f32`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{CurpError, Result};
use crate::pba::AdapterParams;
use crate::types::{Codebook, CodebookSpec, EmbeddingPool, PQCode, UserRecord};

pub const POOL_MAGIC: &[u8; 8] = b"CURPEMB1";
pub const CODEBOOK_MAGIC: &[u8; 8] = b"CURPCBK1";
pub const INDEX_MAGIC: &[u8; 8] = b"CURPIDX1";
pub const RECORDS_MAGIC: &[u8; 8] = b"CURPREC1";
pub const ADAPTER_MAGIC: &[u8; 8] = b"CURPADP1";

pub fn crc32(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: &[u8; 8]) -> Self {
        Writer { buf: magic.to_vec() }
    }

    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| CurpError::InvalidConfig(format!("{v} does not fit in u32")))?;
        self.buf.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn reals(&mut self, values: &[f64]) {
        for &v in values {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    fn finish(mut self) -> Vec<u8> {
        let crc = crc32(&self.buf[8..]);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

struct Reader<'a> {
    body: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Validates magic and trailing CRC and positions at the body start.
    fn open(bytes: &'a [u8], magic: &'static [u8; 8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(CurpError::Truncated);
        }
        if &bytes[..8] != magic {
            return Err(CurpError::BadMagic {
                expected: std::str::from_utf8(magic).unwrap_or("?"),
            });
        }
        if bytes.len() < 12 {
            return Err(CurpError::Truncated);
        }
        let (body, tail) = bytes[8..].split_at(bytes.len() - 12);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32(body);
        if stored != computed {
            return Err(CurpError::CrcMismatch { stored, computed });
        }
        Ok(Reader { body, pos: 0 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(CurpError::Truncated)?;
        if end > self.body.len() {
            return Err(CurpError::Truncated);
        }
        let s = &self.body[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn reals(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or(CurpError::Truncated)?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.body[self.pos..];
        self.pos = self.body.len();
        s
    }

    fn finish(self) -> Result<()> {
        match self.body.len() - self.pos {
            0 => Ok(()),
            n => Err(CurpError::TrailingBytes(n)),
        }
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`, so a
/// failed write never leaves a partial file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| CurpError::InvalidConfig(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn encode_pool(pool: &EmbeddingPool) -> Result<Vec<u8>> {
    let mut w = Writer::new(POOL_MAGIC);
    w.u32(pool.count())?;
    w.u32(pool.dim())?;
    w.reals(pool.data());
    Ok(w.finish())
}

pub fn decode_pool(bytes: &[u8]) -> Result<EmbeddingPool> {
    let mut r = Reader::open(bytes, POOL_MAGIC)?;
    let count = r.u32()?;
    let dim = r.u32()?;
    let data = r.reals(count.checked_mul(dim).ok_or(CurpError::Truncated)?)?;
    r.finish()?;
    EmbeddingPool::new(count, dim, data)
}

pub fn write_pool(path: &Path, pool: &EmbeddingPool) -> Result<()> {
    write_atomic(path, &encode_pool(pool)?)
}

pub fn read_pool(path: &Path) -> Result<EmbeddingPool> {
    decode_pool(&fs::read(path)?)
}

pub fn encode_codebook(cb: &Codebook) -> Result<Vec<u8>> {
    let spec = cb.spec();
    let mut w = Writer::new(CODEBOOK_MAGIC);
    w.u32(spec.vocab_size())?;
    w.u32(spec.num_subspaces())?;
    w.u32(spec.sub_dim())?;
    w.u32(spec.dim())?;
    w.reals(cb.entries());
    Ok(w.finish())
}

pub fn decode_codebook(bytes: &[u8]) -> Result<Codebook> {
    let mut r = Reader::open(bytes, CODEBOOK_MAGIC)?;
    let k = r.u32()?;
    let l = r.u32()?;
    let sub_dim = r.u32()?;
    let dim = r.u32()?;
    if l.checked_mul(sub_dim) != Some(dim) {
        return Err(CurpError::SpecInconsistent {
            dim,
            subspaces: l,
            sub_dim,
        });
    }
    let spec = CodebookSpec::new(dim, l, k)?;
    let entries = r.reals(k.checked_mul(sub_dim).ok_or(CurpError::Truncated)?)?;
    r.finish()?;
    Codebook::new(spec, entries)
}

pub fn write_codebook(path: &Path, cb: &Codebook) -> Result<()> {
    write_atomic(path, &encode_codebook(cb)?)
}

pub fn read_codebook(path: &Path) -> Result<Codebook> {
    decode_codebook(&fs::read(path)?)
}

/// Codebook identity: the CRC stored in its file encoding.
pub fn codebook_crc(cb: &Codebook) -> Result<u32> {
    let bytes = encode_codebook(cb)?;
    Ok(u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes")))
}

/// `ceil(log2 K)`: the width of one packed index.
pub fn bits_per_index(vocab_size: usize) -> u32 {
    debug_assert!(vocab_size >= 2);
    usize::BITS - (vocab_size - 1).leading_zeros()
}

pub fn packed_len(count: usize, spec: &CodebookSpec) -> usize {
    (count * spec.num_subspaces() * bits_per_index(spec.vocab_size()) as usize).div_ceil(8)
}

/// Packs codes event-major then subspace-major, each index as a big-endian
/// `ceil(log2 K)`-bit field, MSB first; the last byte is zero-padded.
pub fn pack_indices(codes: &[PQCode], spec: &CodebookSpec) -> Result<Vec<u8>> {
    let bits = bits_per_index(spec.vocab_size());
    let mut out = vec![0u8; packed_len(codes.len(), spec)];
    let mut pos = 0usize;
    for code in codes {
        code.validate(spec)?;
        for &idx in code.indices() {
            for b in (0..bits).rev() {
                if (idx >> b) & 1 == 1 {
                    out[pos / 8] |= 0x80 >> (pos % 8);
                }
                pos += 1;
            }
        }
    }
    Ok(out)
}

pub fn unpack_indices(bytes: &[u8], spec: &CodebookSpec, count: usize) -> Result<Vec<PQCode>> {
    let need = packed_len(count, spec);
    if bytes.len() < need {
        return Err(CurpError::Truncated);
    }
    if bytes.len() > need {
        return Err(CurpError::TrailingBytes(bytes.len() - need));
    }
    let bits = bits_per_index(spec.vocab_size());
    let mut pos = 0usize;
    let mut codes = Vec::with_capacity(count);
    for _ in 0..count {
        let mut indices = Vec::with_capacity(spec.num_subspaces());
        for _ in 0..spec.num_subspaces() {
            let mut v = 0u32;
            for _ in 0..bits {
                v = (v << 1) | ((bytes[pos / 8] >> (7 - pos % 8)) & 1) as u32;
                pos += 1;
            }
            indices.push(v);
        }
        codes.push(PQCode::new(indices, spec)?);
    }
    Ok(codes)
}

/// Contents of an index file.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexFile {
    pub spec_vocab: usize,
    pub spec_subspaces: usize,
    pub codebook_crc: u32,
    pub codes: Vec<PQCode>,
}

pub fn encode_index_file(codes: &[PQCode], cb: &Codebook) -> Result<Vec<u8>> {
    let spec = cb.spec();
    let mut w = Writer::new(INDEX_MAGIC);
    w.u32(spec.vocab_size())?;
    w.u32(spec.num_subspaces())?;
    w.u32(codes.len())?;
    w.buf.extend_from_slice(&codebook_crc(cb)?.to_le_bytes());
    w.buf.extend(pack_indices(codes, spec)?);
    Ok(w.finish())
}

/// Decodes an index file against `cb`, rejecting files written for a
/// different codebook.
pub fn decode_index_file(bytes: &[u8], cb: &Codebook) -> Result<Vec<PQCode>> {
    let spec = cb.spec();
    let mut r = Reader::open(bytes, INDEX_MAGIC)?;
    let k = r.u32()?;
    let l = r.u32()?;
    let count = r.u32()?;
    let stored_crc = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    let local = codebook_crc(cb)?;
    if stored_crc != local || k != spec.vocab_size() || l != spec.num_subspaces() {
        return Err(CurpError::CodebookMismatch {
            local,
            remote: stored_crc,
        });
    }
    unpack_indices(r.rest(), spec, count)
}

pub fn encode_records(records: &[UserRecord], dim: usize) -> Result<Vec<u8>> {
    let mut w = Writer::new(RECORDS_MAGIC);
    w.u32(records.len())?;
    w.u32(dim)?;
    for rec in records {
        if rec.histories.dim() != dim {
            return Err(CurpError::DimMismatch {
                expected: dim,
                got: rec.histories.dim(),
            });
        }
        w.u32(rec.user_id.len())?;
        w.buf.extend_from_slice(rec.user_id.as_bytes());
        w.u32(rec.histories.count())?;
        w.reals(rec.histories.data());
        for tokens in [&rec.query_tokens, &rec.response_tokens] {
            w.u32(tokens.len())?;
            for &t in tokens.iter() {
                w.buf.extend_from_slice(&t.to_le_bytes());
            }
        }
    }
    Ok(w.finish())
}

pub fn decode_records(bytes: &[u8]) -> Result<(usize, Vec<UserRecord>)> {
    let mut r = Reader::open(bytes, RECORDS_MAGIC)?;
    let n = r.u32()?;
    let dim = r.u32()?;
    let mut records = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let id_len = r.u32()?;
        let user_id = String::from_utf8(r.take(id_len)?.to_vec())
            .map_err(|_| CurpError::InvalidConfig("user id is not UTF-8".into()))?;
        let j = r.u32()?;
        let data = r.reals(j.checked_mul(dim).ok_or(CurpError::Truncated)?)?;
        let histories = EmbeddingPool::new(j, dim, data)?;
        let mut tokens = [Vec::new(), Vec::new()];
        for t in tokens.iter_mut() {
            let len = r.u32()?;
            *t = r
                .take(len.checked_mul(4).ok_or(CurpError::Truncated)?)?
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
        }
        let [query_tokens, response_tokens] = tokens;
        records.push(UserRecord {
            user_id,
            histories,
            query_tokens,
            response_tokens,
        });
    }
    r.finish()?;
    Ok((dim, records))
}

pub fn encode_adapter(params: &AdapterParams) -> Result<Vec<u8>> {
    let mut w = Writer::new(ADAPTER_MAGIC);
    w.u32(params.input_dim())?;
    w.u32(params.hidden())?;
    w.reals(&params.w1);
    w.reals(&params.b1);
    w.reals(&params.w2);
    w.reals(&params.b2);
    Ok(w.finish())
}

pub fn decode_adapter(bytes: &[u8]) -> Result<AdapterParams> {
    let mut r = Reader::open(bytes, ADAPTER_MAGIC)?;
    let d = r.u32()?;
    let h = r.u32()?;
    let w1 = r.reals(d.checked_mul(h).ok_or(CurpError::Truncated)?)?;
    let b1 = r.reals(h)?;
    let w2 = r.reals(h.checked_mul(h).ok_or(CurpError::Truncated)?)?;
    let b2 = r.reals(h)?;
    r.finish()?;
    AdapterParams::from_parts(d, h, w1, b1, w2, b2)
}
