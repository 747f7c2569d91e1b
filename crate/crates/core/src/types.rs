//! Domain types shared by every stage of the pipeline, plus the seeded
//! synthetic embedding generator used in place of a real encoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CurpError, Result};

/// Shape of a shared product-quantization codebook.
///
/// A `dim`-dimensional embedding is split into `num_subspaces` slices of
/// `dim / num_subspaces` values, and every slice is matched against the same
/// table of `vocab_size` prototypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CodebookSpec {
    dim: usize,
    num_subspaces: usize,
    vocab_size: usize,
}

impl CodebookSpec {
    pub fn new(dim: usize, num_subspaces: usize, vocab_size: usize) -> Result<Self> {
        validate_spec(CodebookSpec {
            dim,
            num_subspaces,
            vocab_size,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_subspaces(&self) -> usize {
        self.num_subspaces
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn sub_dim(&self) -> usize {
        self.dim / self.num_subspaces
    }
}

/// Checks the spec invariants and hands the spec back unchanged.
pub fn validate_spec(spec: CodebookSpec) -> Result<CodebookSpec> {
    if spec.dim == 0 || spec.num_subspaces == 0 {
        return Err(CurpError::InvalidSpec(format!(
            "dim ({}) and subspaces ({}) must be positive",
            spec.dim, spec.num_subspaces
        )));
    }
    if spec.dim % spec.num_subspaces != 0 {
        return Err(CurpError::DimNotDivisible {
            dim: spec.dim,
            subspaces: spec.num_subspaces,
        });
    }
    if spec.vocab_size < 2 {
        return Err(CurpError::VocabTooSmall(spec.vocab_size));
    }
    if spec.vocab_size > u32::MAX as usize {
        return Err(CurpError::InvalidSpec(format!(
            "vocabulary of {} does not fit 32-bit indices",
            spec.vocab_size
        )));
    }
    Ok(spec)
}

/// The single prototype table shared by all subspaces, stored row-major
/// (`vocab_size` rows of `sub_dim` values).
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    spec: CodebookSpec,
    entries: Vec<f64>,
}

impl Codebook {
    pub fn new(spec: CodebookSpec, entries: Vec<f64>) -> Result<Self> {
        let expected = spec.vocab_size() * spec.sub_dim();
        if entries.len() != expected {
            return Err(CurpError::DimMismatch {
                expected,
                got: entries.len(),
            });
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(CurpError::NonFinite("codebook entries"));
        }
        Ok(Codebook { spec, entries })
    }

    pub fn spec(&self) -> &CodebookSpec {
        &self.spec
    }

    pub fn vocab_size(&self) -> usize {
        self.spec.vocab_size()
    }

    pub fn sub_dim(&self) -> usize {
        self.spec.sub_dim()
    }

    pub fn entry(&self, k: usize) -> &[f64] {
        let sd = self.sub_dim();
        &self.entries[k * sd..(k + 1) * sd]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Iterates over the prototype rows in index order.
    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.entries.chunks_exact(self.sub_dim())
    }

    /// Mutable access for optimizers. Callers are responsible for keeping
    /// values finite.
    pub(crate) fn entries_mut(&mut self) -> &mut [f64] {
        &mut self.entries
    }
}

/// `count` embeddings of dimension `dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPool {
    count: usize,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingPool {
    pub fn new(count: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(CurpError::InvalidSpec("pool dimension must be positive".into()));
        }
        if data.len() != count * dim {
            return Err(CurpError::DimMismatch {
                expected: count * dim,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CurpError::NonFinite("embedding pool"));
        }
        Ok(EmbeddingPool { count, dim, data })
    }

    pub fn empty(dim: usize) -> Result<Self> {
        EmbeddingPool::new(0, dim, Vec::new())
    }

    pub fn from_rows<R: AsRef<[f64]>>(dim: usize, rows: &[R]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(CurpError::DimMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        EmbeddingPool::new(rows.len(), dim, data)
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    /// Gathers the given rows, in order, into a new pool.
    pub fn select(&self, indices: &[usize]) -> EmbeddingPool {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        EmbeddingPool {
            count: indices.len(),
            dim: self.dim,
            data,
        }
    }

    pub fn check_spec(&self, spec: &CodebookSpec) -> Result<()> {
        if self.dim != spec.dim() {
            return Err(CurpError::DimMismatch {
                expected: spec.dim(),
                got: self.dim,
            });
        }
        Ok(())
    }

    /// All subspace slices of all rows, as an `(count * L) x sub_dim` matrix
    /// in row-then-subspace order.
    pub fn subspace_matrix(&self, spec: &CodebookSpec) -> Result<Vec<f64>> {
        self.check_spec(spec)?;
        // Row-major layout already lists slices in that order.
        Ok(self.data.clone())
    }
}

/// `L` discrete indices standing for one quantized embedding.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PQCode {
    indices: Vec<u32>,
}

impl PQCode {
    pub fn new(indices: Vec<u32>, spec: &CodebookSpec) -> Result<Self> {
        let code = PQCode { indices };
        code.validate(spec)?;
        Ok(code)
    }

    pub(crate) fn from_indices_unchecked(indices: Vec<u32>) -> Self {
        PQCode { indices }
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn validate(&self, spec: &CodebookSpec) -> Result<()> {
        if self.indices.len() != spec.num_subspaces() {
            return Err(CurpError::DimMismatch {
                expected: spec.num_subspaces(),
                got: self.indices.len(),
            });
        }
        for &idx in &self.indices {
            if idx as usize >= spec.vocab_size() {
                return Err(CurpError::IndexOutOfRange {
                    index: idx as u64,
                    bound: spec.vocab_size(),
                });
            }
        }
        Ok(())
    }
}

/// Hyperparameters for codebook training.
#[derive(Debug, Clone, PartialEq)]
pub struct PccConfig {
    pub lambda_quant: f64,
    pub lambda_div: f64,
    pub lambda_usage: f64,
    pub tau: f64,
    pub soft_count_temp: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub accum_steps: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for PccConfig {
    fn default() -> Self {
        PccConfig {
            lambda_quant: 1.0,
            lambda_div: 0.15,
            lambda_usage: 1.0,
            tau: 1.0,
            soft_count_temp: 1.0,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            grad_clip: 1.0,
            batch_size: 8,
            accum_steps: 4,
            epochs: 1,
            seed: 0,
        }
    }
}

impl PccConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_quant, self.lambda_div, self.lambda_usage];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(CurpError::InvalidConfig(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        check_positive("tau", self.tau)?;
        check_positive("soft_count_temp", self.soft_count_temp)?;
        check_positive("grad_clip", self.grad_clip)?;
        check_optimizer(self.learning_rate, self.weight_decay)?;
        check_counts(self.batch_size, self.accum_steps, self.epochs)
    }
}

pub(crate) fn check_positive(name: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(CurpError::InvalidConfig(format!("{name} must be positive, got {v}")));
    }
    Ok(())
}

pub(crate) fn check_optimizer(lr: f64, wd: f64) -> Result<()> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(CurpError::InvalidConfig(format!("learning rate must be >= 0, got {lr}")));
    }
    if !(wd.is_finite() && wd >= 0.0) {
        return Err(CurpError::InvalidConfig(format!("weight decay must be >= 0, got {wd}")));
    }
    Ok(())
}

pub(crate) fn check_counts(batch: usize, accum: usize, epochs: usize) -> Result<()> {
    if batch == 0 || accum == 0 || epochs == 0 {
        return Err(CurpError::InvalidConfig(
            "batch size, accumulation steps and epochs must be positive".into(),
        ));
    }
    Ok(())
}

/// One user: encoded histories, a query and the target response.
#[derive(Debug, Clone, PartialEq)]
pub struct UserRecord {
    pub user_id: String,
    pub histories: EmbeddingPool,
    pub query_tokens: Vec<u32>,
    pub response_tokens: Vec<u32>,
}

impl UserRecord {
    pub fn validate(&self, dim: usize, vocab: usize) -> Result<()> {
        if self.histories.is_empty() {
            return Err(CurpError::InvalidConfig(format!(
                "user {} has no histories",
                self.user_id
            )));
        }
        if self.histories.dim() != dim {
            return Err(CurpError::DimMismatch {
                expected: dim,
                got: self.histories.dim(),
            });
        }
        for &t in self.query_tokens.iter().chain(&self.response_tokens) {
            if t as usize >= vocab {
                return Err(CurpError::TokenOutOfRange { token: t, vocab });
            }
        }
        Ok(())
    }
}

/// Splits one embedding into its `L` consecutive subspace slices.
pub fn split_subspaces<'a>(e: &'a [f64], spec: &CodebookSpec) -> Result<Vec<&'a [f64]>> {
    if e.len() != spec.dim() {
        return Err(CurpError::DimMismatch {
            expected: spec.dim(),
            got: e.len(),
        });
    }
    Ok(e.chunks_exact(spec.sub_dim()).collect())
}

/// A synthetic pool together with the archetype that produced each row.
#[derive(Debug, Clone, PartialEq)]
pub struct MixturePool {
    pub pool: EmbeddingPool,
    pub labels: Vec<usize>,
    /// `n_archetypes x dim`, row-major.
    pub centers: Vec<f64>,
}

impl MixturePool {
    pub fn center(&self, archetype: usize) -> &[f64] {
        let d = self.pool.dim();
        &self.centers[archetype * d..(archetype + 1) * d]
    }
}

/// Draws `n_archetypes` centers uniformly in `[-1, 1]^dim` and emits
/// `points_per_archetype` noisy copies of each, archetype-major.
///
/// Every value is rounded to `f32` precision so the pool survives a trip
/// through the on-disk format unchanged.
pub fn generate_mixture_pool(
    seed: u64,
    n_archetypes: usize,
    points_per_archetype: usize,
    spec: &CodebookSpec,
    noise_sigma: f64,
) -> Result<MixturePool> {
    if n_archetypes == 0 {
        return Err(CurpError::InvalidConfig("need at least one archetype".into()));
    }
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return Err(CurpError::InvalidConfig(format!(
            "noise sigma must be >= 0, got {noise_sigma}"
        )));
    }
    let dim = spec.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<f64> = (0..n_archetypes * dim)
        .map(|_| to_f32_precision(rng.random_range(-1.0..=1.0)))
        .collect();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let count = n_archetypes * points_per_archetype;
    let mut data = Vec::with_capacity(count * dim);
    let mut labels = Vec::with_capacity(count);
    for a in 0..n_archetypes {
        let center = &centers[a * dim..(a + 1) * dim];
        for _ in 0..points_per_archetype {
            for &c in center {
                let z: f64 = normal.sample(&mut rng);
                data.push(to_f32_precision(c + noise_sigma * z));
            }
            labels.push(a);
        }
    }
    Ok(MixturePool {
        pool: EmbeddingPool::new(count, dim, data)?,
        labels,
        centers,
    })
}

pub(crate) fn to_f32_precision(v: f64) -> f64 {
    v as f32 as f64
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
