//! Adapter alignment against a frozen decoder.
//!
//! Each history is quantized through the frozen codebook, projected by a
//! two-layer GELU MLP into the decoder's hidden space, and the projections
//! are placed in front of the query tokens. Only the adapter is trained.
//!
//! The decoder is a deliberately small stand-in: the context at each
//! position is the mean of all input embeddings before it, and logits are a
//! fixed linear read-out of that context. It is causal, frozen, and cheap
//! enough to backpropagate by hand.

use std::cmp::Ordering;
use std::f64::consts::{PI, SQRT_2};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CurpError, Result};
use crate::pcc::clip_grad_norm;
use crate::quantizer::{encode_pq, reconstruct};
use crate::types::{check_counts, check_optimizer, check_positive, to_f32_precision, Codebook, EmbeddingPool, UserRecord};

pub const DEFAULT_HIDDEN: usize = 32;
pub const DEFAULT_MAX_HISTORIES: usize = 8;

/// Trainable two-layer MLP `out = w2^T gelu(w1^T x + b1) + b2`.
///
/// `w1` is `input_dim x hidden` and `w2` is `hidden x hidden`, both
/// row-major. The same struct doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    input_dim: usize,
    hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl AdapterParams {
    pub fn from_parts(
        input_dim: usize,
        hidden: usize,
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: Vec<f64>,
    ) -> Result<Self> {
        if input_dim == 0 || hidden == 0 {
            return Err(CurpError::InvalidConfig("adapter dimensions must be positive".into()));
        }
        let shapes = [
            (w1.len(), input_dim * hidden),
            (b1.len(), hidden),
            (w2.len(), hidden * hidden),
            (b2.len(), hidden),
        ];
        for (got, expected) in shapes {
            if got != expected {
                return Err(CurpError::DimMismatch { expected, got });
            }
        }
        let p = AdapterParams {
            input_dim,
            hidden,
            w1,
            b1,
            w2,
            b2,
        };
        if !p.is_finite() {
            return Err(CurpError::NonFinite("adapter parameters"));
        }
        Ok(p)
    }

    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        AdapterParams {
            input_dim,
            hidden,
            w1: vec![0.0; input_dim * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden * hidden],
            b2: vec![0.0; hidden],
        }
    }

    /// Uniform fan-in scaled weights, zero biases.
    pub fn init(input_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        let mut p = AdapterParams::zeros(input_dim, hidden);
        if input_dim == 0 || hidden == 0 {
            return Err(CurpError::InvalidConfig("adapter dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a1 = 1.0 / (input_dim as f64).sqrt();
        let a2 = 1.0 / (hidden as f64).sqrt();
        p.w1.iter_mut().for_each(|w| *w = rng.random_range(-a1..a1));
        p.w2.iter_mut().for_each(|w| *w = rng.random_range(-a2..a2));
        Ok(p)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn tensors(&self) -> [&Vec<f64>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().into_iter().flatten().copied().collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn add_scaled(&mut self, other: &AdapterParams, scale: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2))
}

/// `x * Phi(x)` with the exact Gaussian CDF.
pub fn gelu(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    std_normal_cdf(x) + x * (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Activations kept from the forward pass.
#[derive(Debug, Clone)]
pub struct AdapterCache {
    pre: Vec<f64>,
    act: Vec<f64>,
}

pub fn adapter_forward(q_emb: &[f64], params: &AdapterParams) -> Result<(Vec<f64>, AdapterCache)> {
    if q_emb.len() != params.input_dim {
        return Err(CurpError::DimMismatch {
            expected: params.input_dim,
            got: q_emb.len(),
        });
    }
    let h = params.hidden;
    let mut pre = params.b1.clone();
    for (i, &x) in q_emb.iter().enumerate() {
        let row = &params.w1[i * h..(i + 1) * h];
        for (p, w) in pre.iter_mut().zip(row) {
            *p += w * x;
        }
    }
    let act: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
    let mut out = params.b2.clone();
    for (k, &a) in act.iter().enumerate() {
        let row = &params.w2[k * h..(k + 1) * h];
        for (o, w) in out.iter_mut().zip(row) {
            *o += w * a;
        }
    }
    Ok((out, AdapterCache { pre, act }))
}

/// Accumulates the parameter gradient of `dout . out` into `grad` and
/// returns the gradient with respect to the input.
pub fn adapter_backward(
    q_emb: &[f64],
    cache: &AdapterCache,
    dout: &[f64],
    params: &AdapterParams,
    grad: &mut AdapterParams,
) -> Vec<f64> {
    let h = params.hidden;
    for (g, d) in grad.b2.iter_mut().zip(dout) {
        *g += d;
    }
    let mut dact = vec![0.0; h];
    for k in 0..h {
        let a = cache.act[k];
        let wrow = &params.w2[k * h..(k + 1) * h];
        let grow = &mut grad.w2[k * h..(k + 1) * h];
        let mut s = 0.0;
        for j in 0..h {
            grow[j] += a * dout[j];
            s += wrow[j] * dout[j];
        }
        dact[k] = s;
    }
    let dpre: Vec<f64> = dact.iter().zip(&cache.pre).map(|(d, &p)| d * gelu_grad(p)).collect();
    for (g, d) in grad.b1.iter_mut().zip(&dpre) {
        *g += d;
    }
    let mut dq = vec![0.0; params.input_dim];
    for (i, &x) in q_emb.iter().enumerate() {
        let wrow = &params.w1[i * h..(i + 1) * h];
        let grow = &mut grad.w1[i * h..(i + 1) * h];
        let mut s = 0.0;
        for k in 0..h {
            grow[k] += x * dpre[k];
            s += wrow[k] * dpre[k];
        }
        dq[i] = s;
    }
    dq
}

/// Frozen stand-in decoder. Parameters depend only on `(vocab, hidden, seed)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDecoder {
    vocab: usize,
    hidden: usize,
    seed: u64,
    /// `vocab x hidden` input embedding table.
    token_table: Vec<f64>,
    /// `hidden x vocab` read-out.
    out_proj: Vec<f64>,
}

impl ToyDecoder {
    pub fn new(vocab: usize, hidden: usize, seed: u64) -> Result<Self> {
        if vocab == 0 || hidden == 0 {
            return Err(CurpError::InvalidConfig("decoder dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let token_table = (0..vocab * hidden).map(|_| rng.random_range(-0.5..=0.5)).collect();
        let out_proj = (0..hidden * vocab).map(|_| rng.random_range(-0.5..=0.5)).collect();
        Ok(ToyDecoder {
            vocab,
            hidden,
            seed,
            token_table,
            out_proj,
        })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn embed(&self, token: u32) -> &[f64] {
        let t = token as usize;
        &self.token_table[t * self.hidden..(t + 1) * self.hidden]
    }

    #[cfg(test)]
    pub(crate) fn out_proj_mut(&mut self) -> &mut Vec<f64> {
        &mut self.out_proj
    }

    fn logits(&self, ctx: &[f64]) -> Vec<f64> {
        let v = self.vocab;
        let mut out = vec![0.0; v];
        for (h, &c) in ctx.iter().enumerate() {
            let row = &self.out_proj[h * v..(h + 1) * v];
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * c;
            }
        }
        out
    }

    /// `out_proj . dlogits`: gradient of the context from logit gradients.
    fn ctx_grad(&self, dlogits: &[f64]) -> Vec<f64> {
        let v = self.vocab;
        (0..self.hidden)
            .map(|h| self.out_proj[h * v..(h + 1) * v].iter().zip(dlogits).map(|(w, d)| w * d).sum())
            .collect()
    }
}

/// One training example laid out for the decoder: `J` prefix slots (the
/// adapter inputs), then the query, then the response.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderInput {
    /// `J` quantized (or passthrough) history embeddings, each of the
    /// adapter's input dimension.
    pub prefix: Vec<Vec<f64>>,
    pub query_tokens: Vec<u32>,
    pub response_tokens: Vec<u32>,
}

impl DecoderInput {
    /// 1-based position of the first response token.
    pub fn label_start(&self) -> usize {
        self.prefix.len() + self.query_tokens.len() + 1
    }

    /// Total sequence length.
    pub fn total_len(&self) -> usize {
        self.prefix.len() + self.query_tokens.len() + self.response_tokens.len()
    }

    fn check(&self, decoder: &ToyDecoder) -> Result<()> {
        for &t in self.query_tokens.iter().chain(&self.response_tokens) {
            if t as usize >= decoder.vocab {
                return Err(CurpError::TokenOutOfRange {
                    token: t,
                    vocab: decoder.vocab,
                });
            }
        }
        Ok(())
    }
}

struct Forward {
    prefix: Vec<(Vec<f64>, AdapterCache)>,
    /// Prefix slot indices in the order they were summed.
    order: Vec<usize>,
    logits: Vec<Vec<f64>>,
}

fn forward(input: &DecoderInput, decoder: &ToyDecoder, params: &AdapterParams) -> Result<Forward> {
    input.check(decoder)?;
    if params.hidden != decoder.hidden {
        return Err(CurpError::DimMismatch {
            expected: decoder.hidden,
            got: params.hidden,
        });
    }
    let prefix = input
        .prefix
        .iter()
        .map(|q| adapter_forward(q, params))
        .collect::<Result<Vec<_>>>()?;

    // Sum prefix outputs in a canonical order so the result does not depend
    // on slot order, down to the last bit.
    let mut order: Vec<usize> = (0..prefix.len()).collect();
    order.sort_by(|&a, &b| {
        prefix[a]
            .0
            .iter()
            .zip(&prefix[b].0)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    let mut running = vec![0.0; decoder.hidden];
    for &j in &order {
        for (r, v) in running.iter_mut().zip(&prefix[j].0) {
            *r += v;
        }
    }
    for &t in &input.query_tokens {
        for (r, v) in running.iter_mut().zip(decoder.embed(t)) {
            *r += v;
        }
    }

    let mut count = input.prefix.len() + input.query_tokens.len();
    let mut logits = Vec::with_capacity(input.response_tokens.len());
    for &t in &input.response_tokens {
        let ctx: Vec<f64> = if count == 0 {
            vec![0.0; decoder.hidden]
        } else {
            running.iter().map(|r| r / count as f64).collect()
        };
        logits.push(decoder.logits(&ctx));
        for (r, v) in running.iter_mut().zip(decoder.embed(t)) {
            *r += v;
        }
        count += 1;
    }
    Ok(Forward { prefix, order, logits })
}

/// Logits for every response position (`label_start..=total_len`), each
/// predicted from the inputs strictly before it.
pub fn decoder_forward(input: &DecoderInput, decoder: &ToyDecoder, params: &AdapterParams) -> Result<Vec<Vec<f64>>> {
    Ok(forward(input, decoder, params)?.logits)
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Summed negative log-likelihood of the response and its gradient with
/// respect to the adapter parameters.
pub fn pba_loss(input: &DecoderInput, decoder: &ToyDecoder, params: &AdapterParams) -> Result<(f64, AdapterParams)> {
    if input.response_tokens.is_empty() {
        return Err(CurpError::EmptyResponse);
    }
    let fwd = forward(input, decoder, params)?;
    let base = input.prefix.len() + input.query_tokens.len();
    let mut loss = 0.0;
    let mut prefix_grad = vec![0.0; decoder.hidden];
    for (k, (logits, &target)) in fwd.logits.iter().zip(&input.response_tokens).enumerate() {
        let logp = log_softmax(logits);
        loss -= logp[target as usize];
        let count = base + k;
        if input.prefix.is_empty() || count == 0 {
            continue;
        }
        let mut dlogits: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        dlogits[target as usize] -= 1.0;
        // Every prefix slot sits in every context with weight 1/count.
        let dctx = decoder.ctx_grad(&dlogits);
        for (g, d) in prefix_grad.iter_mut().zip(&dctx) {
            *g += d / count as f64;
        }
    }
    let mut grad = AdapterParams::zeros(params.input_dim, params.hidden);
    for &j in &fwd.order {
        adapter_backward(&input.prefix[j], &fwd.prefix[j].1, &prefix_grad, params, &mut grad);
    }
    Ok((loss, grad))
}

/// What the adapter receives for each history.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrefixMode {
    /// Quantize through the frozen codebook and pass the reconstruction.
    Quantized,
    /// Pass the raw embedding ("w/o cb").
    Passthrough,
    /// No prefix at all (no personalization).
    Disabled,
}

/// Lays out one record for the decoder using its first `max_histories`
/// histories.
pub fn build_input(record: &UserRecord, cb: &Codebook, mode: PrefixMode, max_histories: usize) -> Result<DecoderInput> {
    record.histories.check_spec(cb.spec())?;
    let take = record.histories.count().min(max_histories);
    let prefix = match mode {
        PrefixMode::Disabled => Vec::new(),
        PrefixMode::Passthrough => (0..take).map(|j| record.histories.row(j).to_vec()).collect(),
        PrefixMode::Quantized => (0..take)
            .map(|j| reconstruct(&encode_pq(record.histories.row(j), cb)?, cb))
            .collect::<Result<_>>()?,
    };
    Ok(DecoderInput {
        prefix,
        query_tokens: record.query_tokens.clone(),
        response_tokens: record.response_tokens.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PbaConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub accum_steps: usize,
    pub epochs: usize,
    pub seed: u64,
    pub max_histories: usize,
    pub mode: PrefixMode,
}

impl Default for PbaConfig {
    fn default() -> Self {
        PbaConfig {
            hidden: DEFAULT_HIDDEN,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            grad_clip: 1.0,
            batch_size: 8,
            accum_steps: 4,
            epochs: 1,
            seed: 0,
            max_histories: DEFAULT_MAX_HISTORIES,
            mode: PrefixMode::Quantized,
        }
    }
}

impl PbaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(CurpError::InvalidConfig("hidden size must be positive".into()));
        }
        check_positive("grad_clip", self.grad_clip)?;
        check_optimizer(self.learning_rate, self.weight_decay)?;
        check_counts(self.batch_size, self.accum_steps, self.epochs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PbaStepReport {
    /// Mean over the step's records of the summed response NLL.
    pub mean_nll: f64,
    pub grad_norm_pre_clip: f64,
}

pub fn render_pba_log(log: &[PbaStepReport]) -> String {
    let mut out = String::from("step\tmean_nll\tgrad_norm\n");
    for (i, r) in log.iter().enumerate() {
        let _ = writeln!(out, "{i}\t{:.8e}\t{:.8e}", r.mean_nll, r.grad_norm_pre_clip);
    }
    out
}

#[derive(Debug, Clone)]
pub struct PbaRun {
    pub params: AdapterParams,
    pub log: Vec<PbaStepReport>,
}

/// Trains a freshly initialized adapter (seeded by `config.seed`). The
/// codebook and decoder are only read.
pub fn train_pba(records: &[UserRecord], cb: &Codebook, decoder: &ToyDecoder, config: &PbaConfig) -> Result<PbaRun> {
    config.validate()?;
    if config.hidden != decoder.hidden {
        return Err(CurpError::DimMismatch {
            expected: decoder.hidden,
            got: config.hidden,
        });
    }
    let inputs = records
        .iter()
        .map(|r| {
            r.validate(cb.spec().dim(), decoder.vocab)?;
            build_input(r, cb, config.mode, config.max_histories)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = AdapterParams::init(cb.spec().dim(), config.hidden, rng.random())?;
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut log = Vec::new();
    let decay = 1.0 - config.learning_rate * config.weight_decay;
    let per_step = config.batch_size * config.accum_steps;

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for group in order.chunks(per_step) {
            let n = group.len() as f64;
            let mut grad = AdapterParams::zeros(params.input_dim, params.hidden);
            let mut nll = 0.0;
            for &i in group {
                let (loss, g) = pba_loss(&inputs[i], decoder, &params)?;
                nll += loss;
                grad.add_scaled(&g, 1.0 / n);
            }
            let mut flat = grad.flatten();
            let norm = clip_grad_norm(&mut flat, config.grad_clip);
            let mut offset = 0;
            for (p, g) in params.tensors_mut().into_iter().zip(grad.tensors()) {
                let len = g.len();
                for (w, dg) in p.iter_mut().zip(&flat[offset..offset + len]) {
                    *w = *w * decay - config.learning_rate * dg;
                }
                offset += len;
            }
            if !params.is_finite() {
                return Err(CurpError::NonFinite("adapter after update"));
            }
            log.push(PbaStepReport {
                mean_nll: nll / n,
                grad_norm_pre_clip: norm,
            });
        }
    }
    Ok(PbaRun { params, log })
}

/// Mean summed-response NLL over `records`.
pub fn evaluate_pba(
    records: &[UserRecord],
    cb: &Codebook,
    decoder: &ToyDecoder,
    params: &AdapterParams,
    mode: PrefixMode,
    max_histories: usize,
) -> Result<f64> {
    if records.is_empty() {
        return Err(CurpError::EmptyBatch);
    }
    let mut total = 0.0;
    for r in records {
        let input = build_input(r, cb, mode, max_histories)?;
        total += pba_loss(&input, decoder, params)?.0;
    }
    Ok(total / records.len() as f64)
}

/// Parameters of the synthetic personalization task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub seed: u64,
    pub archetypes: usize,
    pub vocab: usize,
    pub dim: usize,
    pub histories: usize,
    pub train_users: usize,
    pub test_users: usize,
    pub query_len: usize,
    pub response_len: usize,
    pub noise_sigma: f64,
    /// Tokens favored by each archetype.
    pub preferred_tokens: usize,
    /// Probability that a response token comes from the preferred set.
    pub preference: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            seed: 0,
            archetypes: 16,
            vocab: 64,
            dim: 16,
            histories: 8,
            train_users: 400,
            test_users: 100,
            query_len: 4,
            response_len: 6,
            noise_sigma: 0.1,
            preferred_tokens: 4,
            preference: 0.8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PersonalizationTask {
    pub train: Vec<UserRecord>,
    pub test: Vec<UserRecord>,
    pub train_archetypes: Vec<usize>,
    pub test_archetypes: Vec<usize>,
}

/// Users whose histories cluster around one of several archetype centers
/// and whose responses favor that archetype's token set. Queries are
/// uninformative.
pub fn synth_personalization_task(cfg: &TaskConfig) -> Result<PersonalizationTask> {
    if cfg.archetypes == 0 || cfg.vocab == 0 || cfg.dim == 0 || cfg.histories == 0 || cfg.response_len == 0 {
        return Err(CurpError::InvalidConfig("task sizes must be positive".into()));
    }
    if cfg.preferred_tokens == 0 || cfg.preferred_tokens > cfg.vocab {
        return Err(CurpError::InvalidConfig("preferred token count out of range".into()));
    }
    if !(0.0..=1.0).contains(&cfg.preference) || !(cfg.noise_sigma >= 0.0) {
        return Err(CurpError::InvalidConfig("bad preference or noise".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers: Vec<f64> = (0..cfg.archetypes * cfg.dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let make_user = |id: usize, rng: &mut ChaCha8Rng| -> Result<(UserRecord, usize)> {
        let a = rng.random_range(0..cfg.archetypes);
        let center = &centers[a * cfg.dim..(a + 1) * cfg.dim];
        let data: Vec<f64> = (0..cfg.histories)
            .flat_map(|_| center.to_vec())
            .map(|c| to_f32_precision(c + cfg.noise_sigma * normal.sample(rng)))
            .collect();
        let query_tokens = (0..cfg.query_len).map(|_| rng.random_range(0..cfg.vocab) as u32).collect();
        let response_tokens = (0..cfg.response_len)
            .map(|_| {
                if rng.random::<f64>() < cfg.preference {
                    ((a * cfg.preferred_tokens + rng.random_range(0..cfg.preferred_tokens)) % cfg.vocab) as u32
                } else {
                    rng.random_range(0..cfg.vocab) as u32
                }
            })
            .collect();
        let record = UserRecord {
            user_id: format!("user{id:05}"),
            histories: EmbeddingPool::new(cfg.histories, cfg.dim, data)?,
            query_tokens,
            response_tokens,
        };
        Ok((record, a))
    };

    let mut train = Vec::with_capacity(cfg.train_users);
    let mut train_archetypes = Vec::with_capacity(cfg.train_users);
    for i in 0..cfg.train_users {
        let (r, a) = make_user(i, &mut rng)?;
        train.push(r);
        train_archetypes.push(a);
    }
    let mut test = Vec::with_capacity(cfg.test_users);
    let mut test_archetypes = Vec::with_capacity(cfg.test_users);
    for i in 0..cfg.test_users {
        let (r, a) = make_user(cfg.train_users + i, &mut rng)?;
        test.push(r);
        test_archetypes.push(a);
    }
    Ok(PersonalizationTask {
        train,
        test,
        train_archetypes,
        test_archetypes,
    })
}

/// All histories of `records`, stacked into one pool.
pub fn history_pool(records: &[UserRecord], dim: usize) -> Result<EmbeddingPool> {
    let mut data = Vec::new();
    let mut count = 0;
    for r in records {
        if r.histories.dim() != dim {
            return Err(CurpError::DimMismatch {
                expected: dim,
                got: r.histories.dim(),
            });
        }
        data.extend_from_slice(r.histories.data());
        count += r.histories.count();
    }
    EmbeddingPool::new(count, dim, data)
}
