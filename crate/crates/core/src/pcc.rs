//! Codebook training: the quantization, diversity and usage losses with
//! analytic gradients with respect to the codebook entries, and the
//! minibatch training loop.
//!
//! Embeddings are frozen throughout. Hard nearest-entry assignments are held
//! constant within a step, so gradients only ever reach the entries.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CurpError, Result};
use crate::metrics::{normalized_entropy, usage_stats, UsageStats};
use crate::quantizer::{encode_batch, quantize_subvector};
use crate::types::{squared_distance, Codebook, EmbeddingPool, PQCode, PccConfig};

/// A loss value with its gradient, laid out like `Codebook::entries`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check_batch(batch: &EmbeddingPool, cb: &Codebook) -> Result<()> {
    if batch.is_empty() {
        return Err(CurpError::EmptyBatch);
    }
    batch.check_spec(cb.spec())
}

/// Mean squared reconstruction error of the batch, with the embeddings held
/// fixed.
pub fn loss_quant(batch: &EmbeddingPool, cb: &Codebook) -> Result<LossGrad> {
    check_batch(batch, cb)?;
    let sd = cb.sub_dim();
    let b = batch.count() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; cb.entries().len()];
    for sub in batch.data().chunks_exact(sd) {
        let (k, d) = quantize_subvector(sub, cb)?;
        value += d;
        let entry = cb.entry(k);
        for j in 0..sd {
            grad[k * sd + j] += 2.0 / b * (entry[j] - sub[j]);
        }
    }
    Ok(LossGrad { value: value / b, grad })
}

/// `-tau * tanh(m / tau)` where `m` is the smallest distance between two
/// distinct entries. Only the closest pair (lowest indices on ties) receives
/// gradient; duplicate entries give value 0 and a zero gradient.
pub fn loss_div(cb: &Codebook, tau: f64) -> Result<LossGrad> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(CurpError::InvalidConfig(format!("tau must be positive, got {tau}")));
    }
    let k = cb.vocab_size();
    let sd = cb.sub_dim();
    let mut best = (f64::INFINITY, 0, 1);
    for i in 0..k {
        for j in i + 1..k {
            let d2 = squared_distance(cb.entry(i), cb.entry(j));
            if d2 < best.0 {
                best = (d2, i, j);
            }
        }
    }
    let (d2, i, j) = best;
    let m = d2.sqrt();
    let mut grad = vec![0.0; cb.entries().len()];
    let value = -tau * (m / tau).tanh();
    if m > 0.0 {
        let t = (m / tau).tanh();
        let sech2 = 1.0 - t * t;
        let (ci, cj) = (cb.entry(i), cb.entry(j));
        for t in 0..sd {
            let g = -sech2 * (ci[t] - cj[t]) / m;
            grad[i * sd + t] = g;
            grad[j * sd + t] = -g;
        }
    }
    Ok(LossGrad { value, grad })
}

/// The usage penalty as a function of (possibly fractional) counts:
/// population variance of `K * p_k`, plus the unused fraction, plus one
/// minus the normalized entropy.
pub fn usage_penalty(counts: &[f64]) -> f64 {
    let k = counts.len() as f64;
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let freqs: Vec<f64> = counts.iter().map(|n| n / total).collect();
    let var = freqs.iter().map(|p| (k * p - 1.0).powi(2)).sum::<f64>() / k;
    let used = counts.iter().filter(|&&n| n > 0.0).count() as f64;
    var + (1.0 - used / k) + (1.0 - normalized_entropy(&freqs))
}

#[derive(Debug, Clone, PartialEq)]
pub struct UsageLoss {
    /// Penalty on hard assignment counts (reported).
    pub value: f64,
    /// Penalty on softmax counts (what the gradient descends).
    pub soft_value: f64,
    pub grad: Vec<f64>,
    pub hard: UsageStats,
}

/// Usage penalty over every subspace slot of the batch. The reported value
/// uses hard counts; the gradient comes from soft counts
/// `n_k = sum_slots softmax_k(-|x - c_k|^2 / temp)`.
pub fn loss_usage(batch: &EmbeddingPool, cb: &Codebook, soft_count_temp: f64) -> Result<UsageLoss> {
    check_batch(batch, cb)?;
    if !(soft_count_temp.is_finite() && soft_count_temp > 0.0) {
        return Err(CurpError::InvalidConfig(format!(
            "soft count temperature must be positive, got {soft_count_temp}"
        )));
    }
    let k = cb.vocab_size();
    let sd = cb.sub_dim();
    let slots = batch.data().len() / sd;

    let codes = encode_batch(batch, cb)?.codes;
    let hard = usage_stats(&codes, cb.spec())?;
    let hard_counts: Vec<f64> = hard.counts.iter().map(|&n| n as f64).collect();
    let value = usage_penalty(&hard_counts);

    // Softmax responsibilities, one row of K per slot.
    let mut resp = vec![0.0; slots * k];
    for (s, x) in batch.data().chunks_exact(sd).enumerate() {
        let row = &mut resp[s * k..(s + 1) * k];
        for (c, entry) in cb.rows().enumerate() {
            row[c] = -squared_distance(x, entry) / soft_count_temp;
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    let mut soft = vec![0.0; k];
    for row in resp.chunks_exact(k) {
        for (n, p) in soft.iter_mut().zip(row) {
            *n += p;
        }
    }
    let soft_value = usage_penalty(&soft);

    // Softmax rows each sum to one, so the soft total is the slot count and
    // d p_k / d n_k = 1 / slots. The coverage term is piecewise constant.
    let total = slots as f64;
    let kf = k as f64;
    let ln_k = kf.ln();
    let dn: Vec<f64> = soft
        .iter()
        .map(|&n| {
            let p = n / total;
            let var = 2.0 * (kf * p - 1.0);
            let ent = if p > 0.0 { (p.ln() + 1.0) / ln_k } else { 0.0 };
            (var + ent) / total
        })
        .collect();

    let mut grad = vec![0.0; k * sd];
    for (s, x) in batch.data().chunks_exact(sd).enumerate() {
        let row = &resp[s * k..(s + 1) * k];
        let mean_dn: f64 = row.iter().zip(&dn).map(|(p, g)| p * g).sum();
        for c in 0..k {
            let w = row[c] * (dn[c] - mean_dn) * 2.0 / soft_count_temp;
            if w == 0.0 {
                continue;
            }
            let entry = cb.entry(c);
            for t in 0..sd {
                grad[c * sd + t] += w * (x[t] - entry[t]);
            }
        }
    }

    Ok(UsageLoss {
        value,
        soft_value,
        grad,
        hard,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PccStepReport {
    pub loss_total: f64,
    pub loss_quant: f64,
    pub loss_div: f64,
    pub loss_usage: f64,
    pub grad_norm_pre_clip: f64,
    pub hard_usage: UsageStats,
}

impl PccStepReport {
    /// `step`, the four losses, the pre-clip gradient norm and batch
    /// coverage, tab-separated with 9 significant digits.
    pub fn log_line(&self, step: usize) -> String {
        format!(
            "{step}\t{:.8e}\t{:.8e}\t{:.8e}\t{:.8e}\t{:.8e}\t{:.8e}",
            self.loss_total,
            self.loss_quant,
            self.loss_div,
            self.loss_usage,
            self.grad_norm_pre_clip,
            self.hard_usage.coverage
        )
    }
}

pub const PCC_LOG_HEADER: &str = "step\tloss_total\tloss_quant\tloss_div\tloss_usage\tgrad_norm\tcoverage";

pub fn render_pcc_log(log: &[PccStepReport]) -> String {
    let mut out = String::from(PCC_LOG_HEADER);
    out.push('\n');
    for (i, r) in log.iter().enumerate() {
        let _ = writeln!(out, "{}", r.log_line(i));
    }
    out
}

pub(crate) fn global_norm(g: &[f64]) -> f64 {
    g.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Scales `g` in place so its global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let norm = global_norm(g);
    if norm > max_norm {
        let scale = max_norm / norm;
        for v in g.iter_mut() {
            *v *= scale;
        }
    }
    norm
}

/// Weighted sum of the three losses and of their gradients.
pub fn loss_total(batch: &EmbeddingPool, cb: &Codebook, config: &PccConfig) -> Result<(PccStepReport, Vec<f64>)> {
    config.validate()?;
    let q = loss_quant(batch, cb)?;
    let d = loss_div(cb, config.tau)?;
    let u = loss_usage(batch, cb, config.soft_count_temp)?;
    let (l1, l2, l3) = (config.lambda_quant, config.lambda_div, config.lambda_usage);
    let grad: Vec<f64> = (0..q.grad.len())
        .map(|i| l1 * q.grad[i] + l2 * d.grad[i] + l3 * u.grad[i])
        .collect();
    let report = PccStepReport {
        loss_total: l1 * q.value + l2 * d.value + l3 * u.value,
        loss_quant: q.value,
        loss_div: d.value,
        loss_usage: u.value,
        grad_norm_pre_clip: global_norm(&grad),
        hard_usage: u.hard,
    };
    Ok((report, grad))
}

#[derive(Debug, Clone)]
pub struct PccRun {
    pub codebook: Codebook,
    /// One report per optimizer step.
    pub log: Vec<PccStepReport>,
    /// Full-pool mean reconstruction error before training and after each
    /// epoch.
    pub epoch_errors: Vec<f64>,
}

/// Trains the codebook on `pool`.
///
/// Each epoch reshuffles the rows and cuts them into minibatches of
/// `batch_size`. Gradients of `accum_steps` consecutive minibatches are
/// averaged into one optimizer step (a trailing partial group still steps),
/// clipped to `grad_clip`, then applied as
/// `c <- c * (1 - lr * wd) - lr * grad`.
pub fn train_pcc(pool: &EmbeddingPool, init_cb: &Codebook, config: &PccConfig) -> Result<PccRun> {
    config.validate()?;
    if pool.is_empty() {
        return Err(CurpError::EmptyPool);
    }
    pool.check_spec(init_cb.spec())?;

    let mut cb = init_cb.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..pool.count()).collect();
    let mut log = Vec::new();
    let mut epoch_errors = vec![encode_batch(pool, &cb)?.mean_error];
    let decay = 1.0 - config.learning_rate * config.weight_decay;

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        for group in batches.chunks(config.accum_steps) {
            let n = group.len() as f64;
            let mut grad = vec![0.0; cb.entries().len()];
            let mut sums = [0.0f64; 4];
            let mut codes: Vec<PQCode> = Vec::new();
            for rows in group {
                let batch = pool.select(rows);
                let (report, g) = loss_total(&batch, &cb, config)?;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b / n;
                }
                sums[0] += report.loss_total;
                sums[1] += report.loss_quant;
                sums[2] += report.loss_div;
                sums[3] += report.loss_usage;
                codes.extend(encode_batch(&batch, &cb)?.codes);
            }
            let grad_norm_pre_clip = clip_grad_norm(&mut grad, config.grad_clip);
            log.push(PccStepReport {
                loss_total: sums[0] / n,
                loss_quant: sums[1] / n,
                loss_div: sums[2] / n,
                loss_usage: sums[3] / n,
                grad_norm_pre_clip,
                hard_usage: usage_stats(&codes, cb.spec())?,
            });
            for (c, g) in cb.entries_mut().iter_mut().zip(&grad) {
                *c = *c * decay - config.learning_rate * g;
            }
            if cb.entries().iter().any(|v| !v.is_finite()) {
                return Err(CurpError::NonFinite("codebook after update"));
            }
        }
        epoch_errors.push(encode_batch(pool, &cb)?.mean_error);
    }

    Ok(PccRun {
        codebook: cb,
        log,
        epoch_errors,
    })
}
