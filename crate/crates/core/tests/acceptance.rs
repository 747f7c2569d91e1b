//! Acceptance suite. Each criterion prints one PASS or FAIL line; the process
//! exits non-zero if any criterion fails.
//!
//! Run with `cargo test -p curp-core --test acceptance`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use curp::balanced_kmeans::{init_balanced_kmeans, random_uniform_codebook, run_balanced_kmeans};
use curp::codec_io::{
    decode_codebook, decode_index_file, decode_pool, encode_codebook, encode_index_file, encode_pool, pack_indices,
    packed_len, unpack_indices,
};
use curp::edge_protocol::{client_session, server_session};
use curp::metrics::{mean_pairwise_cosine, usage_stats};
use curp::pba::{
    adapter_backward, adapter_forward, evaluate_pba, history_pool, pba_loss, synth_personalization_task, train_pba,
    AdapterParams, DecoderInput, PbaConfig, PrefixMode, TaskConfig, ToyDecoder,
};
use curp::pcc::{loss_div, loss_quant, loss_total, loss_usage, train_pcc};
use curp::quantizer::{encode_batch, encode_pq, project_batch, QuantizeMode};
use curp::{generate_mixture_pool, Codebook, CodebookSpec, EmbeddingPool, MixturePool, PQCode, PccConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-5;
const FD_INSTANCES: u64 = 20;

// Seeded acceptance pool for the codebook-training criteria.
const POOL_SEED: u64 = 42;
const POOL_ARCHETYPES: usize = 8;
const POOL_PER_ARCHETYPE: usize = 100;
const POOL_DIM: usize = 16;
const POOL_SUBSPACES: usize = 4;
const POOL_K: usize = 64;
const POOL_SIGMA: f64 = 0.05;
const PCC_LR: f64 = 0.05;
const PCC_EPOCHS: usize = 10;

const PBA_LR: f64 = 0.05;
const PBA_EPOCHS: usize = 20;

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient correctness", gradients),
        ("balanced k-means", balance),
        ("quantizer oracle equivalence", quantizer_oracle),
        ("collapse prevention", collapse_prevention),
        ("similarity reduction", similarity_reduction),
        ("loss decomposition and defaults", decomposition),
        ("personalization signal", personalization),
        ("codec bit-exactness", codec),
        ("edge protocol end-to-end", edge_protocol),
        ("cli determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name} ({secs:.2}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({secs:.2}s): {detail}", i + 1);
            }
        }
    }
    println!("{}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t < limit, || format!("{what} took {t:?}, limit {limit:?}"))
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `|a - n| / max(|a|, |n|)` over whole vectors; zero when both vanish.
fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn central_diff(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + FD_STEP;
            let up = f(&p);
            p[i] = x[i] - FD_STEP;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn small_problem(rng: &mut ChaCha8Rng) -> (EmbeddingPool, Codebook) {
    let l = rng.random_range(1..=3);
    let sd = rng.random_range(1..=3);
    let k = rng.random_range(3..=6);
    let b = rng.random_range(2..=5);
    let spec = CodebookSpec::new(l * sd, l, k).unwrap();
    let batch = EmbeddingPool::new(b, l * sd, uniform(rng, b * l * sd, 1.0)).unwrap();
    let cb = Codebook::new(spec, uniform(rng, k * sd, 1.0)).unwrap();
    (batch, cb)
}

fn with_entries(cb: &Codebook, entries: &[f64]) -> Codebook {
    Codebook::new(*cb.spec(), entries.to_vec()).unwrap()
}

fn params_from_flat(like: &AdapterParams, flat: &[f64]) -> AdapterParams {
    let (d, h) = (like.input_dim(), like.hidden());
    let (a, rest) = flat.split_at(d * h);
    let (b, rest) = rest.split_at(h);
    let (c, e) = rest.split_at(h * h);
    AdapterParams::from_parts(d, h, a.to_vec(), b.to_vec(), c.to_vec(), e.to_vec()).unwrap()
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = [0.0f64; 5];
    for seed in 0..FD_INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);

        let (batch, cb) = small_problem(&mut rng);
        let analytic = loss_quant(&batch, &cb).unwrap().grad;
        let numeric = central_diff(cb.entries(), |e| loss_quant(&batch, &with_entries(&cb, e)).unwrap().value);
        worst[0] = worst[0].max(rel_err(&analytic, &numeric));

        // The closest pair must be unique by a clear margin.
        let cb = loop {
            let (_, cb) = small_problem(&mut rng);
            let mut d: Vec<f64> = (0..cb.vocab_size())
                .flat_map(|i| (i + 1..cb.vocab_size()).map(move |j| (i, j)))
                .map(|(i, j)| cb.entry(i).iter().zip(cb.entry(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                .collect();
            d.sort_by(f64::total_cmp);
            if d[1] - d[0] > 1e-3 && d[0] > 1e-3 {
                break cb;
            }
        };
        let tau = rng.random_range(0.5..2.0);
        let analytic = loss_div(&cb, tau).unwrap().grad;
        let numeric = central_diff(cb.entries(), |e| loss_div(&with_entries(&cb, e), tau).unwrap().value);
        worst[1] = worst[1].max(rel_err(&analytic, &numeric));

        let (batch, cb) = small_problem(&mut rng);
        let temp = rng.random_range(0.5..2.0);
        let analytic = loss_usage(&batch, &cb, temp).unwrap().grad;
        let numeric = central_diff(cb.entries(), |e| {
            loss_usage(&batch, &with_entries(&cb, e), temp).unwrap().soft_value
        });
        worst[2] = worst[2].max(rel_err(&analytic, &numeric));

        let (d, h) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let params = AdapterParams::init(d, h, seed).unwrap();
        let q = uniform(&mut rng, d, 1.0);
        let r = uniform(&mut rng, h, 1.0);
        let (_, cache) = adapter_forward(&q, &params).unwrap();
        let mut grad = AdapterParams::zeros(d, h);
        let dq = adapter_backward(&q, &cache, &r, &params, &mut grad);
        let probe = |p: &AdapterParams, x: &[f64]| {
            let out = adapter_forward(x, p).unwrap().0;
            out.iter().zip(&r).map(|(o, w)| o * w).sum::<f64>()
        };
        let mut analytic = grad.flatten();
        analytic.extend(&dq);
        let mut numeric = central_diff(&params.flatten(), |f| probe(&params_from_flat(&params, f), &q));
        numeric.extend(central_diff(&q, |x| probe(&params, x)));
        worst[3] = worst[3].max(rel_err(&analytic, &numeric));

        let (v, h, d) = (rng.random_range(4..=10), rng.random_range(2..=5), rng.random_range(2..=5));
        let decoder = ToyDecoder::new(v, h, seed).unwrap();
        let params = AdapterParams::init(d, h, seed + 1).unwrap();
        let tokens = |rng: &mut ChaCha8Rng, n: usize| (0..n).map(|_| rng.random_range(0..v as u32)).collect();
        let (j, q_len, r_len) = (rng.random_range(0..=3), rng.random_range(0..=3), rng.random_range(1..=3));
        let input = DecoderInput {
            prefix: (0..j).map(|_| uniform(&mut rng, d, 1.0)).collect(),
            query_tokens: tokens(&mut rng, q_len),
            response_tokens: tokens(&mut rng, r_len),
        };
        let analytic = pba_loss(&input, &decoder, &params).unwrap().1.flatten();
        let numeric = central_diff(&params.flatten(), |f| {
            pba_loss(&input, &decoder, &params_from_flat(&params, f)).unwrap().0
        });
        worst[4] = worst[4].max(rel_err(&analytic, &numeric));
    }
    let names = ["quant", "div", "usage", "adapter", "pba"];
    let detail = names
        .iter()
        .zip(worst)
        .map(|(n, w)| format!("{n} {w:.2e}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(worst.iter().all(|&w| w <= FD_TOL), || format!("max relative error above {FD_TOL}: {detail}"))?;
    within(start, Duration::from_secs(10), "gradient checks")?;
    Ok(format!("{FD_INSTANCES} instances each, max relative error {detail}"))
}

fn balance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pools = 60;
    for i in 0..pools {
        let l = rng.random_range(1..=4);
        let sd = rng.random_range(1..=4);
        let n = rng.random_range(2..=40);
        let k = rng.random_range(2..=(n * l).min(24));
        let spec = CodebookSpec::new(l * sd, l, k).unwrap();
        let pool = EmbeddingPool::new(n, l * sd, uniform(&mut rng, n * l * sd, 2.0)).unwrap();
        let run = run_balanced_kmeans(&pool, &spec, 100, i).map_err(|e| format!("pool {i}: {e}"))?;
        let mut sizes = vec![0usize; k];
        for &label in &run.assignment.labels {
            sizes[label] += 1;
        }
        let spread = sizes.iter().max().unwrap() - sizes.iter().min().unwrap();
        ensure(run.assignment.labels.len() == n * l, || format!("pool {i}: wrong label count"))?;
        ensure(spread <= 1, || format!("pool {i}: cluster sizes {sizes:?}"))?;
        for w in run.objectives.windows(2) {
            ensure(w[1] <= w[0] + 1e-9 * w[0].abs(), || {
                format!("pool {i}: objective rose {} -> {}", w[0], w[1])
            })?;
        }
    }
    Ok(format!("{pools} random pools, spread <= 1, objectives non-increasing"))
}

fn quantizer_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    let trials = 1000;
    for _ in 0..trials {
        let l = rng.random_range(1..=6);
        let sd = rng.random_range(1..=5);
        let k = rng.random_range(2..=64);
        let spec = CodebookSpec::new(l * sd, l, k).unwrap();
        let cb = Codebook::new(spec, uniform(&mut rng, k * sd, 1.0)).unwrap();
        let e = uniform(&mut rng, l * sd, 1.2);
        let got = encode_pq(&e, &cb).unwrap();
        let expected: Vec<u32> = e
            .chunks(sd)
            .map(|sub| {
                let mut best = (f64::INFINITY, 0);
                for c in 0..k {
                    let d: f64 = sub.iter().zip(cb.entry(c)).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best.0 {
                        best = (d, c);
                    }
                }
                best.1 as u32
            })
            .collect();
        if got.indices() != expected.as_slice() {
            mismatches += 1;
        }
    }
    ensure(mismatches == 0, || format!("{mismatches} mismatches in {trials}"))?;
    Ok(format!("{trials} random embeddings, K <= 64, 0 mismatches"))
}

fn acceptance_pool() -> (MixturePool, CodebookSpec) {
    let spec = CodebookSpec::new(POOL_DIM, POOL_SUBSPACES, POOL_K).unwrap();
    let mixture = generate_mixture_pool(POOL_SEED, POOL_ARCHETYPES, POOL_PER_ARCHETYPE, &spec, POOL_SIGMA).unwrap();
    (mixture, spec)
}

fn acceptance_training() -> PccConfig {
    PccConfig {
        learning_rate: PCC_LR,
        epochs: PCC_EPOCHS,
        seed: POOL_SEED,
        ..PccConfig::default()
    }
}

fn coverage(pool: &EmbeddingPool, cb: &Codebook) -> f64 {
    usage_stats(&encode_batch(pool, cb).unwrap().codes, cb.spec()).unwrap().coverage
}

fn collapse_prevention() -> Outcome {
    let start = Instant::now();
    let (mixture, spec) = acceptance_pool();
    let pool = &mixture.pool;
    let full = acceptance_training();
    let quant_only = PccConfig {
        lambda_div: 0.0,
        lambda_usage: 0.0,
        ..full.clone()
    };
    let random = random_uniform_codebook(&spec, -1.0, 1.0, POOL_SEED).unwrap();
    let balanced = init_balanced_kmeans(pool, &spec, 100, POOL_SEED).unwrap();

    let cov_full = coverage(pool, &train_pcc(pool, &random, &full).unwrap().codebook);
    let cov_quant = coverage(pool, &train_pcc(pool, &random, &quant_only).unwrap().codebook);
    let cov_balanced = coverage(pool, &train_pcc(pool, &balanced, &full).unwrap().codebook);

    let detail = format!(
        "from random init: full loss {cov_full:.4} vs quant only {cov_quant:.4}; \
         full loss from balanced init {cov_balanced:.4} vs random init {cov_full:.4}"
    );
    ensure(cov_full > cov_quant, || format!("full loss not above quant only: {detail}"))?;
    ensure(cov_balanced > cov_full, || format!("balanced init not above random: {detail}"))?;
    within(start, Duration::from_secs(60), "collapse comparison")?;
    Ok(detail)
}

fn similarity_reduction() -> Outcome {
    let (mixture, spec) = acceptance_pool();
    let pool = &mixture.pool;
    let init = init_balanced_kmeans(pool, &spec, 100, POOL_SEED).unwrap();
    let cb = train_pcc(pool, &init, &acceptance_training()).unwrap().codebook;
    let raw = mean_pairwise_cosine(pool).unwrap();
    let rec = mean_pairwise_cosine(&project_batch(pool, &cb, QuantizeMode::Quantized).unwrap()).unwrap();
    let detail = format!("reconstructions {rec:.6} vs raw {raw:.6}");
    ensure(rec <= raw, || detail.clone())?;
    Ok(detail)
}

fn oracle_quant(batch: &EmbeddingPool, cb: &Codebook) -> f64 {
    let sd = cb.sub_dim();
    let total: f64 = batch
        .data()
        .chunks(sd)
        .map(|x| {
            cb.rows()
                .map(|c| x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / batch.count() as f64
}

fn oracle_div(cb: &Codebook, tau: f64) -> f64 {
    let k = cb.vocab_size();
    let mut m = f64::INFINITY;
    for i in 0..k {
        for j in 0..k {
            if i != j {
                let d: f64 = cb.entry(i).iter().zip(cb.entry(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                m = m.min(d.sqrt());
            }
        }
    }
    -tau * (m / tau).tanh()
}

fn oracle_usage(batch: &EmbeddingPool, cb: &Codebook) -> f64 {
    let k = cb.vocab_size();
    let mut counts = vec![0usize; k];
    for x in batch.data().chunks(cb.sub_dim()) {
        let mut best = (f64::INFINITY, 0);
        for (c, entry) in cb.rows().enumerate() {
            let d: f64 = x.iter().zip(entry).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, c);
            }
        }
        counts[best.1] += 1;
    }
    let total: usize = counts.iter().sum();
    let p: Vec<f64> = counts.iter().map(|&n| n as f64 / total as f64).collect();
    let kf = k as f64;
    let var = p.iter().map(|pk| (kf * pk - 1.0).powi(2)).sum::<f64>() / kf;
    let unused = counts.iter().filter(|&&n| n == 0).count() as f64 / kf;
    let entropy: f64 = -p.iter().filter(|&&pk| pk > 0.0).map(|pk| pk * pk.ln()).sum::<f64>();
    var + unused + 1.0 - entropy / kf.ln()
}

fn decomposition() -> Outcome {
    let d = PccConfig::default();
    ensure(
        (d.lambda_quant, d.lambda_div, d.lambda_usage) == (1.0, 0.15, 1.0),
        || format!("default weights {:?}", (d.lambda_quant, d.lambda_div, d.lambda_usage)),
    )?;
    ensure(
        d.learning_rate == 1e-4
            && d.weight_decay == 0.01
            && d.grad_clip == 1.0
            && d.batch_size == 8
            && d.accum_steps == 4
            && d.epochs == 1,
        || format!("defaults {d:?}"),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let l = rng.random_range(1..=4);
        let sd = rng.random_range(1..=4);
        let k = rng.random_range(2..=16);
        let b = rng.random_range(1..=8);
        let spec = CodebookSpec::new(l * sd, l, k).unwrap();
        let batch = EmbeddingPool::new(b, l * sd, uniform(&mut rng, b * l * sd, 1.0)).unwrap();
        let cb = Codebook::new(spec, uniform(&mut rng, k * sd, 1.0)).unwrap();
        let (report, _) = loss_total(&batch, &cb, &d).unwrap();
        let expected = 1.0 * oracle_quant(&batch, &cb) + 0.15 * oracle_div(&cb, d.tau) + 1.0 * oracle_usage(&batch, &cb);
        let err = (report.loss_total - expected).abs() / expected.abs().max(f64::MIN_POSITIVE);
        worst = worst.max(err);
    }
    ensure(worst <= 1e-12, || format!("relative error {worst:.3e}"))?;
    Ok(format!("100 batches, max relative error {worst:.2e}; defaults match"))
}

fn personalization() -> Outcome {
    let start = Instant::now();
    let task = synth_personalization_task(&TaskConfig {
        seed: POOL_SEED,
        ..TaskConfig::default()
    })
    .unwrap();
    let cfg = TaskConfig::default();
    ensure(
        cfg.archetypes == 16 && cfg.vocab == 64 && cfg.train_users == 400 && cfg.test_users == 100 && cfg.histories == 8,
        || format!("task shape {cfg:?}"),
    )?;
    let spec = CodebookSpec::new(cfg.dim, 4, 64).unwrap();
    let histories = history_pool(&task.train, cfg.dim).unwrap();
    let cb = init_balanced_kmeans(&histories, &spec, 100, POOL_SEED).unwrap();
    let decoder = ToyDecoder::new(cfg.vocab, 32, POOL_SEED).unwrap();

    let nll = |mode: PrefixMode| {
        let config = PbaConfig {
            learning_rate: PBA_LR,
            epochs: PBA_EPOCHS,
            seed: POOL_SEED,
            mode,
            ..PbaConfig::default()
        };
        let run = train_pba(&task.train, &cb, &decoder, &config).unwrap();
        evaluate_pba(&task.test, &cb, &decoder, &run.params, mode, config.max_histories).unwrap()
    };
    let quantized = nll(PrefixMode::Quantized);
    let passthrough = nll(PrefixMode::Passthrough);
    let baseline = nll(PrefixMode::Disabled);
    let gap = (quantized - passthrough).abs() / passthrough;
    let detail = format!(
        "held-out NLL quantized {quantized:.4}, passthrough {passthrough:.4}, no prefix {baseline:.4}, gap {:.2}%",
        100.0 * gap
    );
    ensure(quantized < baseline, || format!("not below baseline: {detail}"))?;
    ensure(gap <= 0.10, || format!("gap above 10%: {detail}"))?;
    within(start, Duration::from_secs(300), "personalization run")?;
    Ok(detail)
}

fn f32_values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-10.0f32..10.0) as f64).collect()
}

fn bits_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn random_codes(rng: &mut ChaCha8Rng, spec: &CodebookSpec, n: usize) -> Vec<PQCode> {
    (0..n)
        .map(|_| {
            let idx = (0..spec.num_subspaces()).map(|_| rng.random_range(0..spec.vocab_size() as u32)).collect();
            PQCode::new(idx, spec).unwrap()
        })
        .collect()
}

fn codec() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let trials = 1000;
    for t in 0..trials {
        let l = rng.random_range(1..=4);
        let sd = rng.random_range(1..=6);
        let k = rng.random_range(2..=2000);
        let spec = CodebookSpec::new(l * sd, l, k).unwrap();

        let n = rng.random_range(0..=12);
        let pool = EmbeddingPool::new(n, l * sd, f32_values(&mut rng, n * l * sd)).unwrap();
        let back = decode_pool(&encode_pool(&pool).unwrap()).map_err(|e| format!("pool {t}: {e}"))?;
        ensure(back.count() == n && bits_eq(back.data(), pool.data()), || format!("pool {t} differs"))?;

        let cb = Codebook::new(spec, f32_values(&mut rng, k * sd)).unwrap();
        let back = decode_codebook(&encode_codebook(&cb).unwrap()).map_err(|e| format!("codebook {t}: {e}"))?;
        ensure(back.spec() == cb.spec() && bits_eq(back.entries(), cb.entries()), || {
            format!("codebook {t} differs")
        })?;

        let n = rng.random_range(0..=20);
        let codes = random_codes(&mut rng, &spec, n);
        let back = decode_index_file(&encode_index_file(&codes, &cb).unwrap(), &cb)
            .map_err(|e| format!("index file {t}: {e}"))?;
        ensure(back == codes, || format!("index file {t} differs"))?;

        let n = rng.random_range(0..=50);
        let codes = random_codes(&mut rng, &spec, n);
        let packed = pack_indices(&codes, &spec).unwrap();
        let bits = (k as f64).log2().ceil() as usize;
        let expected_len = (codes.len() * l * bits).div_ceil(8);
        ensure(packed.len() == expected_len && packed_len(codes.len(), &spec) == expected_len, || {
            format!("packer {t}: {} bytes, expected {expected_len}", packed.len())
        })?;
        let back = unpack_indices(&packed, &spec, codes.len()).map_err(|e| format!("packer {t}: {e}"))?;
        ensure(back == codes, || format!("packer {t} differs"))?;
    }

    let spec = CodebookSpec::new(4, 4, 1000).unwrap();
    let code = PQCode::new(vec![3, 7, 1, 9], &spec).unwrap();
    let packed = pack_indices(&[code], &spec).unwrap();
    ensure(packed == [0x00, 0xC0, 0x70, 0x04, 0x09], || format!("[3, 7, 1, 9] packed to {packed:02X?}"))?;
    Ok(format!("{trials} round trips per format and packer, sizes exact, [3, 7, 1, 9] -> 00 C0 70 04 09"))
}

fn edge_protocol() -> Outcome {
    let spec = CodebookSpec::new(768, 4, 1000).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cb = Codebook::new(spec, f32_values(&mut rng, 1000 * 192)).unwrap();
    let histories = EmbeddingPool::new(8, 768, f32_values(&mut rng, 8 * 768)).unwrap();

    let listener = std::net::TcpListener::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
    let addr = listener.local_addr().map_err(|e| e.to_string())?;
    let server_cb = cb.clone();
    let server = std::thread::spawn(move || {
        let (mut conn, _) = listener.accept().unwrap();
        server_session(&server_cb, &mut conn)
    });
    let mut conn = std::net::TcpStream::connect(addr).map_err(|e| e.to_string())?;
    let report = client_session(&histories, &cb, &mut conn).map_err(|e| format!("client: {e}"))?;
    let result = server.join().unwrap().map_err(|e| format!("server: {e}"))?;

    ensure(result.crc == report.reconstruction_crc, || {
        format!("reconstruction CRC {:08x} vs {:08x}", result.crc, report.reconstruction_crc)
    })?;
    ensure(report.index_payload_bytes == 44 && report.raw_bytes == 24_576, || {
        format!("{} payload bytes vs {} raw", report.index_payload_bytes, report.raw_bytes)
    })?;
    ensure(report.per_event_compression == 614.4, || {
        format!("compression factor {}", report.per_event_compression)
    })?;
    Ok(format!(
        "CRC {:08x} on both ends, {} vs {} bytes, factor {}",
        report.reconstruction_crc, report.index_payload_bytes, report.raw_bytes, report.per_event_compression
    ))
}

fn run_cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_curp"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("curp {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr))
    })
}

fn run_pipeline(dir: &Path) -> Result<(), String> {
    let steps: &[&[&str]] = &[
        &["synth", "--seed", "7", "--out", "pool.bin", "--labels", "labels.txt"],
        &["init", "--pool", "pool.bin", "--k", "32", "--seed", "7", "--out", "init.bin"],
        &[
            "train", "--pool", "pool.bin", "--codebook-in", "init.bin", "--codebook-out", "cb.bin", "--lr", "0.05",
            "--epochs", "3", "--seed", "7", "--log", "train.log",
        ],
        &["encode", "--pool", "pool.bin", "--codebook", "cb.bin", "--out", "codes.bin"],
        &["stats", "--codebook", "cb.bin", "--indices", "codes.bin", "--groups", "labels.txt", "--out", "stats.txt"],
        &[
            "synth-task", "--seed", "7", "--train-users", "40", "--test-users", "10", "--out-train", "train.rec",
            "--out-test", "test.rec", "--out-pool", "hist.bin",
        ],
        &["init", "--pool", "hist.bin", "--k", "32", "--seed", "7", "--out", "task_cb.bin"],
        &[
            "align", "--records", "train.rec", "--codebook", "task_cb.bin", "--lr", "0.05", "--epochs", "2", "--seed",
            "7", "--eval", "test.rec", "--out", "adapter.bin", "--log", "align.log",
        ],
    ];
    for step in steps {
        run_cli(dir, step)?;
    }
    Ok(())
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_pipeline(a.path())?;
    run_pipeline(b.path())?;
    let mut names: Vec<_> = std::fs::read_dir(a.path())
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    for name in &names {
        let x = std::fs::read(a.path().join(name)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.path().join(name)).map_err(|e| format!("{name:?}: {e}"))?;
        ensure(x == y, || format!("{name:?} differs between runs"))?;
    }
    Ok(format!("{} artifacts and logs byte-identical across two runs", names.len()))
}
