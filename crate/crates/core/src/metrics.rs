//! Codebook utilization and similarity statistics.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use crate::error::{CurpError, Result};
use crate::types::{CodebookSpec, EmbeddingPool, PQCode};

pub const DEFAULT_ANCHOR_THRESHOLD: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct UsageStats {
    pub counts: Vec<u64>,
    pub freqs: Vec<f64>,
    /// Fraction of entries used at least once.
    pub coverage: f64,
    /// Entropy of `freqs` in nats divided by `ln K`.
    pub norm_entropy: f64,
    pub distinct_codes: usize,
    /// Distinct L-tuples over number of codes.
    pub combination_ratio: f64,
    pub num_codes: usize,
}

impl UsageStats {
    /// Statistics of a raw count vector; code-level fields are left at zero.
    pub fn from_counts(counts: Vec<u64>) -> Self {
        let k = counts.len();
        let total: u64 = counts.iter().sum();
        let freqs: Vec<f64> = if total == 0 {
            vec![0.0; k]
        } else {
            counts.iter().map(|&n| n as f64 / total as f64).collect()
        };
        let used = counts.iter().filter(|&&n| n > 0).count();
        let coverage = if k == 0 { 0.0 } else { used as f64 / k as f64 };
        UsageStats {
            norm_entropy: normalized_entropy(&freqs),
            counts,
            freqs,
            coverage,
            distinct_codes: 0,
            combination_ratio: 0.0,
            num_codes: 0,
        }
    }
}

/// `-sum p ln p / ln K`, treating `0 ln 0` as 0.
pub fn normalized_entropy(freqs: &[f64]) -> f64 {
    let k = freqs.len();
    if k < 2 {
        return 0.0;
    }
    let h: f64 = freqs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    (h / (k as f64).ln()).clamp(0.0, 1.0)
}

pub fn usage_stats(codes: &[PQCode], spec: &CodebookSpec) -> Result<UsageStats> {
    let mut counts = vec![0u64; spec.vocab_size()];
    let mut distinct = HashSet::with_capacity(codes.len());
    for code in codes {
        code.validate(spec)?;
        for &k in code.indices() {
            counts[k as usize] += 1;
        }
        distinct.insert(code.indices());
    }
    let mut stats = UsageStats::from_counts(counts);
    stats.num_codes = codes.len();
    stats.distinct_codes = distinct.len();
    stats.combination_ratio = if codes.is_empty() {
        0.0
    } else {
        distinct.len() as f64 / codes.len() as f64
    };
    Ok(stats)
}

/// Mean cosine similarity over all unordered pairs of rows.
pub fn mean_pairwise_cosine(pool: &EmbeddingPool) -> Result<f64> {
    let n = pool.count();
    if n < 2 {
        return Err(CurpError::TooFewRows(n));
    }
    let norms: Vec<f64> = pool.rows().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    if let Some(i) = norms.iter().position(|&v| v == 0.0) {
        return Err(CurpError::ZeroVector(i));
    }
    let mut total = 0.0;
    for i in 0..n {
        let a = pool.row(i);
        for j in i + 1..n {
            let dot: f64 = a.iter().zip(pool.row(j)).map(|(x, y)| x * y).sum();
            total += dot / (norms[i] * norms[j]);
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub subspace: usize,
    pub index: u32,
    pub freq: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupTable {
    pub name: String,
    pub size: usize,
    /// One index histogram per subspace.
    pub histograms: Vec<BTreeMap<u32, u64>>,
    pub anchors: Vec<Anchor>,
}

/// Groups codes by tag (a single group `"all"` when untagged) and, for each
/// group, counts indices per subspace. A subspace is an anchor when one index
/// accounts for at least `threshold` of the group.
pub fn subspace_index_table(
    codes: &[PQCode],
    labels: Option<&[String]>,
    spec: &CodebookSpec,
    threshold: f64,
) -> Result<Vec<GroupTable>> {
    if let Some(labels) = labels {
        if labels.len() != codes.len() {
            return Err(CurpError::DimMismatch {
                expected: codes.len(),
                got: labels.len(),
            });
        }
    }
    let l = spec.num_subspaces();
    let mut groups: BTreeMap<&str, Vec<&PQCode>> = BTreeMap::new();
    for (i, code) in codes.iter().enumerate() {
        code.validate(spec)?;
        let tag = labels.map_or("all", |ls| ls[i].as_str());
        groups.entry(tag).or_default().push(code);
    }

    Ok(groups
        .into_iter()
        .map(|(name, members)| {
            let mut histograms = vec![BTreeMap::new(); l];
            for code in &members {
                for (s, &k) in code.indices().iter().enumerate() {
                    *histograms[s].entry(k).or_insert(0u64) += 1;
                }
            }
            let size = members.len();
            let anchors = histograms
                .iter()
                .enumerate()
                .filter_map(|(s, hist)| {
                    // Highest count, lowest index on ties.
                    let (&index, &count) = hist.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))?;
                    let freq = count as f64 / size as f64;
                    (freq >= threshold).then_some(Anchor { subspace: s, index, freq })
                })
                .collect();
            GroupTable {
                name: name.to_string(),
                size,
                histograms,
                anchors,
            }
        })
        .collect())
}

/// Text report: `key: value` lines, a tab-separated usage series, then one
/// block per group with its per-subspace histograms and anchors.
pub fn render_stats_report(stats: &UsageStats, spec: &CodebookSpec, groups: &[GroupTable]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "codes: {}", stats.num_codes);
    let _ = writeln!(out, "vocab_size: {}", spec.vocab_size());
    let _ = writeln!(out, "subspaces: {}", spec.num_subspaces());
    let _ = writeln!(out, "coverage: {:.9}", stats.coverage);
    let _ = writeln!(out, "norm_entropy: {:.9}", stats.norm_entropy);
    let _ = writeln!(out, "distinct_codes: {}", stats.distinct_codes);
    let _ = writeln!(out, "combination_ratio: {:.9}", stats.combination_ratio);
    let used: BTreeSet<usize> = stats
        .counts
        .iter()
        .enumerate()
        .filter(|(_, &n)| n > 0)
        .map(|(k, _)| k)
        .collect();
    let _ = writeln!(out, "used_entries: {}", used.len());
    out.push_str("\n[usage]\nentry\tcount\tfreq\n");
    for (k, (&n, &p)) in stats.counts.iter().zip(&stats.freqs).enumerate() {
        let _ = writeln!(out, "{k}\t{n}\t{p:.9}");
    }
    for g in groups {
        let _ = writeln!(out, "\n[group {}]", g.name);
        let _ = writeln!(out, "size: {}", g.size);
        for (s, hist) in g.histograms.iter().enumerate() {
            let cells: Vec<String> = hist.iter().map(|(k, n)| format!("{k}:{n}")).collect();
            let _ = writeln!(out, "subspace {s}: {}", cells.join(" "));
        }
        for a in &g.anchors {
            let _ = writeln!(out, "anchor: subspace {} index {} freq {:.9}", a.subspace, a.index, a.freq);
        }
    }
    out
}
