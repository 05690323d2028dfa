//! Token-selection strategies: Top-k, Bottom-k, uniform-by-rank, middle
//! window and greedy max-min diversity.
//!
//! Score-based strategies only look at the descending rank order (ties by
//! lower index), so any strictly increasing transform of the scores leaves
//! their output unchanged. Every selector returns indices in ascending
//! positional order.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rankmetrics::ScoreVector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StrategyError {
    #[error("k = {k} exceeds the {available} available tokens")]
    KOutOfRange { k: usize, available: usize },
    #[error("pool size {pool} must satisfy k = {k} <= pool <= {available}")]
    PoolOutOfRange { k: usize, pool: usize, available: usize },
    #[error("diversity selection needs token features")]
    FeaturesMissing,
    #[error("features have zero dimensions")]
    ZeroDimension,
    #[error("feature matrix has {rows} rows but there are {tokens} tokens")]
    FeatureCountMismatch { rows: usize, tokens: usize },
    #[error("feature data length {len} is not {rows} x {dim}")]
    FeatureShape { len: usize, rows: usize, dim: usize },
    #[error("non-finite feature value at row {row}")]
    NonFiniteFeature { row: usize },
}

/// Row-major per-token feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self, StrategyError> {
        if dim == 0 {
            return Err(StrategyError::ZeroDimension);
        }
        if data.len() != rows * dim {
            return Err(StrategyError::FeatureShape {
                len: data.len(),
                rows,
                dim,
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(StrategyError::NonFiniteFeature { row: pos / dim });
        }
        Ok(Self { rows, dim, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mean over rows.
    pub fn mean_row(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for i in 0..self.rows {
            for (m, v) in mean.iter_mut().zip(self.row(i)) {
                *m += v;
            }
        }
        let inv = 1.0 / self.rows.max(1) as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
        mean
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    TopK,
    BottomK,
    UniformRank,
    Middle,
    Diversity,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::TopK,
        StrategyKind::BottomK,
        StrategyKind::UniformRank,
        StrategyKind::Middle,
        StrategyKind::Diversity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::TopK => "top_k",
            StrategyKind::BottomK => "bottom_k",
            StrategyKind::UniformRank => "uniform_rank",
            StrategyKind::Middle => "middle",
            StrategyKind::Diversity => "diversity",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    pub k: usize,
    /// Pool size for Bottom-k; `None` means half the available tokens.
    #[serde(default)]
    pub pool_k: Option<usize>,
    /// Carried for provenance. All built-in strategies are deterministic.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl StrategySpec {
    pub fn new(kind: StrategyKind, k: usize) -> Self {
        Self {
            kind,
            k,
            pool_k: None,
            seed: None,
        }
    }
}

/// A retained token set with its Top-k / alternative split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub retained: Vec<usize>,
    pub n_top: usize,
    pub n_alt: usize,
    pub trust_weight: f64,
    pub strategy_trace: String,
}

impl SelectionResult {
    /// Wraps the output of a single strategy. Top-k counts as the attention
    /// share with full trust, everything else as the alternative share.
    pub fn pure(kind: StrategyKind, retained: Vec<usize>) -> Self {
        let n = retained.len();
        let (n_top, n_alt, trust_weight) = match kind {
            StrategyKind::TopK => (n, 0, 1.0),
            _ => (0, n, 0.0),
        };
        Self {
            retained,
            n_top,
            n_alt,
            trust_weight,
            strategy_trace: format!("{kind}({n})"),
        }
    }
}

fn check_k(k: usize, available: usize) -> Result<(), StrategyError> {
    if k > available {
        return Err(StrategyError::KOutOfRange { k, available });
    }
    Ok(())
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

/// Candidates ordered by descending score, ties by lower index.
pub(crate) fn order_candidates(s: &ScoreVector, candidates: &[usize]) -> Vec<usize> {
    let v = s.values();
    let mut order = candidates.to_vec();
    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    order
}

fn top_of_order(order: &[usize], k: usize) -> Result<Vec<usize>, StrategyError> {
    check_k(k, order.len())?;
    Ok(sorted(order[..k].to_vec()))
}

fn bottom_of_order(order: &[usize], k: usize, pool: usize) -> Result<Vec<usize>, StrategyError> {
    if k > pool || pool > order.len() {
        return Err(StrategyError::PoolOutOfRange {
            k,
            pool,
            available: order.len(),
        });
    }
    Ok(sorted(order[pool - k..pool].to_vec()))
}

/// Rank positions `round(j (n-1) / (k-1))` for `j = 0..k`; `k = 1` gives `[0]`.
pub fn uniform_positions(n: usize, k: usize) -> Vec<usize> {
    match k {
        0 => Vec::new(),
        1 => vec![0],
        _ => {
            let (num, den) = (n - 1, k - 1);
            // Half-up rounding in integer arithmetic.
            (0..k).map(|j| (2 * j * num + den) / (2 * den)).collect()
        }
    }
}

fn uniform_of_order(order: &[usize], k: usize) -> Result<Vec<usize>, StrategyError> {
    check_k(k, order.len())?;
    Ok(sorted(
        uniform_positions(order.len(), k)
            .into_iter()
            .map(|p| order[p])
            .collect(),
    ))
}

fn middle_of_order(order: &[usize], k: usize) -> Result<Vec<usize>, StrategyError> {
    check_k(k, order.len())?;
    let start = (order.len() - k) / 2;
    Ok(sorted(order[start..start + k].to_vec()))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy farthest-point traversal over `candidates`.
fn diversity_among(features: &FeatureMatrix, candidates: &[usize], k: usize) -> Result<Vec<usize>, StrategyError> {
    check_k(k, candidates.len())?;
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut cand = candidates.to_vec();
    cand.sort_unstable();

    let norm = |i: usize| features.row(i).iter().map(|v| v * v).sum::<f64>();
    let mut first = cand[0];
    for &i in &cand[1..] {
        if norm(i) > norm(first) {
            first = i;
        }
    }
    let mut chosen = vec![first];
    let mut min_d: Vec<f64> = cand
        .iter()
        .map(|&i| sq_dist(features.row(i), features.row(first)))
        .collect();
    let mut taken: Vec<bool> = cand.iter().map(|&i| i == first).collect();
    while chosen.len() < k {
        let mut best: Option<usize> = None;
        for p in 0..cand.len() {
            if taken[p] {
                continue;
            }
            if best.is_none_or(|b| min_d[p] > min_d[b]) {
                best = Some(p);
            }
        }
        let p = best.expect("k <= candidates leaves an untaken candidate");
        taken[p] = true;
        let next = cand[p];
        chosen.push(next);
        for q in 0..cand.len() {
            let d = sq_dist(features.row(cand[q]), features.row(next));
            if d < min_d[q] {
                min_d[q] = d;
            }
        }
    }
    Ok(sorted(chosen))
}

pub fn select_top_k(s: &ScoreVector, k: usize) -> Result<Vec<usize>, StrategyError> {
    top_of_order(&s.order_desc(), k)
}

pub fn select_bottom_k(s: &ScoreVector, k: usize, pool_k: usize) -> Result<Vec<usize>, StrategyError> {
    bottom_of_order(&s.order_desc(), k, pool_k)
}

pub fn select_uniform_rank(s: &ScoreVector, k: usize) -> Result<Vec<usize>, StrategyError> {
    uniform_of_order(&s.order_desc(), k)
}

pub fn select_middle(s: &ScoreVector, k: usize) -> Result<Vec<usize>, StrategyError> {
    middle_of_order(&s.order_desc(), k)
}

pub fn select_diversity(features: &FeatureMatrix, k: usize) -> Result<Vec<usize>, StrategyError> {
    let all: Vec<usize> = (0..features.rows()).collect();
    diversity_among(features, &all, k)
}

/// Default Bottom-k pool: half of the available tokens, at least `k`.
pub fn default_pool(k: usize, available: usize) -> usize {
    (available / 2).max(k).min(available)
}

/// Runs `kind` over a candidate subset of the tokens. Used both for whole
/// score vectors and for the alternative share of a blended selection.
pub fn select_among(
    kind: StrategyKind,
    k: usize,
    pool_k: Option<usize>,
    scores: &ScoreVector,
    features: Option<&FeatureMatrix>,
    candidates: &[usize],
) -> Result<Vec<usize>, StrategyError> {
    match kind {
        StrategyKind::Diversity => {
            let f = features.ok_or(StrategyError::FeaturesMissing)?;
            if f.rows() != scores.len() {
                return Err(StrategyError::FeatureCountMismatch {
                    rows: f.rows(),
                    tokens: scores.len(),
                });
            }
            diversity_among(f, candidates, k)
        }
        _ => {
            let order = order_candidates(scores, candidates);
            match kind {
                StrategyKind::TopK => top_of_order(&order, k),
                StrategyKind::BottomK => {
                    let pool = pool_k.unwrap_or_else(|| default_pool(k, order.len()));
                    bottom_of_order(&order, k, pool)
                }
                StrategyKind::UniformRank => uniform_of_order(&order, k),
                StrategyKind::Middle => middle_of_order(&order, k),
                StrategyKind::Diversity => unreachable!(),
            }
        }
    }
}

/// Runs a strategy over all tokens.
pub fn select(
    spec: &StrategySpec,
    scores: &ScoreVector,
    features: Option<&FeatureMatrix>,
) -> Result<SelectionResult, StrategyError> {
    let all: Vec<usize> = (0..scores.len()).collect();
    let retained = select_among(spec.kind, spec.k, spec.pool_k, scores, features, &all)?;
    Ok(SelectionResult::pure(spec.kind, retained))
}
