//! Rank statistics over per-token score vectors.
//!
//! Kendall's tau-b between two tied rankings, competition ranking of scores,
//! the layer-wise average tau used as the consistency indicator, and Shannon
//! entropy of a score distribution (kept as the baseline indicator that fails
//! to separate reliable from unreliable attention).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RankError {
    #[error("score vector is empty")]
    Empty,
    #[error("score at index {index} is not finite ({value})")]
    NonFinite { index: usize, value: f64 },
    #[error("length mismatch: {left} != {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least 2 elements, got {0}")]
    TooShort(usize),
    #[error("need at least 2 rankings, got {0}")]
    TooFewRankings(usize),
    #[error("restriction set has {0} elements, need at least 2")]
    RestrictionTooSmall(usize),
    #[error("restriction index {index} out of range for length {len}")]
    RestrictionOutOfRange { index: usize, len: usize },
    #[error("negative score {value} at index {index}")]
    Negative { index: usize, value: f64 },
    #[error("scores sum to zero")]
    ZeroSum,
}

/// Per-token scores, one entry per visual token. Always nonempty and finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn new(values: Vec<f64>) -> Result<Self, RankError> {
        if values.is_empty() {
            return Err(RankError::Empty);
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(RankError::NonFinite { index, value });
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Token indices ordered by descending score, ties by lower index first.
    pub fn order_desc(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.0.len()).collect();
        idx.sort_by(|&a, &b| self.0[b].total_cmp(&self.0[a]).then(a.cmp(&b)));
        idx
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self, RankError> {
        Self::new(self.0.iter().map(|&v| f(v)).collect())
    }
}

impl TryFrom<Vec<f64>> for ScoreVector {
    type Error = RankError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<ScoreVector> for Vec<f64> {
    fn from(s: ScoreVector) -> Self {
        s.0
    }
}

/// Competition ranking: rank 1 is the highest score, equal scores share the
/// smallest rank of their group ("1224" ranking).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ranking {
    ranks: Vec<u32>,
}

impl Ranking {
    /// Wraps raw rank positions. Used for hand-built rankings in tests and
    /// experiments; the values only need to be comparable, τ-b is computed
    /// from their order.
    pub fn from_ranks(ranks: Vec<u32>) -> Self {
        Self { ranks }
    }

    pub fn ranks(&self) -> &[u32] {
        &self.ranks
    }

    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }

    /// The `k` best-ranked token indices, ties by lower index.
    pub fn top_k(&self, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.ranks.len()).collect();
        idx.sort_by_key(|&i| (self.ranks[i], i));
        idx.truncate(k);
        idx
    }

    pub fn restrict(&self, indices: &[usize]) -> Ranking {
        Ranking {
            ranks: indices.iter().map(|&i| self.ranks[i]).collect(),
        }
    }

    pub fn reversed(&self) -> Ranking {
        let mut ranks = self.ranks.clone();
        ranks.reverse();
        Ranking { ranks }
    }
}

/// Result of a tau-b evaluation. `degenerate` is set when one of the rankings
/// is constant, in which case `value` is 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauB {
    pub value: f64,
    pub degenerate: bool,
}

/// Pair counts behind tau-b: concordant, discordant, tied only in the first
/// ranking, tied only in the second. Pairs tied in both are dropped.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PairCounts {
    pub concordant: u64,
    pub discordant: u64,
    pub ties_a: u64,
    pub ties_b: u64,
}

impl PairCounts {
    pub fn tau_b(&self) -> TauB {
        let p = self.concordant as f64;
        let q = self.discordant as f64;
        let t = self.ties_a as f64;
        let u = self.ties_b as f64;
        let denom = ((p + q + t) * (p + q + u)).sqrt();
        if denom == 0.0 {
            TauB {
                value: 0.0,
                degenerate: true,
            }
        } else {
            TauB {
                value: ((p - q) / denom).clamp(-1.0, 1.0),
                degenerate: false,
            }
        }
    }
}

pub fn pair_counts(a: &[u32], b: &[u32]) -> PairCounts {
    let mut c = PairCounts::default();
    let n = a.len();
    for i in 0..n {
        for j in (i + 1)..n {
            let da = a[i].cmp(&a[j]);
            let db = b[i].cmp(&b[j]);
            use std::cmp::Ordering::Equal;
            match (da, db) {
                (Equal, Equal) => {}
                (Equal, _) => c.ties_a += 1,
                (_, Equal) => c.ties_b += 1,
                (x, y) if x == y => c.concordant += 1,
                _ => c.discordant += 1,
            }
        }
    }
    c
}

/// Kendall's tau-b between two rankings of equal length.
pub fn kendall_tau_b(a: &Ranking, b: &Ranking) -> Result<TauB, RankError> {
    if a.len() != b.len() {
        return Err(RankError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(RankError::TooShort(a.len()));
    }
    Ok(pair_counts(&a.ranks, &b.ranks).tau_b())
}

/// Competition ranking of a score vector, highest score first.
pub fn rank_scores(s: &ScoreVector) -> Ranking {
    let order = s.order_desc();
    let v = s.values();
    let mut ranks = vec![0u32; v.len()];
    let mut pos = 0;
    while pos < order.len() {
        let mut end = pos + 1;
        while end < order.len() && v[order[end]] == v[order[pos]] {
            end += 1;
        }
        for &i in &order[pos..end] {
            ranks[i] = pos as u32 + 1;
        }
        pos = end;
    }
    Ranking { ranks }
}

/// Which tokens a layer pair is compared on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Restriction {
    /// The earlier layer's `k` best-ranked tokens, recomputed for every pair.
    EarlierTopK(usize),
    /// A fixed token-index set used for every pair.
    Indices(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauProfile {
    pub per_pair: Vec<f64>,
    pub mean_tau: f64,
    pub k_used: usize,
    /// Number of layer pairs whose tau-b hit the all-tied case.
    pub degenerate_pairs: usize,
}

pub fn layerwise_tau(rankings: &[Ranking], restriction: &Restriction) -> Result<TauProfile, RankError> {
    if rankings.len() < 2 {
        return Err(RankError::TooFewRankings(rankings.len()));
    }
    let n = rankings[0].len();
    if let Some(r) = rankings.iter().find(|r| r.len() != n) {
        return Err(RankError::LengthMismatch {
            left: n,
            right: r.len(),
        });
    }
    let k_used = match restriction {
        Restriction::EarlierTopK(k) => (*k).min(n),
        Restriction::Indices(set) => {
            if let Some(&index) = set.iter().find(|&&i| i >= n) {
                return Err(RankError::RestrictionOutOfRange { index, len: n });
            }
            set.len()
        }
    };
    if k_used < 2 {
        return Err(RankError::RestrictionTooSmall(k_used));
    }

    let mut per_pair = Vec::with_capacity(rankings.len() - 1);
    let mut degenerate_pairs = 0;
    for w in rankings.windows(2) {
        let subset = match restriction {
            Restriction::EarlierTopK(_) => w[0].top_k(k_used),
            Restriction::Indices(set) => set.clone(),
        };
        let tau = kendall_tau_b(&w[0].restrict(&subset), &w[1].restrict(&subset))?;
        if tau.degenerate {
            degenerate_pairs += 1;
        }
        per_pair.push(tau.value);
    }
    let mean_tau = per_pair.iter().sum::<f64>() / per_pair.len() as f64;
    Ok(TauProfile {
        per_pair,
        mean_tau,
        k_used,
        degenerate_pairs,
    })
}

/// Shannon entropy (natural log) of the normalized score distribution.
pub fn shannon_entropy(s: &ScoreVector) -> Result<f64, RankError> {
    if let Some((index, &value)) = s.values().iter().enumerate().find(|(_, v)| **v < 0.0) {
        return Err(RankError::Negative { index, value });
    }
    let total: f64 = s.values().iter().sum();
    if total <= 0.0 {
        return Err(RankError::ZeroSum);
    }
    Ok(s.values()
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| {
            let p = v / total;
            -p * p.ln()
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(v: &[u32]) -> Ranking {
        Ranking::from_ranks(v.to_vec())
    }

    #[test]
    fn tau_identity_and_reverse() {
        let a = r(&[1, 2, 3, 4]);
        assert_eq!(kendall_tau_b(&a, &a).unwrap().value, 1.0);
        assert_eq!(kendall_tau_b(&a, &r(&[4, 3, 2, 1])).unwrap().value, -1.0);
    }

    #[test]
    fn tau_hand_counted() {
        // 8 concordant, 2 discordant over 10 pairs.
        let t = kendall_tau_b(&r(&[1, 2, 3, 4, 5]), &r(&[2, 1, 3, 5, 4])).unwrap();
        assert!((t.value - 0.6).abs() < 1e-15);

        // P=5, Q=0, T=1, U=0.
        let a = r(&[1, 1, 3, 4]);
        let b = r(&[1, 2, 3, 4]);
        let c = pair_counts(a.ranks(), b.ranks());
        assert_eq!(
            c,
            PairCounts {
                concordant: 5,
                discordant: 0,
                ties_a: 1,
                ties_b: 0
            }
        );
        let t = kendall_tau_b(&a, &b).unwrap();
        assert!((t.value - 5.0 / 30f64.sqrt()).abs() < 1e-15);
        assert!((t.value - 0.9129).abs() < 1e-4);
    }

    #[test]
    fn tau_errors_and_degenerate() {
        assert_eq!(
            kendall_tau_b(&r(&[1, 2]), &r(&[1, 2, 3])),
            Err(RankError::LengthMismatch { left: 2, right: 3 })
        );
        assert_eq!(kendall_tau_b(&r(&[1]), &r(&[1])), Err(RankError::TooShort(1)));
        let t = kendall_tau_b(&r(&[1, 1, 1]), &r(&[1, 2, 3])).unwrap();
        assert!(t.degenerate);
        assert_eq!(t.value, 0.0);
    }

    #[test]
    fn rank_examples() {
        let rk = |v: &[f64]| rank_scores(&ScoreVector::new(v.to_vec()).unwrap()).ranks().to_vec();
        assert_eq!(rk(&[0.5, 0.9, 0.1]), vec![2, 1, 3]);
        assert_eq!(rk(&[0.3, 0.3, 0.3]), vec![1, 1, 1]);
        assert_eq!(rk(&[0.7, 0.7, 0.2, 0.9]), vec![2, 2, 4, 1]);
    }

    #[test]
    fn rank_rejects_nan() {
        assert!(matches!(
            ScoreVector::new(vec![1.0, f64::NAN]),
            Err(RankError::NonFinite { index: 1, .. })
        ));
        assert_eq!(ScoreVector::new(vec![]), Err(RankError::Empty));
    }

    #[test]
    fn layerwise_examples() {
        let a = r(&[1, 2, 3, 4, 5]);
        let p = layerwise_tau(&[a.clone(), a.clone(), a.clone()], &Restriction::EarlierTopK(5)).unwrap();
        assert_eq!(p.per_pair, vec![1.0, 1.0]);
        assert_eq!(p.mean_tau, 1.0);

        let rev = a.reversed();
        let p = layerwise_tau(
            &[a.clone(), rev.clone(), a.clone(), rev],
            &Restriction::Indices(vec![0, 1, 2, 3, 4]),
        )
        .unwrap();
        assert_eq!(p.per_pair, vec![-1.0, -1.0, -1.0]);

        assert_eq!(
            layerwise_tau(&[a.clone(), a.clone()], &Restriction::Indices(vec![3])),
            Err(RankError::RestrictionTooSmall(1))
        );
        assert_eq!(
            layerwise_tau(&[a.clone(), a.clone()], &Restriction::Indices(vec![0, 9])),
            Err(RankError::RestrictionOutOfRange { index: 9, len: 5 })
        );
        assert_eq!(
            layerwise_tau(&[a], &Restriction::EarlierTopK(2)),
            Err(RankError::TooFewRankings(1))
        );
    }

    #[test]
    fn earlier_layer_top_k_defines_subset() {
        // Layer 0 trusts tokens 0,1,2; layer 1 reverses exactly those three.
        let l0 = r(&[1, 2, 3, 4, 5, 6]);
        let l1 = r(&[3, 2, 1, 4, 5, 6]);
        let p = layerwise_tau(&[l0, l1], &Restriction::EarlierTopK(3)).unwrap();
        assert_eq!(p.per_pair, vec![-1.0]);
        assert_eq!(p.k_used, 3);
    }

    #[test]
    fn entropy_examples() {
        let h = |v: &[f64]| shannon_entropy(&ScoreVector::new(v.to_vec()).unwrap());
        assert!((h(&[1.0; 4]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert_eq!(h(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        let expect = -(0.5 * 0.5f64.ln() + 2.0 * 0.25 * 0.25f64.ln());
        assert!((h(&[0.5, 0.25, 0.25]).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 1.0397).abs() < 1e-4);
        assert!(matches!(h(&[1.0, -0.1]), Err(RankError::Negative { index: 1, .. })));
        assert_eq!(h(&[0.0, 0.0]), Err(RankError::ZeroSum));
    }
}
