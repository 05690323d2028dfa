//! Synthetic substrate: a seeded toy transformer, a generator for the two
//! attention regimes, on-disk scenario datasets, and the evaluation metrics
//! used on them.

mod dataset;
mod scenario;
mod toy;

pub use dataset::{read_dataset, read_entry, read_manifest, write_dataset, Manifest, ManifestEntry, MANIFEST_FILE};
pub use scenario::{
    derive_seed, generate_scenario, generate_scenario_with, plan_episode, EpisodeSpec, FramePlan, LabeledFrame, Regime,
    ScenarioSpec,
};
pub use toy::{output_drift, toy_forward, ForwardPass, ToyModel, ToyModelSpec};

use thiserror::Error;

use crate::attention::{AtnsError, AttentionError};
use crate::strategies::{SelectionResult, StrategyError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible scenario: {0}")]
    Infeasible(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("signal set is empty")]
    EmptySignal,
    #[error("AUC needs both regimes present (type1: {type1}, type2: {type2})")]
    SingleClass { type1: usize, type2: usize },
    #[error("{path}: {source}")]
    Atns { path: String, source: AtnsError },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Runtime(#[from] Box<crate::runtime::RuntimeError>),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<crate::runtime::RuntimeError> for SynthError {
    fn from(e: crate::runtime::RuntimeError) -> Self {
        SynthError::Runtime(Box::new(e))
    }
}

/// Fraction of the informative tokens that survived selection.
pub fn signal_recall(selection: &SelectionResult, signal_indices: &[usize]) -> Result<f64, SynthError> {
    if signal_indices.is_empty() {
        return Err(SynthError::EmptySignal);
    }
    let hits = signal_indices
        .iter()
        .filter(|i| selection.retained.binary_search(i).is_ok())
        .count();
    Ok(hits as f64 / signal_indices.len() as f64)
}

/// ROC AUC of `score` as a predictor of the positive class, via the
/// Mann-Whitney rank sum with mid-ranks, so ties count one half.
pub fn auc_rank_sum(positive: &[f64], negative: &[f64]) -> Result<f64, SynthError> {
    if positive.is_empty() || negative.is_empty() {
        return Err(SynthError::SingleClass {
            type1: negative.len(),
            type2: positive.len(),
        });
    }
    let mut all: Vec<(f64, bool)> = positive
        .iter()
        .map(|&v| (v, true))
        .chain(negative.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i + 1;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // Mid-rank of positions i..j (1-based).
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum_pos += mid * all[i..j].iter().filter(|(_, p)| *p).count() as f64;
        i = j;
    }
    let (np, nn) = (positive.len() as f64, negative.len() as f64);
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn))
}

/// AUC of mean tau for predicting Type 2 over `(regime, mean_tau)` pairs.
pub fn auc_tau(labeled: &[(Regime, f64)]) -> Result<f64, SynthError> {
    let pos: Vec<f64> = labeled
        .iter()
        .filter(|(r, _)| *r == Regime::Type2)
        .map(|p| p.1)
        .collect();
    let neg: Vec<f64> = labeled
        .iter()
        .filter(|(r, _)| *r == Regime::Type1)
        .map(|p| p.1)
        .collect();
    auc_rank_sum(&pos, &neg)
}

/// Computes each frame's mean inter-layer tau with `restriction` and returns
/// the AUC for predicting Type 2.
pub fn auc_tau_classifier(frames: &[LabeledFrame], from_layer: usize, tau_k: usize) -> Result<f64, SynthError> {
    let labeled = frames
        .iter()
        .map(|f| {
            Ok((
                f.regime,
                crate::runtime::frame_tau(&f.stack, from_layer, tau_k)?.mean_tau,
            ))
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    auc_tau(&labeled)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sel(v: &[usize]) -> SelectionResult {
        SelectionResult::pure(crate::strategies::StrategyKind::TopK, v.to_vec())
    }

    #[test]
    fn recall_examples() {
        assert_eq!(signal_recall(&sel(&[1, 2, 3, 4]), &[2, 4]).unwrap(), 1.0);
        assert_eq!(signal_recall(&sel(&[1, 3]), &[2, 4]).unwrap(), 0.0);
        assert_eq!(signal_recall(&sel(&[1, 2]), &[2, 4]).unwrap(), 0.5);
        assert!(matches!(signal_recall(&sel(&[1]), &[]), Err(SynthError::EmptySignal)));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_rank_sum(&[0.9, 0.8], &[0.1, 0.2, 0.3]).unwrap(), 1.0);
        assert_eq!(auc_rank_sum(&[0.1, 0.2], &[0.8, 0.9]).unwrap(), 0.0);
        assert_eq!(auc_rank_sum(&[0.5; 3], &[0.5; 4]).unwrap(), 0.5);
        assert!(matches!(auc_rank_sum(&[], &[0.1]), Err(SynthError::SingleClass { .. })));
    }
}
