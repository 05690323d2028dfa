//! Consistency-guided selection policy.
//!
//! Offline, the mean inter-layer tau of a sample of frames is summarized into
//! a [`CalibrationProfile`]. Online, a frame's tau is turned either into a
//! binary choice between Top-k and the alternative strategy (hard mode) or
//! into a trust weight that splits the token budget between the two (soft
//! mode). High tau means the attention ranking is frozen across layers, which
//! is treated as a reason to trust attention magnitude less.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rankmetrics::ScoreVector;
use crate::strategies::{select_among, select_top_k, FeatureMatrix, SelectionResult, StrategyError, StrategyKind};

pub const PROFILE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("calibration needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("tau sample {index} = {value} is outside [-1, 1]")]
    TauOutOfRange { index: usize, value: f64 },
    #[error("profile field {0} is inconsistent with its samples")]
    InconsistentProfile(&'static str),
    #[error("unsupported profile version {0}")]
    Version(u32),
    #[error("prune ratio {0} is outside (0, 1]")]
    BadRatio(f64),
    #[error("prune ratio {ratio} keeps no tokens out of {n_visual}")]
    EmptyBudget { ratio: f64, n_visual: usize },
    #[error("prune_from_layer must be at least 1")]
    BadPruneLayer,
    #[error("tau threshold {0} is not finite")]
    BadThreshold(f64),
    #[error("hard mode needs a tau threshold or a calibration profile")]
    NoThreshold,
    #[error("budget {budget} is outside 1..={n_visual}")]
    BadBudget { budget: usize, n_visual: usize },
    #[error("trust weight {0} is outside [0, 1]")]
    BadWeight(f64),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Linear-interpolation quantile of sorted data: position `p (n - 1)`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean of the two central order statistics for even counts.
pub fn median_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Summary of the tau distribution over an offline frame sample. The full
/// sample is kept so other interpolation rules can be evaluated later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationProfile {
    pub version: u32,
    pub source_id: String,
    pub sample_count: usize,
    pub tau_samples: Vec<f64>,
    pub tau_med: f64,
    pub q10: f64,
    pub q25: f64,
    pub q75: f64,
    pub q90: f64,
}

pub fn calibrate(taus: &[f64], source_id: &str) -> Result<CalibrationProfile, PolicyError> {
    if taus.len() < 2 {
        return Err(PolicyError::TooFewSamples(taus.len()));
    }
    if let Some((index, &value)) = taus.iter().enumerate().find(|(_, v)| !v.is_finite() || v.abs() > 1.0) {
        return Err(PolicyError::TauOutOfRange { index, value });
    }
    let mut sorted = taus.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(CalibrationProfile {
        version: PROFILE_VERSION,
        source_id: source_id.to_owned(),
        sample_count: taus.len(),
        tau_samples: taus.to_vec(),
        tau_med: median_sorted(&sorted),
        q10: quantile_sorted(&sorted, 0.10),
        q25: quantile_sorted(&sorted, 0.25),
        q75: quantile_sorted(&sorted, 0.75),
        q90: quantile_sorted(&sorted, 0.90),
    })
}

impl CalibrationProfile {
    /// Recomputes the summary from `tau_samples` and checks it matches.
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.version != PROFILE_VERSION {
            return Err(PolicyError::Version(self.version));
        }
        if self.sample_count != self.tau_samples.len() {
            return Err(PolicyError::InconsistentProfile("sample_count"));
        }
        let fresh = calibrate(&self.tau_samples, &self.source_id)?;
        let checks = [
            ("tau_med", fresh.tau_med, self.tau_med),
            ("q10", fresh.q10, self.q10),
            ("q25", fresh.q25, self.q25),
            ("q75", fresh.q75, self.q75),
            ("q90", fresh.q90, self.q90),
        ];
        for (name, want, got) in checks {
            if want.to_bits() != got.to_bits() {
                return Err(PolicyError::InconsistentProfile(name));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, PolicyError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, PolicyError> {
        let p: Self = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrustWeight {
    pub value: f64,
    /// Set when q90 == q10 and the ramp has no width; `value` is then 0.5.
    pub degenerate: bool,
}

/// Decreasing linear ramp from full trust at q10 to no trust at q90.
pub fn trust_weight(tau_curr: f64, profile: &CalibrationProfile) -> TrustWeight {
    let width = profile.q90 - profile.q10;
    if width <= 0.0 {
        return TrustWeight {
            value: 0.5,
            degenerate: true,
        };
    }
    TrustWeight {
        value: ((profile.q90 - tau_curr) / width).clamp(0.0, 1.0),
        degenerate: false,
    }
}

/// `(n_top, n_alt)` with `n_top = floor(w * budget)`.
pub fn split_budget(w: f64, budget: usize) -> (usize, usize) {
    let n_top = ((w * budget as f64).floor() as usize).min(budget);
    (n_top, budget - n_top)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    Hard,
    Soft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    /// Fraction of visual tokens kept, in (0, 1].
    pub prune_ratio: f64,
    pub mode: PolicyMode,
    /// Hard-mode threshold. Falls back to the profile median when absent.
    #[serde(default)]
    pub tau_threshold: Option<f64>,
    #[serde(default = "default_alt")]
    pub alt_strategy: StrategyKind,
    /// Bottom-k pool when the alternative strategy is Bottom-k.
    #[serde(default)]
    pub alt_pool_k: Option<usize>,
    #[serde(default = "default_prune_layer")]
    pub prune_from_layer: usize,
    /// Tokens tracked for tau. Defaults to the budget.
    #[serde(default)]
    pub tau_k: Option<usize>,
}

fn default_alt() -> StrategyKind {
    StrategyKind::UniformRank
}

fn default_prune_layer() -> usize {
    1
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            prune_ratio: 56.0 / 256.0,
            mode: PolicyMode::Soft,
            tau_threshold: None,
            alt_strategy: default_alt(),
            alt_pool_k: None,
            prune_from_layer: default_prune_layer(),
            tau_k: None,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(self.prune_ratio > 0.0 && self.prune_ratio <= 1.0) {
            return Err(PolicyError::BadRatio(self.prune_ratio));
        }
        if self.prune_from_layer < 1 {
            return Err(PolicyError::BadPruneLayer);
        }
        if let Some(t) = self.tau_threshold {
            if !t.is_finite() {
                return Err(PolicyError::BadThreshold(t));
            }
        }
        Ok(())
    }

    /// `floor(prune_ratio * n_visual)`, at least 1.
    pub fn budget(&self, n_visual: usize) -> Result<usize, PolicyError> {
        self.validate()?;
        let b = (self.prune_ratio * n_visual as f64).floor() as usize;
        if b == 0 {
            return Err(PolicyError::EmptyBudget {
                ratio: self.prune_ratio,
                n_visual,
            });
        }
        Ok(b.min(n_visual))
    }

    pub fn tau_k(&self, n_visual: usize) -> Result<usize, PolicyError> {
        Ok(match self.tau_k {
            Some(k) => k.min(n_visual),
            None => self.budget(n_visual)?,
        })
    }

    pub fn threshold(&self, profile: Option<&CalibrationProfile>) -> Result<f64, PolicyError> {
        self.tau_threshold
            .or(profile.map(|p| p.tau_med))
            .ok_or(PolicyError::NoThreshold)
    }
}

/// All-or-nothing selection: the alternative strategy when `tau_curr`
/// strictly exceeds the threshold, Top-k otherwise.
pub fn hard_ties_select(
    s: &ScoreVector,
    tau_curr: f64,
    threshold: f64,
    cfg: &PruneConfig,
    features: Option<&FeatureMatrix>,
) -> Result<SelectionResult, PolicyError> {
    let budget = cfg.budget(s.len())?;
    let locked = tau_curr > threshold;
    let w = if locked { 0.0 } else { 1.0 };
    let mut res = blend_select(s, w, budget, cfg, features)?;
    res.strategy_trace = format!(
        "hard(tau={tau_curr:.6} {} {threshold:.6}) -> {}",
        if locked { ">" } else { "<=" },
        res.strategy_trace
    );
    Ok(res)
}

/// Blended selection: `floor(w * budget)` tokens by attention rank, the rest
/// by the alternative strategy over the tokens not already taken.
pub fn soft_ties_select(
    s: &ScoreVector,
    w: f64,
    cfg: &PruneConfig,
    features: Option<&FeatureMatrix>,
) -> Result<SelectionResult, PolicyError> {
    if !(0.0..=1.0).contains(&w) {
        return Err(PolicyError::BadWeight(w));
    }
    let budget = cfg.budget(s.len())?;
    let mut res = blend_select(s, w, budget, cfg, features)?;
    res.strategy_trace = format!("soft(w={w:.6}) -> {}", res.strategy_trace);
    Ok(res)
}

/// The shared core of both policies with an explicit budget: `floor(w *
/// budget)` tokens by attention rank, then `cfg.alt_strategy` over the rest.
pub fn blend_select(
    s: &ScoreVector,
    w: f64,
    budget: usize,
    cfg: &PruneConfig,
    features: Option<&FeatureMatrix>,
) -> Result<SelectionResult, PolicyError> {
    if !(0.0..=1.0).contains(&w) {
        return Err(PolicyError::BadWeight(w));
    }
    if budget == 0 || budget > s.len() {
        return Err(PolicyError::BadBudget {
            budget,
            n_visual: s.len(),
        });
    }
    let (n_top, n_alt) = split_budget(w, budget);
    let top = select_top_k(s, n_top)?;
    let mut taken = vec![false; s.len()];
    top.iter().for_each(|&i| taken[i] = true);
    let remaining: Vec<usize> = (0..s.len()).filter(|&i| !taken[i]).collect();
    // A configured pool is relative to the tokens still available.
    let pool = cfg.alt_pool_k.map(|p| p.min(remaining.len()).max(n_alt));
    let alt = select_among(cfg.alt_strategy, n_alt, pool, s, features, &remaining)?;

    let mut retained = top;
    retained.extend(alt);
    retained.sort_unstable();
    Ok(SelectionResult {
        retained,
        n_top,
        n_alt,
        trust_weight: w,
        strategy_trace: format!("top_k({n_top}) + {}({n_alt})", cfg.alt_strategy),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(calibrate(&[0.2, 0.4, 0.6], "t").unwrap().tau_med, 0.4);
        let p = calibrate(&[0.1, 0.3, 0.5, 0.7], "t").unwrap();
        assert!((p.tau_med - 0.4).abs() < 1e-15);
        let p = calibrate(&[0.8, 0.2], "t").unwrap();
        assert_eq!(p.tau_med, 0.5);
    }

    #[test]
    fn calibrate_errors() {
        assert!(matches!(calibrate(&[0.1], "t"), Err(PolicyError::TooFewSamples(1))));
        assert!(matches!(
            calibrate(&[0.1, 1.5], "t"),
            Err(PolicyError::TauOutOfRange { index: 1, .. })
        ));
        assert!(matches!(
            calibrate(&[f64::NAN, 0.5], "t"),
            Err(PolicyError::TauOutOfRange { index: 0, .. })
        ));
    }

    #[test]
    fn trust_weight_ramp() {
        let p = calibrate(&[-0.2, 0.0, 0.2, 0.4, 0.6, 0.8, 1.0], "t").unwrap();
        assert_eq!(trust_weight(p.q10 - 0.1, &p).value, 1.0);
        assert_eq!(trust_weight(p.q10, &p).value, 1.0);
        assert_eq!(trust_weight(p.q90, &p).value, 0.0);
        assert_eq!(trust_weight(1.0, &p).value, 0.0);
        let mid = trust_weight((p.q10 + p.q90) / 2.0, &p).value;
        assert!((mid - 0.5).abs() < 1e-12);

        let flat = calibrate(&[0.3, 0.3, 0.3], "t").unwrap();
        let w = trust_weight(0.9, &flat);
        assert!(w.degenerate);
        assert_eq!(w.value, 0.5);
    }

    #[test]
    fn budget_split() {
        assert_eq!(split_budget(1.0, 56), (56, 0));
        assert_eq!(split_budget(0.0, 56), (0, 56));
        assert_eq!(split_budget(0.5, 56), (28, 28));
        assert_eq!(split_budget(0.999, 56), (55, 1));
    }

    #[test]
    fn config_budget() {
        let cfg = PruneConfig::default();
        assert_eq!(cfg.budget(256).unwrap(), 56);
        assert_eq!(cfg.tau_k(256).unwrap(), 56);
        let bad = PruneConfig {
            prune_ratio: 0.0,
            ..cfg.clone()
        };
        assert!(matches!(bad.budget(256), Err(PolicyError::BadRatio(_))));
        let tiny = PruneConfig {
            prune_ratio: 0.001,
            ..cfg
        };
        assert!(matches!(tiny.budget(256), Err(PolicyError::EmptyBudget { .. })));
    }

    #[test]
    fn hard_boundary_is_strict() {
        let s = ScoreVector::new((0..10).map(|i| i as f64).collect()).unwrap();
        let cfg = PruneConfig {
            prune_ratio: 0.3,
            mode: PolicyMode::Hard,
            ..PruneConfig::default()
        };
        let at = hard_ties_select(&s, 0.5, 0.5, &cfg, None).unwrap();
        assert_eq!(at.retained, select_top_k(&s, 3).unwrap());
        assert_eq!(at.trust_weight, 1.0);
        let above = hard_ties_select(&s, 0.99, 0.5, &cfg, None).unwrap();
        assert_eq!(above.retained, crate::strategies::select_uniform_rank(&s, 3).unwrap());
        assert_eq!(above.trust_weight, 0.0);
    }

    #[test]
    fn soft_rejects_bad_weight() {
        let s = ScoreVector::new(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(matches!(
            soft_ties_select(&s, 1.5, &PruneConfig::default(), None),
            Err(PolicyError::BadWeight(_))
        ));
    }

    #[test]
    fn profile_json_has_exact_fields() {
        let p = calibrate(&[0.1, 0.2, 0.3], "set-a").unwrap();
        let v: serde_json::Value = serde_json::from_str(&p.to_json().unwrap()).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            [
                "q10",
                "q25",
                "q75",
                "q90",
                "sample_count",
                "source_id",
                "tau_med",
                "tau_samples",
                "version"
            ]
        );
        let back = CalibrationProfile::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn tampered_profile_rejected() {
        let mut p = calibrate(&[0.1, 0.2, 0.3], "set-a").unwrap();
        p.tau_med = 0.25;
        assert!(matches!(
            CalibrationProfile::from_json(&p.to_json().unwrap()),
            Err(PolicyError::InconsistentProfile("tau_med"))
        ));
    }
}
