//! Online pruning loop.
//!
//! The first frame of a session becomes the anchor and its tau sets the
//! selection policy. Later frames are compared with the anchor by cosine
//! similarity of their observation vectors; tau and the trust weight are
//! only recomputed when similarity drops below `gamma`, and the triggering
//! frame becomes the new anchor. Importance scores are recomputed every
//! frame unless `reuse_indices` is set.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{flops_estimate, importance_scores, score_series, AttentionError, AttentionStack, ModelDims};
use crate::policy::{
    hard_ties_select, soft_ties_select, trust_weight, CalibrationProfile, PolicyError, PolicyMode, PruneConfig,
};
use crate::rankmetrics::{layerwise_tau, rank_scores, RankError, Restriction, TauProfile};
use crate::strategies::{FeatureMatrix, SelectionResult, StrategyError};
use crate::synth::{output_drift, SynthError, ToyModel};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("observation is empty")]
    EmptyObservation,
    #[error("observation has a non-finite entry")]
    NonFiniteObservation,
    #[error("observation is the zero vector")]
    ZeroObservation,
    #[error("observation lengths differ: {0} vs {1}")]
    ObservationLength(usize, usize),
    #[error("frame {frame_id} has {features} visual tokens but its attention stack has {stack}")]
    SeqLenMismatch {
        frame_id: u64,
        features: usize,
        stack: usize,
    },
    #[error("token feature dimension changed from {0} to {1} within a session")]
    FeatureDim(usize, usize),
    #[error("soft mode needs a calibration profile")]
    MissingProfile,
    #[error("gamma is NaN")]
    BadGamma,
    #[error("prune_from_layer {layer} leaves fewer than 2 layers in a {layers}-layer stack")]
    PruneLayer { layer: usize, layers: usize },
    #[error("episode has no frames")]
    EmptyEpisode,
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Rank(#[from] RankError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error("dual execution: {0}")]
    Model(String),
}

impl RuntimeError {
    /// Whether the failure comes from inputs that disagree with each other
    /// rather than from a malformed input.
    pub fn is_consistency(&self) -> bool {
        matches!(
            self,
            RuntimeError::ObservationLength(..)
                | RuntimeError::SeqLenMismatch { .. }
                | RuntimeError::FeatureDim(..)
                | RuntimeError::PruneLayer { .. }
                | RuntimeError::Model(_)
        )
    }

    /// Whether the failure is a malformed or missing input on its own.
    pub fn is_input(&self) -> bool {
        matches!(
            self,
            RuntimeError::EmptyObservation
                | RuntimeError::NonFiniteObservation
                | RuntimeError::ZeroObservation
                | RuntimeError::MissingProfile
                | RuntimeError::BadGamma
                | RuntimeError::EmptyEpisode
                | RuntimeError::Attention(_)
        )
    }
}

/// One observation. `observation` is what similarity is measured on; for
/// synthetic frames it is the mean token-feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub frame_id: u64,
    pub observation: Vec<f64>,
    pub token_features: FeatureMatrix,
}

impl Frame {
    pub fn new(frame_id: u64, observation: Vec<f64>, token_features: FeatureMatrix) -> Result<Self, RuntimeError> {
        if observation.is_empty() {
            return Err(RuntimeError::EmptyObservation);
        }
        if observation.iter().any(|v| !v.is_finite()) {
            return Err(RuntimeError::NonFiniteObservation);
        }
        Ok(Self {
            frame_id,
            observation,
            token_features,
        })
    }

    pub fn from_features(frame_id: u64, token_features: FeatureMatrix) -> Result<Self, RuntimeError> {
        Self::new(frame_id, token_features.mean_row(), token_features)
    }
}

/// Cosine similarity of two frames' observations, clamped to [-1, 1].
pub fn frame_similarity(a: &Frame, b: &Frame) -> Result<f64, RuntimeError> {
    let (x, y) = (&a.observation, &b.observation);
    if x.len() != y.len() {
        return Err(RuntimeError::ObservationLength(x.len(), y.len()));
    }
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Err(RuntimeError::ZeroObservation);
    }
    let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
    Ok((dot / (nx * ny)).clamp(-1.0, 1.0))
}

/// Mean inter-layer tau of one frame, scored from `from_layer` to the last
/// layer and tracked on each earlier layer's `tau_k` best tokens.
pub fn frame_tau(stack: &AttentionStack, from_layer: usize, tau_k: usize) -> Result<TauProfile, RuntimeError> {
    if from_layer + 2 > stack.layers() {
        return Err(RuntimeError::PruneLayer {
            layer: from_layer,
            layers: stack.layers(),
        });
    }
    let series = score_series(stack, from_layer)?;
    let rankings: Vec<_> = series.per_layer.iter().map(rank_scores).collect();
    Ok(layerwise_tau(&rankings, &Restriction::EarlierTopK(tau_k))?)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RuntimeState {
    pub anchor: Option<Frame>,
    pub tau_curr: Option<f64>,
    pub w_curr: Option<f64>,
    pub recompute_count: u64,
    pub frames_seen: u64,
    last_retained: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    #[serde(rename = "type")]
    pub kind: String,
    pub schema_version: u32,
    pub frame_id: u64,
    pub triggered: bool,
    pub tau_used: f64,
    pub w_used: f64,
    pub n_visual: usize,
    pub retained_count: usize,
    pub reduction: f64,
    pub selection: SelectionResult,
    pub flops_full: f64,
    pub flops_pruned: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub output_drift: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    #[serde(rename = "type")]
    pub kind: String,
    pub schema_version: u32,
    pub complete: bool,
    pub n_frames: usize,
    pub recompute_count: u64,
    pub recompute_rate: f64,
    pub mean_reduction: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_output_drift: Option<f64>,
    pub total_flops_full: f64,
    pub total_flops_pruned: f64,
    pub flops_saved: f64,
}

impl EpisodeSummary {
    pub fn from_reports(reports: &[StepReport], complete: bool) -> Self {
        let n = reports.len();
        let nf = n.max(1) as f64;
        let recompute_count = reports.iter().filter(|r| r.triggered).count() as u64;
        let drifts: Vec<f64> = reports.iter().filter_map(|r| r.output_drift).collect();
        let total_flops_full: f64 = reports.iter().map(|r| r.flops_full).sum();
        let total_flops_pruned: f64 = reports.iter().map(|r| r.flops_pruned).sum();
        Self {
            kind: "summary".into(),
            schema_version: REPORT_SCHEMA_VERSION,
            complete,
            n_frames: n,
            recompute_count,
            recompute_rate: recompute_count as f64 / nf,
            mean_reduction: reports.iter().map(|r| r.reduction).sum::<f64>() / nf,
            mean_output_drift: (!drifts.is_empty()).then(|| drifts.iter().sum::<f64>() / drifts.len() as f64),
            total_flops_full,
            total_flops_pruned,
            flops_saved: total_flops_full - total_flops_pruned,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub reports: Vec<StepReport>,
    pub summary: EpisodeSummary,
}

/// A failed episode with the reports emitted before the failure.
#[derive(Debug, Error)]
#[error("episode aborted at step {step}: {source}")]
pub struct EpisodeError {
    pub step: usize,
    pub partial: Episode,
    #[source]
    pub source: RuntimeError,
}

/// Session-wide settings of the online loop.
pub struct Runtime<'a> {
    pub cfg: PruneConfig,
    pub profile: Option<&'a CalibrationProfile>,
    /// Values above 1 recompute every frame; values at or below -1 only on
    /// the first frame.
    pub gamma: f64,
    /// Reuse the anchor's retained indices verbatim between triggers.
    pub reuse_indices: bool,
    /// Model width used for the FLOPs estimate.
    pub d_model: usize,
    /// When set, each frame also runs the toy model at full and pruned width
    /// and reports the output distance.
    pub dual_execution: Option<&'a ToyModel>,
}

impl<'a> Runtime<'a> {
    pub fn new(cfg: PruneConfig, profile: Option<&'a CalibrationProfile>, gamma: f64, d_model: usize) -> Self {
        Self {
            cfg,
            profile,
            gamma,
            reuse_indices: false,
            d_model,
            dual_execution: None,
        }
    }

    pub fn step(
        &self,
        state: &RuntimeState,
        frame: &Frame,
        stack: &AttentionStack,
    ) -> Result<(RuntimeState, StepReport), RuntimeError> {
        if self.gamma.is_nan() {
            return Err(RuntimeError::BadGamma);
        }
        self.cfg.validate()?;
        if self.cfg.mode == PolicyMode::Soft && self.profile.is_none() {
            return Err(RuntimeError::MissingProfile);
        }
        let layout = stack.layout();
        let n_visual = layout.n_visual;
        if frame.token_features.rows() != n_visual {
            return Err(RuntimeError::SeqLenMismatch {
                frame_id: frame.frame_id,
                features: frame.token_features.rows(),
                stack: n_visual,
            });
        }
        if let Some(anchor) = &state.anchor {
            if anchor.token_features.dim() != frame.token_features.dim() {
                return Err(RuntimeError::FeatureDim(
                    anchor.token_features.dim(),
                    frame.token_features.dim(),
                ));
            }
        }

        let triggered = match &state.anchor {
            None => true,
            Some(anchor) => frame_similarity(frame, anchor)? < self.gamma,
        };

        let mut next = state.clone();
        let from = self.cfg.prune_from_layer;
        if triggered {
            let tau = frame_tau(stack, from, self.cfg.tau_k(n_visual)?)?.mean_tau;
            let w = match self.cfg.mode {
                PolicyMode::Soft => trust_weight(tau, self.profile.ok_or(RuntimeError::MissingProfile)?).value,
                PolicyMode::Hard => {
                    if tau > self.cfg.threshold(self.profile)? {
                        0.0
                    } else {
                        1.0
                    }
                }
            };
            next.anchor = Some(frame.clone());
            next.tau_curr = Some(tau);
            next.w_curr = Some(w);
            next.recompute_count += 1;
        }
        let tau = next.tau_curr.expect("tau set on first frame");
        let w = next.w_curr.expect("weight set on first frame");

        let reuse = self.reuse_indices && !triggered && state.last_retained.is_some();
        let selection = if reuse {
            let retained = state.last_retained.clone().expect("checked above");
            let (n_top, n_alt) = crate::policy::split_budget(w, retained.len());
            SelectionResult {
                n_top,
                n_alt,
                trust_weight: w,
                strategy_trace: format!("reused({})", retained.len()),
                retained,
            }
        } else {
            let scores = importance_scores(stack, from)?;
            let features = Some(&frame.token_features);
            match self.cfg.mode {
                PolicyMode::Soft => soft_ties_select(&scores, w, &self.cfg, features)?,
                PolicyMode::Hard => {
                    hard_ties_select(&scores, tau, self.cfg.threshold(self.profile)?, &self.cfg, features)?
                }
            }
        };
        next.last_retained = Some(selection.retained.clone());
        next.frames_seen += 1;

        let dims = ModelDims {
            layers: stack.layers(),
            heads: stack.heads(),
            d_model: self.d_model,
        };
        let kept = selection.retained.len();
        let flops_full = flops_estimate(n_visual, layout, dims, from);
        let flops_pruned = flops_estimate(kept, layout, dims, from);

        let drift = match self.dual_execution {
            None => None,
            Some(model) => Some(
                self.dual_drift(model, frame, &selection.retained)
                    .map_err(|e| RuntimeError::Model(e.to_string()))?,
            ),
        };

        let report = StepReport {
            kind: "step".into(),
            schema_version: REPORT_SCHEMA_VERSION,
            frame_id: frame.frame_id,
            triggered,
            tau_used: tau,
            w_used: w,
            n_visual,
            retained_count: kept,
            reduction: 1.0 - kept as f64 / n_visual as f64,
            selection,
            flops_full,
            flops_pruned,
            output_drift: drift,
        };
        Ok((next, report))
    }

    fn dual_drift(&self, model: &ToyModel, frame: &Frame, retained: &[usize]) -> Result<f64, SynthError> {
        let input = model.assemble_input(&frame.token_features)?;
        let from = self.cfg.prune_from_layer;
        let full = model.forward(&input, None, from)?;
        let pruned = model.forward(&input, Some(retained), from)?;
        Ok(output_drift(&full.output, &pruned.output))
    }

    /// Applies [`Runtime::step`] over a stream of frames.
    pub fn run_episode<I>(&self, frames: I) -> Result<Episode, Box<EpisodeError>>
    where
        I: IntoIterator<Item = (Frame, AttentionStack)>,
    {
        let mut state = RuntimeState::default();
        let mut reports = Vec::new();
        for (step, (frame, stack)) in frames.into_iter().enumerate() {
            match self.step(&state, &frame, &stack) {
                Ok((next, report)) => {
                    state = next;
                    reports.push(report);
                }
                Err(source) => {
                    let summary = EpisodeSummary::from_reports(&reports, false);
                    return Err(Box::new(EpisodeError {
                        step,
                        partial: Episode { reports, summary },
                        source,
                    }));
                }
            }
        }
        if reports.is_empty() {
            return Err(Box::new(EpisodeError {
                step: 0,
                partial: Episode {
                    reports: Vec::new(),
                    summary: EpisodeSummary::from_reports(&[], false),
                },
                source: RuntimeError::EmptyEpisode,
            }));
        }
        let summary = EpisodeSummary::from_reports(&reports, true);
        Ok(Episode { reports, summary })
    }
}

/// Serializes an episode as newline-delimited JSON: one line per step, then
/// the summary line.
pub fn episode_ndjson(episode: &Episode) -> Result<String, serde_json::Error> {
    let mut out = String::new();
    for r in &episode.reports {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    out.push_str(&serde_json::to_string(&episode.summary)?);
    out.push('\n');
    Ok(out)
}
