//! Synthetic benchmark sweep: every selection strategy against both regimes
//! and their mix, over a list of token budgets.
//!
//! Frames are generated once. Per frame the harness caches the importance
//! scores at the pruning layer and the mean inter-layer tau, so a cell costs
//! one selection per frame. The TIES rows are calibrated on a separate,
//! held-out set of mixed frames drawn from a derived seed.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{flops_estimate, importance_scores, ModelDims};
use crate::exec::Execution;
use crate::policy::{blend_select, calibrate, trust_weight, CalibrationProfile, PolicyError, PruneConfig};
use crate::rankmetrics::ScoreVector;
use crate::runtime::frame_tau;
use crate::strategies::{select, FeatureMatrix, StrategyKind, StrategySpec};
use crate::synth::{auc_tau, derive_seed, signal_recall, FramePlan, LabeledFrame, Regime, ScenarioSpec, SynthError};

pub const BENCH_SCHEMA_VERSION: u32 = 1;

/// Stream tag for the held-out calibration frames.
const STREAM_CALIBRATION: u64 = 0xCA11;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid bench config: {0}")]
    Config(String),
    #[error("cell (strategy={strategy}, regime={regime}, budget={budget}) failed: {message}")]
    Cell {
        strategy: String,
        regime: String,
        budget: usize,
        message: String,
    },
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchStrategy {
    TopK,
    BottomK,
    UniformRank,
    Middle,
    Diversity,
    HardTies,
    SoftTies,
}

impl BenchStrategy {
    pub const ALL: [BenchStrategy; 7] = [
        BenchStrategy::TopK,
        BenchStrategy::BottomK,
        BenchStrategy::UniformRank,
        BenchStrategy::Middle,
        BenchStrategy::Diversity,
        BenchStrategy::HardTies,
        BenchStrategy::SoftTies,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchStrategy::TopK => "top_k",
            BenchStrategy::BottomK => "bottom_k",
            BenchStrategy::UniformRank => "uniform_rank",
            BenchStrategy::Middle => "middle",
            BenchStrategy::Diversity => "diversity",
            BenchStrategy::HardTies => "hard_ties",
            BenchStrategy::SoftTies => "soft_ties",
        }
    }

    fn pure(self) -> Option<StrategyKind> {
        Some(match self {
            BenchStrategy::TopK => StrategyKind::TopK,
            BenchStrategy::BottomK => StrategyKind::BottomK,
            BenchStrategy::UniformRank => StrategyKind::UniformRank,
            BenchStrategy::Middle => StrategyKind::Middle,
            BenchStrategy::Diversity => StrategyKind::Diversity,
            BenchStrategy::HardTies | BenchStrategy::SoftTies => return None,
        })
    }
}

/// Which frames a row aggregates over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeFilter {
    Type1,
    Type2,
    Mix,
}

impl RegimeFilter {
    pub const ALL: [RegimeFilter; 3] = [RegimeFilter::Type1, RegimeFilter::Type2, RegimeFilter::Mix];

    pub fn name(self) -> &'static str {
        match self {
            RegimeFilter::Type1 => "type1",
            RegimeFilter::Type2 => "type2",
            RegimeFilter::Mix => "mix",
        }
    }

    pub fn admits(self, r: Regime) -> bool {
        match self {
            RegimeFilter::Type1 => r == Regime::Type1,
            RegimeFilter::Type2 => r == Regime::Type2,
            RegimeFilter::Mix => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub scenario: ScenarioSpec,
    /// Evaluation frames generated for each regime.
    pub frames_per_regime: usize,
    /// Held-out frames for the TIES calibration profile, half per regime.
    pub calibration_frames: usize,
    pub budgets: Vec<usize>,
    pub strategies: Vec<BenchStrategy>,
    pub regimes: Vec<RegimeFilter>,
    /// Scoring layer, tau settings, TIES alternative and Hard threshold.
    /// The ratio only sets the default `tau_k`; each cell uses its own budget.
    pub prune: PruneConfig,
    /// Bottom-k pool for the pure Bottom-k rows. Defaults to half of N_v.
    pub bottom_pool_k: Option<usize>,
    /// Model width for the FLOPs ratio.
    pub d_model: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioSpec::default(),
            frames_per_regime: 100,
            calibration_frames: 100,
            budgets: vec![28, 56, 112, 256],
            strategies: BenchStrategy::ALL.to_vec(),
            regimes: RegimeFilter::ALL.to_vec(),
            prune: PruneConfig::default(),
            bottom_pool_k: None,
            d_model: 64,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        self.scenario.validate()?;
        self.prune.validate()?;
        let n_v = self.scenario.n_visual;
        let bad = |m: String| Err(BenchError::Config(m));
        if self.frames_per_regime == 0 {
            return bad("frames_per_regime must be positive".into());
        }
        if self.calibration_frames < 2 {
            return bad("calibration_frames must be at least 2".into());
        }
        if self.budgets.is_empty() || self.strategies.is_empty() || self.regimes.is_empty() {
            return bad("budgets, strategies and regimes must be nonempty".into());
        }
        if let Some(&b) = self.budgets.iter().find(|&&b| b == 0 || b > n_v) {
            return bad(format!("budget {b} is outside 1..={n_v}"));
        }
        if self.prune.prune_from_layer + 2 > self.scenario.layers {
            return bad(format!(
                "prune_from_layer {} leaves fewer than two layer pairs in {} layers",
                self.prune.prune_from_layer, self.scenario.layers
            ));
        }
        if let Some(p) = self.bottom_pool_k {
            if p == 0 || p > n_v {
                return bad(format!("bottom_pool_k {p} is outside 1..={n_v}"));
            }
        }
        if self.d_model == 0 {
            return bad("d_model must be positive".into());
        }
        Ok(())
    }
}

/// One CSV row. Field order is the column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub strategy: String,
    pub regime: String,
    pub budget: usize,
    pub mean_recall: f64,
    pub mean_tau: f64,
    pub auc: f64,
    pub flops_ratio: f64,
    pub n_frames: usize,
    pub seed: u64,
    pub schema_version: u32,
}

/// Per-frame quantities shared by every cell. The attention stack itself is
/// dropped once scores and tau are taken from it.
#[derive(Debug, Clone)]
pub struct PreparedFrame {
    pub frame_id: u64,
    pub regime: Regime,
    pub signal_indices: Vec<usize>,
    pub features: FeatureMatrix,
    pub scores: ScoreVector,
    pub mean_tau: f64,
}

impl PreparedFrame {
    pub fn from_frame(f: &LabeledFrame, from_layer: usize, tau_k: usize) -> Result<Self, SynthError> {
        Ok(Self {
            frame_id: f.plan.frame_id,
            regime: f.regime,
            signal_indices: f.signal_indices.clone(),
            features: f.frame.token_features.clone(),
            scores: importance_scores(&f.stack, from_layer)?,
            mean_tau: frame_tau(&f.stack, from_layer, tau_k)?.mean_tau,
        })
    }
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub profile: CalibrationProfile,
    /// AUC of mean tau for Type 2 over all evaluation frames.
    pub auc: f64,
}

/// Frame `i` of the evaluation set: `n` of each regime, Type 1 first.
fn bench_frame(spec: &ScenarioSpec, n: usize, i: usize) -> Result<LabeledFrame, SynthError> {
    let regime = if i < n { Regime::Type1 } else { Regime::Type2 };
    spec.generate_frame(regime, (i % n) as u64)
}

/// Plans for the evaluation set, in the same order as [`bench_frames`].
pub fn bench_plans(spec: &ScenarioSpec, n: usize) -> Result<Vec<FramePlan>, SynthError> {
    (0..2 * n)
        .map(|i| {
            let regime = if i < n { Regime::Type1 } else { Regime::Type2 };
            spec.plan_frame(regime, (i % n) as u64)
        })
        .collect()
}

/// Evaluation frames: `n` of each regime, Type 1 first.
pub fn bench_frames(spec: &ScenarioSpec, n: usize, exec: Execution) -> Result<Vec<LabeledFrame>, SynthError> {
    spec.validate()?;
    exec.try_map(2 * n, |i| bench_frame(spec, n, i))
}

/// The evaluation set reduced to [`PreparedFrame`]s as it is generated, so
/// at most one stack per worker is alive at a time.
pub fn prepare_bench_frames(
    spec: &ScenarioSpec,
    n: usize,
    from_layer: usize,
    tau_k: usize,
    exec: Execution,
) -> Result<Vec<PreparedFrame>, SynthError> {
    spec.validate()?;
    exec.try_map(2 * n, |i| {
        PreparedFrame::from_frame(&bench_frame(spec, n, i)?, from_layer, tau_k)
    })
}

fn held_out_spec(spec: &ScenarioSpec) -> Result<ScenarioSpec, SynthError> {
    let held_out = ScenarioSpec {
        seed: derive_seed(spec.seed, STREAM_CALIBRATION, 0),
        ..spec.clone()
    };
    held_out.validate()?;
    Ok(held_out)
}

fn calibration_frame(held_out: &ScenarioSpec, i: usize) -> Result<LabeledFrame, SynthError> {
    let regime = if i.is_multiple_of(2) {
        Regime::Type1
    } else {
        Regime::Type2
    };
    held_out.generate_frame(regime, i as u64)
}

/// Held-out calibration frames, alternating regimes, from a seed derived
/// from the scenario's master seed.
pub fn calibration_frames(spec: &ScenarioSpec, m: usize, exec: Execution) -> Result<Vec<LabeledFrame>, SynthError> {
    let held_out = held_out_spec(spec)?;
    exec.try_map(m, |i| calibration_frame(&held_out, i))
}

/// Mean tau of each held-out calibration frame, without keeping the frames.
pub fn calibration_taus(
    spec: &ScenarioSpec,
    m: usize,
    from_layer: usize,
    tau_k: usize,
    exec: Execution,
) -> Result<Vec<f64>, SynthError> {
    let held_out = held_out_spec(spec)?;
    exec.try_map(m, |i| {
        Ok(frame_tau(&calibration_frame(&held_out, i)?.stack, from_layer, tau_k)?.mean_tau)
    })
}

/// Mean inter-layer tau for each frame.
pub fn frame_taus(
    frames: &[LabeledFrame],
    from_layer: usize,
    tau_k: usize,
    exec: Execution,
) -> Result<Vec<f64>, SynthError> {
    exec.try_map(frames.len(), |i| {
        Ok(frame_tau(&frames[i].stack, from_layer, tau_k)?.mean_tau)
    })
}

pub fn prepare(
    frames: &[LabeledFrame],
    from_layer: usize,
    tau_k: usize,
    exec: Execution,
) -> Result<Vec<PreparedFrame>, SynthError> {
    exec.try_map(frames.len(), |i| {
        PreparedFrame::from_frame(&frames[i], from_layer, tau_k)
    })
}

/// Signal recall of `strategy` at `budget` for one prepared frame.
pub fn frame_recall(
    p: &PreparedFrame,
    strategy: BenchStrategy,
    budget: usize,
    cfg: &BenchConfig,
    profile: &CalibrationProfile,
) -> Result<f64, BenchError> {
    let features = Some(&p.features);
    let selection = match strategy.pure() {
        Some(kind) => {
            let spec = StrategySpec {
                pool_k: if kind == StrategyKind::BottomK {
                    cfg.bottom_pool_k
                } else {
                    None
                },
                ..StrategySpec::new(kind, budget)
            };
            select(&spec, &p.scores, features).map_err(PolicyError::from)?
        }
        None => {
            let w = if strategy == BenchStrategy::SoftTies {
                trust_weight(p.mean_tau, profile).value
            } else if p.mean_tau > cfg.prune.threshold(Some(profile))? {
                0.0
            } else {
                1.0
            };
            blend_select(&p.scores, w, budget, &cfg.prune, features)?
        }
    };
    Ok(signal_recall(&selection, &p.signal_indices)?)
}

/// Runs the whole sweep. Rows come out in (strategy, regime, budget) order
/// following the config lists.
pub fn run_bench(cfg: &BenchConfig, exec: Execution) -> Result<BenchReport, BenchError> {
    cfg.validate()?;
    let spec = &cfg.scenario;
    let from = cfg.prune.prune_from_layer;
    let tau_k = cfg.prune.tau_k(spec.n_visual)?;

    let taus = calibration_taus(spec, cfg.calibration_frames, from, tau_k, exec)?;
    let profile = calibrate(&taus, &format!("synthetic:{}", spec.seed))?;

    let prepared = prepare_bench_frames(spec, cfg.frames_per_regime, from, tau_k, exec)?;
    let labeled: Vec<(Regime, f64)> = prepared.iter().map(|p| (p.regime, p.mean_tau)).collect();
    let auc = auc_tau(&labeled)?;

    let dims = ModelDims {
        layers: spec.layers,
        heads: spec.heads,
        d_model: cfg.d_model,
    };
    let layout = spec.layout();
    let flops_full = flops_estimate(spec.n_visual, layout, dims, from);

    let mut rows = Vec::new();
    for &strategy in &cfg.strategies {
        for &regime in &cfg.regimes {
            let subset: Vec<&PreparedFrame> = prepared.iter().filter(|p| regime.admits(p.regime)).collect();
            let mean_tau = subset.iter().map(|p| p.mean_tau).sum::<f64>() / subset.len() as f64;
            for &budget in &cfg.budgets {
                let recalls = exec
                    .try_map(subset.len(), |i| {
                        frame_recall(subset[i], strategy, budget, cfg, &profile)
                    })
                    .map_err(|e| BenchError::Cell {
                        strategy: strategy.name().into(),
                        regime: regime.name().into(),
                        budget,
                        message: e.to_string(),
                    })?;
                rows.push(BenchRow {
                    strategy: strategy.name().into(),
                    regime: regime.name().into(),
                    budget,
                    mean_recall: recalls.iter().sum::<f64>() / recalls.len() as f64,
                    mean_tau,
                    auc,
                    flops_ratio: flops_estimate(budget, layout, dims, from) / flops_full,
                    n_frames: subset.len(),
                    seed: spec.seed,
                    schema_version: BENCH_SCHEMA_VERSION,
                });
            }
        }
    }
    Ok(BenchReport { rows, profile, auc })
}

pub fn write_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
