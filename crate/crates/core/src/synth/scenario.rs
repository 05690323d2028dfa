//! Synthetic frames with planted informative tokens and known attention
//! regimes.
//!
//! Attention stacks are built directly rather than produced by a trained
//! model. Each layer's rows are a softmax over per-column logits plus a fixed
//! per-head row noise. Between consecutive layers every visual token's logit
//! is redrawn with the regime's churn probability, which is what moves the
//! top of the ranking around.
//!
//! * Type 1 (healthy): informative tokens carry a large logit boost, so they
//!   sit near the top, and the ranking churns at `drift_rate` per layer.
//! * Type 2 (locked): a handful of sink tokens absorb `lock_strength` of every
//!   row's mass in every layer with a fixed order, informative tokens sit in
//!   the middle of the ranking, and churn drops to
//!   `drift_rate * (1 - lock_strength)`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::SynthError;
use crate::attention::{AttentionStack, TokenLayout};
use crate::exec::Execution;
use crate::runtime::Frame;
use crate::strategies::FeatureMatrix;

/// Spread of language-token column logits.
const LANGUAGE_SPREAD: f64 = 0.5;
/// Per-head row noise added to the column logits.
const ROW_NOISE: f64 = 0.5;
/// Spread of Type 2 informative-token logits around `signal_level`.
const TYPE2_SIGNAL_SPREAD: f64 = 0.3;
/// Scale of the per-scene offset shared by all token features.
const SCENE_SCALE: f64 = 2.0;
/// Length of the planted feature direction on informative tokens.
const SIGNAL_FEATURE_GAIN: f64 = 3.0;

const STREAM_FRAME: u64 = 1;
const STREAM_STACK: u64 = 2;
const STREAM_SCENE: u64 = 3;
const STREAM_JITTER: u64 = 4;
const STREAM_DIRECTION: u64 = 5;
const STREAM_EPISODE: u64 = 6;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent per-item seed from a master seed, a stream tag and an index.
pub fn derive_seed(master: u64, stream: u64, id: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ stream) ^ id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    Type1,
    Type2,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Type1 => "type1",
            Regime::Type2 => "type2",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Regime::Type1 => 1,
            Regime::Type2 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub regime: Regime,
    pub n_visual: usize,
    pub n_language: usize,
    pub layers: usize,
    pub heads: usize,
    pub feature_dim: usize,
    pub n_signal: usize,
    /// Fixed informative tokens; drawn per frame when absent.
    pub signal_indices: Option<Vec<usize>>,
    pub n_sinks: usize,
    /// Fixed Type 2 sinks; drawn per frame when absent.
    pub sink_indices: Option<Vec<usize>>,
    pub drift_rate: f64,
    pub lock_strength: f64,
    /// Type 1 logit boost of informative tokens.
    pub signal_boost: f64,
    /// Type 2 logit level of informative tokens.
    pub signal_level: f64,
    /// Per-frame feature jitter inside a scene.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            regime: Regime::Type1,
            n_visual: 256,
            n_language: 16,
            layers: 6,
            heads: 2,
            feature_dim: 16,
            n_signal: 8,
            signal_indices: None,
            n_sinks: 5,
            sink_indices: None,
            drift_rate: 0.5,
            lock_strength: 0.6,
            signal_boost: 2.0,
            signal_level: 0.4,
            jitter: 0.05,
            seed: 20_240_601,
        }
    }
}

/// Everything needed to rebuild one frame bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePlan {
    pub frame_id: u64,
    pub regime: Regime,
    pub stack_seed: u64,
    pub scene_seed: u64,
    pub jitter_seed: u64,
    pub signal_indices: Vec<usize>,
    pub sink_indices: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct LabeledFrame {
    pub frame: Frame,
    pub stack: AttentionStack,
    pub regime: Regime,
    pub signal_indices: Vec<usize>,
    pub plan: FramePlan,
}

fn check_indices(name: &'static str, idx: &[usize], expected: usize, n: usize) -> Result<(), SynthError> {
    if idx.len() != expected {
        return Err(SynthError::Infeasible(format!(
            "{name} has {} entries, expected {expected}",
            idx.len()
        )));
    }
    if let Some(&i) = idx.iter().find(|&&i| i >= n) {
        return Err(SynthError::Infeasible(format!("{name} index {i} >= {n}")));
    }
    let mut s = idx.to_vec();
    s.sort_unstable();
    s.dedup();
    if s.len() != idx.len() {
        return Err(SynthError::Infeasible(format!("{name} has duplicates")));
    }
    Ok(())
}

impl ScenarioSpec {
    pub fn with_regime(&self, regime: Regime) -> Self {
        Self { regime, ..self.clone() }
    }

    pub fn layout(&self) -> TokenLayout {
        TokenLayout::language_first(self.n_language, self.n_visual)
    }

    fn sinks_for(&self, regime: Regime) -> usize {
        match regime {
            Regime::Type1 => 0,
            Regime::Type2 => self.n_sinks,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Infeasible(m));
        if self.layers < 3 {
            return bad(format!("need at least 3 layers, got {}", self.layers));
        }
        if self.heads == 0 || self.feature_dim == 0 {
            return bad("heads and feature_dim must be positive".into());
        }
        if self.n_visual < 2 {
            return bad(format!("need at least 2 visual tokens, got {}", self.n_visual));
        }
        if self.n_signal == 0 {
            return bad("n_signal must be at least 1".into());
        }
        if self.n_signal + self.n_sinks > self.n_visual {
            return bad(format!(
                "{} signal + {} sink tokens exceed {} visual tokens",
                self.n_signal, self.n_sinks, self.n_visual
            ));
        }
        for (name, v) in [("drift_rate", self.drift_rate), ("lock_strength", self.lock_strength)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} is outside [0, 1]"));
            }
        }
        for (name, v) in [
            ("signal_boost", self.signal_boost),
            ("signal_level", self.signal_level),
            ("jitter", self.jitter),
        ] {
            if !v.is_finite() {
                return bad(format!("{name} is not finite"));
            }
        }
        if let Some(sig) = &self.signal_indices {
            check_indices("signal_indices", sig, self.n_signal, self.n_visual)?;
        }
        if let Some(sinks) = &self.sink_indices {
            check_indices("sink_indices", sinks, self.n_sinks, self.n_visual)?;
            if let Some(sig) = &self.signal_indices {
                if sig.iter().any(|i| sinks.contains(i)) {
                    return bad("signal_indices and sink_indices overlap".into());
                }
            }
        }
        Ok(())
    }

    fn churn(&self, regime: Regime) -> f64 {
        match regime {
            Regime::Type1 => self.drift_rate,
            Regime::Type2 => self.drift_rate * (1.0 - self.lock_strength),
        }
    }

    /// Seeds and token roles for frame `frame_id` under `regime`.
    pub fn plan_frame(&self, regime: Regime, frame_id: u64) -> Result<FramePlan, SynthError> {
        self.validate()?;
        let seed = derive_seed(self.seed, STREAM_FRAME ^ (regime.tag() << 32), frame_id);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_sinks = self.sinks_for(regime);

        let (signal_indices, sink_indices) = match (&self.signal_indices, &self.sink_indices) {
            (Some(sig), Some(sinks)) => (sig.clone(), if n_sinks > 0 { sinks.clone() } else { vec![] }),
            (Some(sig), None) => {
                let free: Vec<usize> = (0..self.n_visual).filter(|i| !sig.contains(i)).collect();
                let sinks = sample(&mut rng, free.len(), n_sinks)
                    .into_iter()
                    .map(|p| free[p])
                    .collect();
                (sig.clone(), sinks)
            }
            (None, fixed_sinks) => {
                let sinks: Vec<usize> = match fixed_sinks {
                    Some(s) if n_sinks > 0 => s.clone(),
                    _ => Vec::new(),
                };
                let free: Vec<usize> = (0..self.n_visual).filter(|i| !sinks.contains(i)).collect();
                let drawn: Vec<usize> = sample(&mut rng, free.len(), self.n_signal + n_sinks - sinks.len())
                    .into_iter()
                    .map(|p| free[p])
                    .collect();
                let (sig, extra) = drawn.split_at(self.n_signal);
                let sinks = if sinks.is_empty() { extra.to_vec() } else { sinks };
                (sig.to_vec(), sinks)
            }
        };
        let mut signal_indices = signal_indices;
        signal_indices.sort_unstable();

        Ok(FramePlan {
            frame_id,
            regime,
            stack_seed: derive_seed(seed, STREAM_STACK, 0),
            scene_seed: derive_seed(seed, STREAM_SCENE, 0),
            jitter_seed: derive_seed(seed, STREAM_JITTER, 0),
            signal_indices,
            sink_indices,
        })
    }

    pub fn build_stack(&self, plan: &FramePlan) -> Result<AttentionStack, SynthError> {
        let (n_l, n_v) = (self.n_language, self.n_visual);
        let n = n_l + n_v;
        let heads = self.heads;
        let mut rng = ChaCha8Rng::seed_from_u64(plan.stack_seed);
        let mut normal = || -> f64 { rng.sample(StandardNormal) };

        let lang: Vec<f64> = (0..n_l).map(|_| LANGUAGE_SPREAD * normal()).collect();
        let mut g: Vec<f64> = (0..n_v).map(|_| normal()).collect();
        let row_noise: Vec<f64> = (0..heads * n * n).map(|_| ROW_NOISE * normal()).collect();

        let mut is_signal = vec![false; n_v];
        plan.signal_indices.iter().for_each(|&i| is_signal[i] = true);

        // Sinks get fixed, strictly decreasing shares of the injected mass.
        let sinks = &plan.sink_indices;
        let lock = if sinks.is_empty() { 0.0 } else { self.lock_strength };
        let weight_total: f64 = (1..=sinks.len()).map(|w| w as f64).sum();
        let sink_share: Vec<(usize, f64)> = sinks
            .iter()
            .enumerate()
            .map(|(p, &j)| (n_l + j, lock * (sinks.len() - p) as f64 / weight_total))
            .collect();

        let churn = self.churn(plan.regime);
        let mut data = Vec::with_capacity(self.layers * heads * n * n);
        let mut logits = vec![0.0; n];
        let mut row = vec![0.0; n];
        for layer in 0..self.layers {
            if layer > 0 {
                for gj in g.iter_mut() {
                    let u: f64 = rng.random();
                    let fresh: f64 = rng.sample(StandardNormal);
                    if u < churn {
                        *gj = fresh;
                    }
                }
            }
            logits[..n_l].copy_from_slice(&lang);
            for j in 0..n_v {
                logits[n_l + j] = match (plan.regime, is_signal[j]) {
                    (Regime::Type1, true) => g[j] + self.signal_boost,
                    (Regime::Type2, true) => self.signal_level + TYPE2_SIGNAL_SPREAD * g[j],
                    _ => g[j],
                };
            }
            for head in 0..heads {
                for i in 0..n {
                    let noise = &row_noise[(head * n + i) * n..(head * n + i + 1) * n];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..n {
                        row[j] = logits[j] + noise[j];
                        max = max.max(row[j]);
                    }
                    let mut sum = 0.0;
                    for r in row.iter_mut() {
                        *r = (*r - max).exp();
                        sum += *r;
                    }
                    let scale = (1.0 - lock) / sum;
                    row.iter_mut().for_each(|r| *r *= scale);
                    for &(j, share) in &sink_share {
                        row[j] += share;
                    }
                    // Renormalize so each row is stochastic to rounding.
                    let total: f64 = row.iter().sum();
                    data.extend(row.iter().map(|r| r / total));
                }
            }
        }
        Ok(AttentionStack::new(self.layers, heads, n, self.layout(), data)?)
    }

    /// Unit direction planted on informative tokens, shared by all frames of
    /// a spec.
    pub fn signal_direction(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, STREAM_DIRECTION, 0));
        let v: Vec<f64> = (0..self.feature_dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect()
    }

    pub fn build_features(&self, plan: &FramePlan) -> Result<FeatureMatrix, SynthError> {
        let d = self.feature_dim;
        let mut scene = ChaCha8Rng::seed_from_u64(plan.scene_seed);
        let offset: Vec<f64> = (0..d)
            .map(|_| SCENE_SCALE * scene.sample::<f64, _>(StandardNormal))
            .collect();
        let mut jitter = ChaCha8Rng::seed_from_u64(plan.jitter_seed);
        let dir = self.signal_direction();
        let mut data = Vec::with_capacity(self.n_visual * d);
        for j in 0..self.n_visual {
            let gain = if plan.signal_indices.contains(&j) {
                SIGNAL_FEATURE_GAIN
            } else {
                0.0
            };
            for c in 0..d {
                let base: f64 = scene.sample(StandardNormal);
                let jit: f64 = jitter.sample(StandardNormal);
                data.push(offset[c] + base + self.jitter * jit + gain * dir[c]);
            }
        }
        Ok(FeatureMatrix::new(self.n_visual, d, data)?)
    }

    pub fn realize(&self, plan: &FramePlan) -> Result<LabeledFrame, SynthError> {
        let stack = self.build_stack(plan)?;
        let features = self.build_features(plan)?;
        let frame = Frame::from_features(plan.frame_id, features)?;
        Ok(LabeledFrame {
            frame,
            stack,
            regime: plan.regime,
            signal_indices: plan.signal_indices.clone(),
            plan: plan.clone(),
        })
    }

    pub fn generate_frame(&self, regime: Regime, frame_id: u64) -> Result<LabeledFrame, SynthError> {
        self.realize(&self.plan_frame(regime, frame_id)?)
    }
}

/// `n_frames` independent frames of `spec.regime`.
pub fn generate_scenario(spec: &ScenarioSpec, n_frames: usize) -> Result<Vec<LabeledFrame>, SynthError> {
    generate_scenario_with(spec, n_frames, Execution::default())
}

pub fn generate_scenario_with(
    spec: &ScenarioSpec,
    n_frames: usize,
    exec: Execution,
) -> Result<Vec<LabeledFrame>, SynthError> {
    spec.validate()?;
    exec.try_map(n_frames, |i| spec.generate_frame(spec.regime, i as u64))
}

/// A temporally coherent stream: frames are grouped into scenes that share
/// attention and token features up to a small per-frame jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeSpec {
    pub n_frames: usize,
    /// Probability that a frame starts a new scene.
    pub scene_change_prob: f64,
    /// Draw each scene's regime 50/50 instead of using the spec's regime.
    pub mix_regimes: bool,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            n_frames: 50,
            scene_change_prob: 0.1,
            mix_regimes: true,
        }
    }
}

pub fn plan_episode(spec: &ScenarioSpec, episode: &EpisodeSpec) -> Result<Vec<FramePlan>, SynthError> {
    spec.validate()?;
    if episode.n_frames == 0 {
        return Err(SynthError::Infeasible("episode has no frames".into()));
    }
    if !(0.0..=1.0).contains(&episode.scene_change_prob) {
        return Err(SynthError::Infeasible("scene_change_prob outside [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, STREAM_EPISODE, 0));
    let mut plans = Vec::with_capacity(episode.n_frames);
    let mut scene: Option<FramePlan> = None;
    let mut scene_id = 0u64;
    for t in 0..episode.n_frames as u64 {
        let change: f64 = rng.random();
        let coin: bool = rng.random();
        if scene.is_none() || change < episode.scene_change_prob {
            let regime = match (episode.mix_regimes, coin) {
                (false, _) => spec.regime,
                (true, false) => Regime::Type1,
                (true, true) => Regime::Type2,
            };
            scene = Some(spec.plan_frame(regime, 1_000_000 + scene_id)?);
            scene_id += 1;
        }
        let base = scene.as_ref().expect("scene set above");
        plans.push(FramePlan {
            frame_id: t,
            jitter_seed: derive_seed(spec.seed, STREAM_JITTER, t),
            ..base.clone()
        });
    }
    Ok(plans)
}
