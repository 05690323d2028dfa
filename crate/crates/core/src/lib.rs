//! Training-free visual token pruning guided by inter-layer rank consistency.
//!
//! Visual tokens are scored by the attention mass they receive. How stable
//! the ranking of the best-scored tokens stays from one layer to the next
//! (Kendall's tau-b, averaged over layer pairs) decides how far attention
//! magnitude is trusted: consistent rankings shift the token budget towards
//! a rank-uniform or diversity-based sample.

pub mod attention;
pub mod bench;
pub mod cli;
pub mod exec;
pub mod policy;
pub mod rankmetrics;
pub mod runtime;
pub mod strategies;
pub mod synth;

pub use attention::{importance_scores, score_series, AttentionStack, TokenLayout};
pub use exec::Execution;
pub use policy::{calibrate, trust_weight, CalibrationProfile, PolicyMode, PruneConfig};
pub use rankmetrics::{kendall_tau_b, layerwise_tau, rank_scores, Ranking, ScoreVector, TauProfile};
pub use runtime::{Frame, Runtime, RuntimeState, StepReport};
pub use strategies::{SelectionResult, StrategyKind, StrategySpec};
