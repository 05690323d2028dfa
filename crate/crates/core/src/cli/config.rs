//! Command configuration: one JSON document, dotted `--set` overrides on top,
//! then `TIES_SEED`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::CliError;
use crate::bench::{BenchConfig, BenchStrategy, RegimeFilter};
use crate::exec::Execution;
use crate::policy::PruneConfig;
use crate::synth::{EpisodeSpec, ScenarioSpec};

pub const SEED_ENV: &str = "TIES_SEED";

/// Settings of the benchmark sweep that are not shared with other commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub frames_per_regime: usize,
    pub budgets: Vec<usize>,
    pub strategies: Vec<BenchStrategy>,
    pub regimes: Vec<RegimeFilter>,
    pub bottom_pool_k: Option<usize>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        let b = BenchConfig::default();
        Self {
            frames_per_regime: b.frames_per_regime,
            budgets: b.budgets,
            strategies: b.strategies,
            regimes: b.regimes,
            bottom_pool_k: b.bottom_pool_k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Independent frames, `frames_per_regime` of each regime.
    Frames,
    /// One temporally coherent stream from `episode`.
    Episode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSpec {
    pub kind: DatasetKind,
    pub frames_per_regime: usize,
}

impl Default for GenerateSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Frames,
            frames_per_regime: 50,
        }
    }
}

/// Every command reads the fields it needs and ignores the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioSpec,
    pub prune: PruneConfig,
    pub episode: EpisodeSpec,
    pub sweep: SweepSpec,
    pub generate: GenerateSpec,
    /// Frames sampled for `calibrate` when no input dataset is given.
    pub calibration_frames: usize,
    /// Free-form profile label. Defaults to a description of the input.
    pub source_id: Option<String>,
    pub gamma: f64,
    pub reuse_indices: bool,
    pub dual_execution: bool,
    /// Width used by the FLOPs estimate.
    pub d_model: usize,
    pub execution: Execution,
    /// Dataset directory (`calibrate`, `run`) or ATNS file (`inspect`).
    pub input: Option<PathBuf>,
    pub profile: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioSpec::default(),
            prune: PruneConfig::default(),
            episode: EpisodeSpec::default(),
            sweep: SweepSpec::default(),
            generate: GenerateSpec::default(),
            calibration_frames: 100,
            source_id: None,
            gamma: 0.95,
            reuse_indices: false,
            dual_execution: false,
            d_model: 64,
            execution: Execution::default(),
            input: None,
            profile: None,
            output: None,
        }
    }
}

impl RunConfig {
    pub fn bench_config(&self) -> BenchConfig {
        BenchConfig {
            scenario: self.scenario.clone(),
            frames_per_regime: self.sweep.frames_per_regime,
            calibration_frames: self.calibration_frames,
            budgets: self.sweep.budgets.clone(),
            strategies: self.sweep.strategies.clone(),
            regimes: self.sweep.regimes.clone(),
            prune: self.prune.clone(),
            bottom_pool_k: self.sweep.bottom_pool_k,
            d_model: self.d_model,
        }
    }

    pub fn output(&self) -> Result<&Path, CliError> {
        let out = self
            .output
            .as_deref()
            .ok_or_else(|| CliError::Input("config has no output path".into()))?;
        let parent = match out.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        if !parent.is_dir() {
            return Err(CliError::Input(format!(
                "output directory {} does not exist",
                parent.display()
            )));
        }
        Ok(out)
    }

    pub fn existing(path: &Option<PathBuf>, what: &str) -> Result<Option<PathBuf>, CliError> {
        match path {
            Some(p) if !p.exists() => Err(CliError::Input(format!("{what} {} does not exist", p.display()))),
            other => Ok(other.clone()),
        }
    }
}

/// Splits `key=value`; the value is JSON when it parses, a string otherwise.
pub fn parse_override(s: &str) -> Result<(Vec<String>, Value), CliError> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| CliError::Input(format!("override {s:?} is not key=value")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Input(format!("override key {key:?} is malformed")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.split('.').map(String::from).collect(), value))
}

/// Sets `path` inside `doc`, creating intermediate objects.
pub fn apply_override(doc: &mut Value, path: &[String], value: Value) -> Result<(), CliError> {
    let mut cur = doc;
    for (i, part) in path.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| {
            CliError::Input(format!(
                "override {}: {} is not an object",
                path.join("."),
                path[..i].join(".")
            ))
        })?;
        if i + 1 == path.len() {
            obj.insert(part.clone(), value);
            return Ok(());
        }
        cur = obj
            .entry(part.clone())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Reads the config file, applies overrides in order, then the seed from
/// the environment when `env_seed` is given.
pub fn load_config(path: &Path, overrides: &[String], env_seed: Option<&str>) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
    let mut doc: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Input(format!("config {} is not valid JSON: {e}", path.display())))?;
    if !doc.is_object() {
        return Err(CliError::Input(format!(
            "config {} must be a JSON object",
            path.display()
        )));
    }
    for o in overrides {
        let (key, value) = parse_override(o)?;
        apply_override(&mut doc, &key, value)?;
    }
    if let Some(raw) = env_seed {
        let seed: u64 = raw
            .trim()
            .parse()
            .map_err(|_| CliError::Input(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
        apply_override(&mut doc, &["scenario".into(), "seed".into()], Value::from(seed))?;
    }
    serde_json::from_value(doc).map_err(|e| CliError::Input(format!("config {}: {e}", path.display())))
}
