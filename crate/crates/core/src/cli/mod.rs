//! The `ties` command line.
//!
//! Each subcommand takes one JSON config path plus `--set key=value`
//! overrides. Output files are written to a temporary file next to the target
//! and renamed into place, so a failed command never leaves a partial file.
//!
//! Exit codes: 0 success, 2 input error, 3 consistency error, 4 internal error.

mod config;

pub use config::{
    apply_override, load_config, parse_override, DatasetKind, GenerateSpec, RunConfig, SweepSpec, SEED_ENV,
};

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crate::attention::{importance_scores, read_atns_file, AttentionStack};
use crate::bench::{bench_plans, calibration_taus, run_bench, write_csv, BenchError};
use crate::policy::{calibrate, CalibrationProfile, PolicyError, PolicyMode};
use crate::runtime::{
    episode_ndjson, frame_tau, Episode, EpisodeSummary, Runtime, RuntimeError, REPORT_SCHEMA_VERSION,
};
use crate::synth::{
    derive_seed, plan_episode, read_dataset, read_entry, read_manifest, write_dataset, FramePlan, LabeledFrame,
    Manifest, ScenarioSpec, SynthError, ToyModel, ToyModelSpec,
};

/// Stream tag for the dual-execution toy model weights.
const STREAM_TOY_MODEL: u64 = 0x70E;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Consistency(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Consistency(_) => 3,
            CliError::Internal(_) => 4,
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Atns { .. } | SynthError::Manifest(_) | SynthError::Json(_) | SynthError::Io(_) => {
                CliError::Input(e.to_string())
            }
            SynthError::Infeasible(_) | SynthError::EmptySignal | SynthError::SingleClass { .. } => {
                CliError::Input(e.to_string())
            }
            SynthError::DimMismatch(_) => CliError::Consistency(e.to_string()),
            SynthError::Runtime(ref r) if r.is_consistency() => CliError::Consistency(e.to_string()),
            SynthError::Runtime(ref r) if r.is_input() => CliError::Input(e.to_string()),
            SynthError::Runtime(ref r) => match r.as_ref() {
                RuntimeError::Policy(p) => classify_policy(p, e.to_string()),
                _ => CliError::Internal(e.to_string()),
            },
            _ => CliError::Internal(e.to_string()),
        }
    }
}

fn classify_policy(e: &PolicyError, message: String) -> CliError {
    match e {
        PolicyError::InconsistentProfile(_) | PolicyError::Version(_) => CliError::Consistency(message),
        PolicyError::Strategy(_) => CliError::Internal(message),
        _ => CliError::Input(message),
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> Self {
        classify_policy(&e, e.to_string())
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Config(_) => CliError::Input(e.to_string()),
            BenchError::Synth(s) => s.into(),
            BenchError::Policy(p) => p.into(),
            BenchError::Cell { .. } | BenchError::Csv(_) => CliError::Internal(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "ties",
    version,
    about = "Rank-consistency guided visual token pruning on synthetic attention"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a calibration profile from the mean tau of sampled frames.
    Calibrate(CommonArgs),
    /// Run the online pruning loop over an episode and write NDJSON reports.
    Run(CommonArgs),
    /// Sweep strategies x regimes x budgets and write a CSV matrix.
    Bench(CommonArgs),
    /// Print the tau profile and per-layer top-k trace of one ATNS file.
    Inspect(CommonArgs),
    /// Write a synthetic scenario dataset (ATNS files plus manifest).
    Generate(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON config file.
    pub config: std::path::PathBuf,
    /// Override a config field by dotted path, e.g. `--set scenario.seed=7`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl Command {
    fn args(&self) -> &CommonArgs {
        match self {
            Command::Calibrate(a)
            | Command::Run(a)
            | Command::Bench(a)
            | Command::Inspect(a)
            | Command::Generate(a) => a,
        }
    }
}

/// Writes `bytes` to `path` through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let fail = |e: &dyn std::fmt::Display| CliError::Input(format!("cannot write {}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| fail(&e))?;
    tmp.write_all(bytes).map_err(|e| fail(&e))?;
    tmp.as_file().sync_all().map_err(|e| fail(&e))?;
    tmp.persist(path).map_err(|e| fail(&e.error))?;
    Ok(())
}

/// Mean tau per calibration frame: from the input dataset when one is
/// given, else from freshly generated held-out frames.
fn calibration_input(cfg: &RunConfig) -> Result<(String, Vec<f64>), CliError> {
    let from = cfg.prune.prune_from_layer;
    match RunConfig::existing(&cfg.input, "input dataset")? {
        Some(dir) => {
            let (manifest, frames) = read_dataset(&dir)?;
            let tau_k = cfg.prune.tau_k(manifest.spec.n_visual)?;
            let taus = cfg.execution.try_map(frames.len(), |i| {
                frame_tau(&frames[i].stack, from, tau_k)
                    .map(|p| p.mean_tau)
                    .map_err(SynthError::from)
            })?;
            Ok((format!("dataset:{}", dir.display()), taus))
        }
        None => {
            let tau_k = cfg.prune.tau_k(cfg.scenario.n_visual)?;
            let taus = calibration_taus(&cfg.scenario, cfg.calibration_frames, from, tau_k, cfg.execution)?;
            Ok((format!("synthetic:{}", cfg.scenario.seed), taus))
        }
    }
}

pub fn cmd_calibrate(cfg: &RunConfig) -> Result<String, CliError> {
    let out = cfg.output()?;
    let (source, taus) = calibration_input(cfg)?;
    if taus.len() < 2 {
        return Err(CliError::Input(format!(
            "calibration needs at least 2 frames, got {}",
            taus.len()
        )));
    }
    let profile = calibrate(&taus, cfg.source_id.as_deref().unwrap_or(&source))?;
    write_atomic(out, profile.to_json()?.as_bytes())?;
    Ok(format!(
        "M={} tau_med={:.6} q10={:.6} q25={:.6} q75={:.6} q90={:.6} -> {}",
        profile.sample_count,
        profile.tau_med,
        profile.q10,
        profile.q25,
        profile.q75,
        profile.q90,
        out.display()
    ))
}

/// Where an episode's frames come from. Frames are realized one at a time
/// while the episode runs.
enum FrameSource {
    Generated { spec: ScenarioSpec, plans: Vec<FramePlan> },
    Dataset { dir: PathBuf, manifest: Manifest },
}

impl FrameSource {
    fn open(cfg: &RunConfig) -> Result<Self, CliError> {
        Ok(match RunConfig::existing(&cfg.input, "input dataset")? {
            Some(dir) => {
                let manifest = read_manifest(&dir)?;
                FrameSource::Dataset { dir, manifest }
            }
            None => FrameSource::Generated {
                spec: cfg.scenario.clone(),
                plans: plan_episode(&cfg.scenario, &cfg.episode)?,
            },
        })
    }

    fn spec(&self) -> &ScenarioSpec {
        match self {
            FrameSource::Generated { spec, .. } => spec,
            FrameSource::Dataset { manifest, .. } => &manifest.spec,
        }
    }

    fn len(&self) -> usize {
        match self {
            FrameSource::Generated { plans, .. } => plans.len(),
            FrameSource::Dataset { manifest, .. } => manifest.frames.len(),
        }
    }

    fn load(&self, i: usize) -> Result<LabeledFrame, SynthError> {
        match self {
            FrameSource::Generated { spec, plans } => spec.realize(&plans[i]),
            FrameSource::Dataset { dir, manifest } => read_entry(dir, &manifest.spec, &manifest.frames[i]),
        }
    }
}

fn toy_model_for(cfg: &RunConfig, spec: &ScenarioSpec) -> Result<ToyModel, CliError> {
    let model = ToyModelSpec {
        layers: spec.layers,
        heads: spec.heads,
        d_model: spec.feature_dim,
        n_language: spec.n_language,
        n_visual: spec.n_visual,
        seed: derive_seed(cfg.scenario.seed, STREAM_TOY_MODEL, 0),
    };
    ToyModel::new(model).map_err(|e| CliError::Consistency(format!("dual execution model: {e}")))
}

pub fn cmd_run(cfg: &RunConfig) -> Result<String, CliError> {
    let out = cfg.output()?;
    let needs_profile = cfg.prune.mode == PolicyMode::Soft || cfg.prune.tau_threshold.is_none();
    let profile = match RunConfig::existing(&cfg.profile, "profile")? {
        Some(p) => Some(CalibrationProfile::load(&p).map_err(|e| match CliError::from(e) {
            CliError::Consistency(m) => CliError::Consistency(format!("{}: {m}", p.display())),
            other => CliError::Input(format!("{}: {other}", p.display())),
        })?),
        None if needs_profile => {
            let mode = if cfg.prune.mode == PolicyMode::Soft {
                "soft"
            } else {
                "hard"
            };
            return Err(CliError::Input(format!(
                "{mode} mode needs a calibration profile (set `profile`)"
            )));
        }
        None => None,
    };
    let source = FrameSource::open(cfg)?;
    if source.len() == 0 {
        return Err(CliError::Input("episode has no frames".into()));
    }
    let model = if cfg.dual_execution {
        Some(toy_model_for(cfg, source.spec())?)
    } else {
        None
    };

    let mut runtime = Runtime::new(cfg.prune.clone(), profile.as_ref(), cfg.gamma, cfg.d_model);
    runtime.reuse_indices = cfg.reuse_indices;
    runtime.dual_execution = model.as_ref();

    let mut load_error: Option<SynthError> = None;
    let stream = (0..source.len()).map_while(|i| match source.load(i) {
        Ok(f) => Some((f.frame, f.stack)),
        Err(e) => {
            load_error = Some(e);
            None
        }
    });
    let result = runtime.run_episode(stream);
    // On failure the steps that did complete are still written, under a
    // summary with complete=false.
    let write_episode = |ep: &Episode| -> Result<(), CliError> {
        let text = episode_ndjson(ep).map_err(|e| CliError::Internal(e.to_string()))?;
        write_atomic(out, text.as_bytes())
    };
    match (result, load_error) {
        (Ok(ep), None) => {
            write_episode(&ep)?;
            let s = &ep.summary;
            Ok(format!(
                "frames={} recomputes={} mean_reduction={:.6} flops_saved={:.3e} -> {}",
                s.n_frames,
                s.recompute_count,
                s.mean_reduction,
                s.flops_saved,
                out.display()
            ))
        }
        (Ok(ep), Some(e)) => {
            write_episode(&Episode {
                summary: EpisodeSummary::from_reports(&ep.reports, false),
                reports: ep.reports,
            })?;
            Err(e.into())
        }
        (Err(err), load_error) => {
            write_episode(&err.partial)?;
            if let Some(e) = load_error {
                return Err(e.into());
            }
            let msg = err.to_string();
            Err(if err.source.is_consistency() {
                CliError::Consistency(msg)
            } else {
                CliError::Internal(msg)
            })
        }
    }
}

pub fn cmd_bench(cfg: &RunConfig) -> Result<String, CliError> {
    let out = cfg.output()?;
    let report = run_bench(&cfg.bench_config(), cfg.execution)?;
    let mut buf = Vec::new();
    write_csv(&report.rows, &mut buf)?;
    write_atomic(out, &buf)?;
    Ok(format!(
        "rows={} auc={:.6} tau_med={:.6} -> {}",
        report.rows.len(),
        report.auc,
        report.profile.tau_med,
        out.display()
    ))
}

#[derive(Debug, Serialize)]
struct LayerTrace {
    layer: usize,
    top_k: Vec<usize>,
    top_scores: Vec<f64>,
    mass_defect: f64,
}

#[derive(Debug, Serialize)]
struct InspectReport {
    #[serde(rename = "type")]
    kind: &'static str,
    schema_version: u32,
    file: String,
    layers: usize,
    heads: usize,
    seq_len: usize,
    n_language: usize,
    n_visual: usize,
    from_layer: usize,
    tau_k: usize,
    per_pair: Vec<f64>,
    mean_tau: f64,
    degenerate_pairs: usize,
    trace: Vec<LayerTrace>,
}

fn inspect_stack(path: &Path, stack: &AttentionStack, cfg: &RunConfig) -> Result<InspectReport, CliError> {
    let layout = stack.layout();
    let from = cfg.prune.prune_from_layer;
    if from + 2 > stack.layers() {
        return Err(CliError::Consistency(format!(
            "{}: prune_from_layer {from} needs at least {} layers, file has {}",
            path.display(),
            from + 2,
            stack.layers()
        )));
    }
    let tau_k = cfg.prune.tau_k(layout.n_visual)?;
    let internal = |e: &dyn std::fmt::Display| CliError::Internal(e.to_string());
    let tau = frame_tau(stack, from, tau_k).map_err(|e| internal(&e))?;
    let trace = (from..stack.layers())
        .map(|l| {
            let s = importance_scores(stack, l).map_err(|e| internal(&e))?;
            let top_k: Vec<usize> = s.order_desc().into_iter().take(tau_k).collect();
            Ok(LayerTrace {
                layer: l,
                top_scores: top_k.iter().map(|&i| s.values()[i]).collect(),
                top_k,
                mass_defect: stack.mass_defect(l).map_err(|e| internal(&e))?,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(InspectReport {
        kind: "inspect",
        schema_version: REPORT_SCHEMA_VERSION,
        file: path.display().to_string(),
        layers: stack.layers(),
        heads: stack.heads(),
        seq_len: stack.seq_len(),
        n_language: layout.n_language,
        n_visual: layout.n_visual,
        from_layer: from,
        tau_k,
        per_pair: tau.per_pair,
        mean_tau: tau.mean_tau,
        degenerate_pairs: tau.degenerate_pairs,
        trace,
    })
}

pub fn cmd_inspect(cfg: &RunConfig) -> Result<String, CliError> {
    let path = RunConfig::existing(&cfg.input, "input file")?
        .ok_or_else(|| CliError::Input("inspect needs `input` (an ATNS file)".into()))?;
    let stack =
        read_atns_file(&path).map_err(|e| CliError::Input(format!("{}: {e} (code {})", path.display(), e.code())))?;
    let report = inspect_stack(&path, &stack, cfg)?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Internal(e.to_string()))? + "\n";
    match &cfg.output {
        Some(_) => {
            let out = cfg.output()?;
            write_atomic(out, text.as_bytes())?;
            Ok(format!("mean_tau={:.6} -> {}", report.mean_tau, out.display()))
        }
        None => Ok(text.trim_end().to_string()),
    }
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<String, CliError> {
    let out = cfg.output()?;
    cfg.scenario.validate()?;
    let plans = match cfg.generate.kind {
        DatasetKind::Frames => bench_plans(&cfg.scenario, cfg.generate.frames_per_regime)?,
        DatasetKind::Episode => plan_episode(&cfg.scenario, &cfg.episode)?,
    };
    let frames = plans.iter().map(|p| cfg.scenario.realize(p));
    let manifest = write_dataset(out, &cfg.scenario, frames)?;
    Ok(format!("frames={} -> {}", manifest.frames.len(), out.display()))
}

/// Runs a parsed command line. `env_seed` is the raw `TIES_SEED` value.
pub fn dispatch(cli: &Cli, env_seed: Option<&str>) -> Result<String, CliError> {
    let args = cli.command.args();
    let cfg = load_config(&args.config, &args.set, env_seed)?;
    match &cli.command {
        Command::Calibrate(_) => cmd_calibrate(&cfg),
        Command::Run(_) => cmd_run(&cfg),
        Command::Bench(_) => cmd_bench(&cfg),
        Command::Inspect(_) => cmd_inspect(&cfg),
        Command::Generate(_) => cmd_generate(&cfg),
    }
}

/// Process entry point used by the `ties` binary.
pub fn main_entry() -> ExitCode {
    let cli = Cli::parse();
    let env_seed = std::env::var(SEED_ENV).ok();
    let result = std::panic::catch_unwind(|| dispatch(&cli, env_seed.as_deref()));
    match result {
        Ok(Ok(msg)) => {
            // A closed stdout (e.g. piped into `head`) is not a failure.
            let _ = writeln!(std::io::stdout(), "{msg}");
            ExitCode::SUCCESS
        }
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
        Err(_) => {
            eprintln!("error: internal invariant violated");
            ExitCode::from(4)
        }
    }
}
