//! Scenario datasets on disk: one ATNS file per frame plus `manifest.json`.
//!
//! The manifest holds the generator spec and every frame's plan (regime,
//! informative tokens, seeds). Labels are read from the manifest only; token
//! features are rebuilt from the recorded seeds.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::scenario::{FramePlan, LabeledFrame, ScenarioSpec};
use super::SynthError;
use crate::attention::{read_atns_file, write_atns_file};
use crate::runtime::Frame;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    #[serde(flatten)]
    pub plan: FramePlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub spec: ScenarioSpec,
    pub frames: Vec<ManifestEntry>,
}

/// Writes frames as they arrive, so callers can stream a large dataset
/// without materializing every stack at once.
pub fn write_dataset<I>(dir: &Path, spec: &ScenarioSpec, frames: I) -> Result<Manifest, SynthError>
where
    I: IntoIterator<Item = Result<LabeledFrame, SynthError>>,
{
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (i, f) in frames.into_iter().enumerate() {
        let f = f?;
        let file = format!("frame_{i:05}.atns");
        write_atns_file(&f.stack, &dir.join(&file))?;
        entries.push(ManifestEntry {
            file,
            plan: f.plan.clone(),
        });
    }
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        spec: spec.clone(),
        frames: entries,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, SynthError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| SynthError::Manifest(format!("{}: {e}", path.display())))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(SynthError::Manifest(format!(
            "unsupported schema_version {}",
            m.schema_version
        )));
    }
    m.spec.validate()?;
    Ok(m)
}

/// Loads one manifest entry. The stack must match the manifest's spec.
pub fn read_entry(dir: &Path, spec: &ScenarioSpec, entry: &ManifestEntry) -> Result<LabeledFrame, SynthError> {
    let path: PathBuf = dir.join(&entry.file);
    let stack = read_atns_file(&path).map_err(|source| SynthError::Atns {
        path: path.display().to_string(),
        source,
    })?;
    if stack.layout() != spec.layout() || stack.layers() != spec.layers || stack.heads() != spec.heads {
        return Err(SynthError::DimMismatch(format!(
            "{} does not match the manifest spec dimensions",
            path.display()
        )));
    }
    let features = spec.build_features(&entry.plan)?;
    Ok(LabeledFrame {
        frame: Frame::from_features(entry.plan.frame_id, features)?,
        stack,
        regime: entry.plan.regime,
        signal_indices: entry.plan.signal_indices.clone(),
        plan: entry.plan.clone(),
    })
}

/// Loads every frame listed in the manifest, in manifest order.
pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<LabeledFrame>), SynthError> {
    let manifest = read_manifest(dir)?;
    let frames = manifest
        .frames
        .iter()
        .map(|e| read_entry(dir, &manifest.spec, e))
        .collect::<Result<Vec<_>, SynthError>>()?;
    Ok((manifest, frames))
}
