//! Checkpoints: a JSON manifest plus one tensor file per parameter and moment.
//!
//! ```text
//! checkpoint.json
//! params/<name>.ncsd
//! adam_m/<name>.ncsd
//! adam_v/<name>.ncsd
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{digest_files, read_tensor, write_atomic, write_tensor, StoredTensor};
use crate::denoiser::{DenoiserConfig, JointDenoiser};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::schedules::BranchSchedules;
use crate::train::{TrainConfig, Trainer};

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";
pub const CHECKPOINT_FORMAT: &str = "cosynth-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub model: DenoiserConfig,
    /// Completed optimizer steps.
    pub step: u64,
    pub adam: AdamConfig,
    pub train: Option<TrainConfig>,
    /// Free-form run metadata (e.g. the full run configuration).
    pub run: Option<serde_json::Value>,
    /// Parameter names with their shapes, sorted by name.
    pub params: Vec<(String, Vec<usize>)>,
    /// SHA-256 over all tensor files in manifest order.
    pub digest: String,
}

fn file_name(name: &str) -> String {
    format!("{name}.ncsd")
}

fn to_stored(t: &Tensor) -> Result<StoredTensor> {
    if t.dtype() != DType::F32 {
        return Err(Error::Config(format!(
            "checkpoints store f32 tensors, model uses {:?}",
            t.dtype()
        )));
    }
    StoredTensor::f32(t.dims().to_vec(), t.flatten_all()?.to_vec1::<f32>()?)
}

fn to_tensor(s: &StoredTensor, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(s.to_f32()?, s.dims(), device)?)
}

fn tensor_paths(dir: &Path, names: &[(String, Vec<usize>)]) -> Vec<std::path::PathBuf> {
    ["params", "adam_m", "adam_v"]
        .iter()
        .flat_map(|sub| names.iter().map(move |(n, _)| dir.join(sub).join(file_name(n))))
        .collect()
}

/// Writes model parameters, Adam moments and the manifest (last, atomically).
pub fn save_checkpoint(
    dir: &Path,
    model: &JointDenoiser,
    opt: &Adam,
    train: Option<&TrainConfig>,
    run: Option<serde_json::Value>,
) -> Result<()> {
    let vars = model.params().vars();
    let mut names = Vec::with_capacity(vars.len());
    for (name, var) in &vars {
        let m = opt
            .first_moments()
            .get(name)
            .ok_or_else(|| Error::Data(format!("optimizer has no moment for {name}")))?;
        let v = &opt.second_moments()[name];
        write_tensor(&dir.join("params").join(file_name(name)), &to_stored(var.as_tensor())?)?;
        write_tensor(&dir.join("adam_m").join(file_name(name)), &to_stored(m)?)?;
        write_tensor(&dir.join("adam_v").join(file_name(name)), &to_stored(v)?)?;
        names.push((name.clone(), var.dims().to_vec()));
    }
    let paths = tensor_paths(dir, &names);
    let digest = digest_files(&paths.iter().map(|p| p.as_path()).collect::<Vec<_>>())?;
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        model: model.config().clone(),
        step: opt.step_count(),
        adam: *opt.config(),
        train: train.cloned(),
        run,
        params: names,
        digest,
    };
    write_atomic(
        &dir.join(CHECKPOINT_MANIFEST),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )
}

pub fn save_trainer(dir: &Path, trainer: &Trainer, run: Option<serde_json::Value>) -> Result<()> {
    save_checkpoint(dir, trainer.model(), trainer.optimizer(), Some(trainer.config()), run)
}

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub manifest: CheckpointManifest,
    pub model: JointDenoiser,
    pub first_moments: BTreeMap<String, Tensor>,
    pub second_moments: BTreeMap<String, Tensor>,
}

impl LoadedCheckpoint {
    pub fn step(&self) -> u64 {
        self.manifest.step
    }

    /// Trainer positioned right after the saved step.
    ///
    /// `config` defaults to the stored training configuration.
    pub fn into_trainer(self, schedules: BranchSchedules, config: Option<TrainConfig>) -> Result<Trainer> {
        let config = match (config, self.manifest.train) {
            (Some(c), _) | (None, Some(c)) => c,
            (None, None) => {
                return Err(Error::Config("checkpoint stores no training configuration".into()))
            }
        };
        let mut t = Trainer::new(self.model, schedules, config)?;
        t.optimizer_mut()
            .restore(self.manifest.step, self.first_moments, self.second_moments)?;
        Ok(t)
    }
}

pub fn read_checkpoint_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if m.format != CHECKPOINT_FORMAT || m.version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported checkpoint format {} v{}",
            path.display(),
            m.format,
            m.version
        )));
    }
    Ok(m)
}

/// Loads a checkpoint; with `expected`, any architecture difference is a
/// configuration error listing the differing fields.
pub fn load_checkpoint(dir: &Path, expected: Option<&DenoiserConfig>) -> Result<LoadedCheckpoint> {
    let manifest = read_checkpoint_manifest(dir)?;
    if let Some(exp) = expected {
        let diff = exp.diff(&manifest.model);
        if !diff.is_empty() {
            return Err(Error::Config(format!(
                "checkpoint architecture differs (expected != stored): {}",
                diff.join("; ")
            )));
        }
    }
    let paths = tensor_paths(dir, &manifest.params);
    let digest = digest_files(&paths.iter().map(|p| p.as_path()).collect::<Vec<_>>())?;
    if digest != manifest.digest {
        return Err(Error::Data(format!(
            "{}: tensor digest mismatch (manifest {}, files {digest})",
            dir.display(),
            manifest.digest
        )));
    }

    let device = Device::Cpu;
    let model = JointDenoiser::new(manifest.model.clone(), 0, DType::F32, &device)?;
    let vars = model.params().vars();
    let listed: Vec<&str> = manifest.params.iter().map(|(n, _)| n.as_str()).collect();
    let built: Vec<&str> = vars.iter().map(|(n, _)| n.as_str()).collect();
    if listed != built {
        return Err(Error::Config(format!(
            "checkpoint lists {} parameters, architecture builds {}",
            listed.len(),
            built.len()
        )));
    }
    let mut first = BTreeMap::new();
    let mut second = BTreeMap::new();
    for ((name, dims), (_, var)) in manifest.params.iter().zip(&vars) {
        if dims.as_slice() != var.dims() {
            return Err(Error::Config(format!(
                "parameter {name}: stored shape {dims:?}, architecture {:?}",
                var.dims()
            )));
        }
        let load = |sub: &str| -> Result<Tensor> {
            let s = read_tensor(&dir.join(sub).join(file_name(name)))?;
            if s.dims() != dims.as_slice() {
                return Err(Error::Data(format!("{sub}/{name}: shape {:?}, manifest {dims:?}", s.dims())));
            }
            to_tensor(&s, &device)
        };
        var.set(&load("params")?)?;
        first.insert(name.clone(), load("adam_m")?);
        second.insert(name.clone(), load("adam_v")?);
    }
    Ok(LoadedCheckpoint {
        manifest,
        model,
        first_moments: first,
        second_moments: second,
    })
}
