//! Run configuration: one TOML file covering data, model, diffusion, training and sampling.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConfig;
use crate::diffusion::{Guidance, LossWeights};
use crate::error::{Error, Result};
use crate::optim::AdamConfig;
use crate::schedules::{cosine_schedule, BranchSchedules, DEFAULT_COSINE_OFFSET};
use crate::toydata::ToyDataConfig;
use crate::train::TrainConfig;

/// Environment variable naming the directory that relative data paths resolve against.
pub const DATA_ROOT_ENV: &str = "COSYNTH_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory; relative paths resolve against the data root.
    /// The generator's own seed is replaced by the run seed.
    pub root: PathBuf,
    pub count: usize,
    pub split: [f64; 2],
    pub generator: ToyDataConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("toy"),
            count: 512,
            split: [0.95, 0.05],
            generator: ToyDataConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    /// Number of diffusion steps T shared by all branches.
    pub steps: usize,
    /// Cosine offsets of the image, distance and label schedules.
    pub image_offset: f64,
    pub distance_offset: f64,
    pub label_offset: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            image_offset: DEFAULT_COSINE_OFFSET,
            distance_offset: DEFAULT_COSINE_OFFSET,
            label_offset: DEFAULT_COSINE_OFFSET,
        }
    }
}

impl DiffusionConfig {
    pub fn schedules(&self) -> Result<BranchSchedules> {
        BranchSchedules::new(
            cosine_schedule(self.steps, self.image_offset)?,
            cosine_schedule(self.steps, self.distance_offset)?,
            cosine_schedule(self.steps, self.label_offset)?,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub text_dropout: f64,
    /// Save a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            steps: 1000,
            text_dropout: 0.1,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    /// Guidance scale ω; 1 is plain conditional sampling.
    pub omega: f64,
    pub batch_size: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            omega: 3.0,
            batch_size: 8,
        }
    }
}

impl SamplingConfig {
    pub fn guidance(&self) -> Guidance {
        if self.omega == 1.0 {
            Guidance::Conditional
        } else {
            Guidance::Free { omega: self.omega }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextConfig {
    /// Dimension of the built-in hashing embedder.
    pub embed_dim: usize,
    /// Optional embedding table manifest replacing the hashing embedder.
    pub table: Option<PathBuf>,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            embed_dim: crate::conditioning::DEFAULT_EMBED_DIM,
            table: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: DenoiserConfig,
    pub diffusion: DiffusionConfig,
    pub loss: LossWeights,
    pub optimizer: AdamConfig,
    pub training: TrainingConfig,
    pub sampling: SamplingConfig,
    pub text: TextConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: DenoiserConfig::default(),
            diffusion: DiffusionConfig::default(),
            loss: LossWeights::default(),
            optimizer: AdamConfig::default(),
            training: TrainingConfig::default(),
            sampling: SamplingConfig::default(),
            text: TextConfig::default(),
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks every field against its documented range.
    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| match e {
            Error::Argument(m) => Error::Config(m),
            other => other,
        };
        self.data.generator.validate().map_err(wrap)?;
        crate::toydata::split_counts(self.data.count, self.data.split).map_err(wrap)?;
        self.model.validate().map_err(wrap)?;
        check(
            self.model.num_classes == self.data.generator.num_fg_classes() + 1,
            || {
                format!(
                    "model.num_classes = {} but the generator defines {} foreground classes",
                    self.model.num_classes,
                    self.data.generator.num_fg_classes()
                )
            },
        )?;
        let size = self.data.generator.patch_size;
        check(size % self.model.size_multiple() == 0, || {
            format!(
                "patch_size {size} must be a multiple of {}",
                self.model.size_multiple()
            )
        })?;
        check(self.model.text_dim == self.text.embed_dim || self.text.table.is_some(), || {
            format!(
                "model.text_dim {} differs from text.embed_dim {}",
                self.model.text_dim, self.text.embed_dim
            )
        })?;
        check(self.diffusion.steps >= 1, || "diffusion.steps must be at least 1".into())?;
        self.diffusion.schedules().map_err(wrap)?;
        self.train_config().validate().map_err(wrap)?;
        check(self.sampling.omega.is_finite(), || "sampling.omega must be finite".into())?;
        self.sampling.guidance().validate().map_err(wrap)?;
        check(self.sampling.batch_size >= 1, || "sampling.batch_size must be positive".into())?;
        check(self.text.embed_dim >= 1, || "text.embed_dim must be positive".into())?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.training.batch_size,
            steps: self.training.steps,
            text_dropout: self.training.text_dropout,
            weights: self.loss,
            adam: self.optimizer,
            seed: self.seed,
        }
    }

    /// Generator configuration with the run seed applied.
    pub fn generator(&self) -> ToyDataConfig {
        ToyDataConfig {
            seed: self.seed,
            ..self.data.generator.clone()
        }
    }

    /// Resolves the dataset directory against `data_root` (or the working directory).
    pub fn dataset_dir(&self, data_root: Option<&Path>) -> PathBuf {
        match data_root {
            Some(r) if self.data.root.is_relative() => r.join(&self.data.root),
            _ => self.data.root.clone(),
        }
    }

    /// Values that equal the published reference setting, keyed by config path.
    pub fn reference_settings(&self) -> BTreeMap<String, String> {
        let d = Self::default();
        let mut out = BTreeMap::new();
        let mut note = |key: &str, same: bool, value: String| {
            if same {
                out.insert(key.to_string(), format!("{value} (reference setting)"));
            }
        };
        note("loss.image", self.loss.image == d.loss.image, self.loss.image.to_string());
        note("loss.distance", self.loss.distance == d.loss.distance, self.loss.distance.to_string());
        note("loss.label", self.loss.label == d.loss.label, self.loss.label.to_string());
        note("optimizer.lr", self.optimizer.lr == d.optimizer.lr, self.optimizer.lr.to_string());
        note("optimizer.beta1", self.optimizer.beta1 == d.optimizer.beta1, self.optimizer.beta1.to_string());
        note("optimizer.beta2", self.optimizer.beta2 == d.optimizer.beta2, self.optimizer.beta2.to_string());
        note(
            "training.batch_size",
            self.training.batch_size == d.training.batch_size,
            self.training.batch_size.to_string(),
        );
        note("diffusion.steps", self.diffusion.steps == d.diffusion.steps, self.diffusion.steps.to_string());
        note(
            "sampling.omega",
            self.sampling.omega == d.sampling.omega,
            self.sampling.omega.to_string(),
        );
        out
    }
}
