//! Datasets as one directory per sample plus a JSON manifest at the root.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{digest_files, read_tensor, write_atomic, write_tensor, StoredTensor};
use crate::conditioning::PointMap;
use crate::diffusion::TripletSample;
use crate::error::{Error, Result};

pub const DATASET_MANIFEST: &str = "manifest.json";
pub const DATASET_FORMAT: &str = "cosynth-dataset";
pub const DATASET_VERSION: u32 = 1;

pub const IMAGE_FILE: &str = "image.ncsd";
pub const SEMANTIC_FILE: &str = "semantic.ncsd";
pub const INSTANCE_FILE: &str = "instance.ncsd";
pub const DISTANCE_FILE: &str = "distance.ncsd";
pub const POINTS_FILE: &str = "points.ncsd";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::arg(format!("unknown split {other:?}, expected train or test"))),
        }
    }
}

/// Paths are relative to the dataset root, with '/' separators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    pub split: Split,
    pub image: String,
    pub semantic: String,
    pub instance: Option<String>,
    pub distance: String,
    pub points: Option<String>,
    pub prompt: String,
    pub tissue: String,
    /// SHA-256 over the sample's tensor files in field order.
    pub digest: String,
}

impl SampleEntry {
    fn files(&self) -> Vec<&str> {
        let mut v = vec![self.image.as_str(), self.semantic.as_str()];
        v.extend(self.instance.as_deref());
        v.push(&self.distance);
        v.extend(self.points.as_deref());
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    /// Generator configuration that produced the data, if any.
    pub generator: Option<serde_json::Value>,
    pub config_digest: String,
    pub seed: Option<u64>,
    /// Class names, background first.
    pub class_names: Vec<String>,
    /// RGB color per class index used in PNG exports.
    pub label_legend: Vec<[u8; 3]>,
    pub samples: Vec<SampleEntry>,
}

/// One sample read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub id: String,
    pub split: Split,
    pub triplet: TripletSample,
    pub points: Option<PointMap>,
    pub prompt: String,
    pub tissue: String,
}

impl DatasetManifest {
    pub fn new(class_names: Vec<String>, label_legend: Vec<[u8; 3]>, config_digest: String) -> Self {
        Self {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            generator: None,
            config_digest,
            seed: None,
            class_names,
            label_legend,
            samples: Vec::new(),
        }
    }

    pub fn count(&self, split: Split) -> usize {
        self.samples.iter().filter(|s| s.split == split).count()
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &SampleEntry> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        write_atomic(&root.join(DATASET_MANIFEST), text.as_bytes())
    }

    /// Parses the manifest without touching sample files.
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(DATASET_MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if m.format != DATASET_FORMAT || m.version != DATASET_VERSION {
            return Err(Error::Data(format!(
                "{}: unsupported dataset format {} v{}",
                path.display(),
                m.format,
                m.version
            )));
        }
        Ok(m)
    }

    /// Checks that every referenced file exists, parses, and matches its digest.
    pub fn validate(&self, root: &Path) -> Result<()> {
        for s in &self.samples {
            load_entry(root, s, self.class_names.len())?;
        }
        Ok(())
    }

    pub fn load_split(&self, root: &Path, split: Split) -> Result<Vec<LoadedSample>> {
        self.entries(split)
            .map(|e| load_entry(root, e, self.class_names.len()))
            .collect()
    }
}

fn resolve(root: &Path, rel: &str) -> Result<PathBuf> {
    let p = Path::new(rel);
    if p.is_absolute() || p.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
        return Err(Error::Data(format!("manifest path {rel:?} escapes the dataset root")));
    }
    Ok(root.join(p))
}

/// Writes one sample's tensors under `root/rel_dir` and returns its entry.
#[allow(clippy::too_many_arguments)]
pub fn write_sample(
    root: &Path,
    rel_dir: &str,
    id: &str,
    split: Split,
    triplet: &TripletSample,
    points: Option<&PointMap>,
    prompt: &str,
    tissue: &str,
) -> Result<SampleEntry> {
    let rel = |f: &str| format!("{rel_dir}/{f}");
    let mut entry = SampleEntry {
        id: id.into(),
        split,
        image: rel(IMAGE_FILE),
        semantic: rel(SEMANTIC_FILE),
        instance: triplet.instance.as_ref().map(|_| rel(INSTANCE_FILE)),
        distance: rel(DISTANCE_FILE),
        points: points.map(|_| rel(POINTS_FILE)),
        prompt: prompt.into(),
        tissue: tissue.into(),
        digest: String::new(),
    };
    write_tensor(&resolve(root, &entry.image)?, &StoredTensor::from_array3_f32(&triplet.image))?;
    write_tensor(&resolve(root, &entry.semantic)?, &StoredTensor::from_array2_u8(&triplet.semantic))?;
    if let (Some(f), Some(inst)) = (&entry.instance, &triplet.instance) {
        write_tensor(&resolve(root, f)?, &StoredTensor::from_array2_ids(inst)?)?;
    }
    write_tensor(&resolve(root, &entry.distance)?, &StoredTensor::from_array2_f32(&triplet.distance))?;
    if let (Some(f), Some(p)) = (&entry.points, points) {
        write_tensor(&resolve(root, f)?, &StoredTensor::from_array2_u8(p.grid()))?;
    }
    entry.digest = entry_digest(root, &entry)?;
    Ok(entry)
}

fn entry_digest(root: &Path, e: &SampleEntry) -> Result<String> {
    let paths = e.files().into_iter().map(|f| resolve(root, f)).collect::<Result<Vec<_>>>()?;
    digest_files(&paths.iter().map(PathBuf::as_path).collect::<Vec<_>>())
}

/// Reads and checks one entry; `num_classes` includes background.
pub fn load_entry(root: &Path, e: &SampleEntry, num_classes: usize) -> Result<LoadedSample> {
    let digest = entry_digest(root, e)?;
    if digest != e.digest {
        return Err(Error::Data(format!(
            "sample {}: digest mismatch (manifest {}, files {digest})",
            e.id, e.digest
        )));
    }
    let read = |rel: &str| resolve(root, rel).and_then(|p| read_tensor(&p));
    let triplet = TripletSample {
        image: read(&e.image)?.to_array3_f32()?,
        distance: read(&e.distance)?.to_array2_f32()?,
        semantic: read(&e.semantic)?.to_array2_u8()?,
        instance: e.instance.as_deref().map(|f| read(f)?.to_array2_ids()).transpose()?,
    };
    triplet
        .validate(num_classes)
        .map_err(|err| Error::Data(format!("sample {}: {err}", e.id)))?;
    let points = e
        .points
        .as_deref()
        .map(|f| -> Result<PointMap> {
            let p = PointMap::new(read(f)?.to_array2_u8()?);
            p.validate(num_classes.saturating_sub(1))
                .map_err(|err| Error::Data(format!("sample {}: {err}", e.id)))?;
            if p.shape() != triplet.shape() {
                return Err(Error::Data(format!("sample {}: point map shape differs from labels", e.id)));
            }
            Ok(p)
        })
        .transpose()?;
    Ok(LoadedSample {
        id: e.id.clone(),
        split: e.split,
        triplet,
        points,
        prompt: e.prompt.clone(),
        tissue: e.tissue.clone(),
    })
}
