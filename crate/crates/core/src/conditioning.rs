//! Point-map and text conditions.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::persistence;

/// Nucleus-centroid markers: 0 = no marker, k = centroid of a class-k nucleus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PointMap {
    grid: Array2<u8>,
    marker_count: usize,
}

impl PointMap {
    pub fn new(grid: Array2<u8>) -> Self {
        let marker_count = grid.iter().filter(|&&v| v != 0).count();
        Self { grid, marker_count }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self::new(Array2::zeros((height, width)))
    }

    pub fn grid(&self) -> &Array2<u8> {
        &self.grid
    }

    pub fn into_grid(self) -> Array2<u8> {
        self.grid
    }

    pub fn marker_count(&self) -> usize {
        self.marker_count
    }

    pub fn shape(&self) -> (usize, usize) {
        self.grid.dim()
    }

    /// Markers as ((row, col), class), in row-major order.
    pub fn markers(&self) -> Vec<((usize, usize), u8)> {
        self.grid
            .indexed_iter()
            .filter(|(_, &v)| v != 0)
            .map(|(p, &v)| (p, v))
            .collect()
    }

    /// Fails if any marker class exceeds `num_fg_classes`.
    pub fn validate(&self, num_fg_classes: usize) -> Result<()> {
        match self.grid.iter().find(|&&v| v as usize > num_fg_classes) {
            Some(v) => Err(Error::arg(format!(
                "point-map class {v} outside 0..={num_fg_classes}"
            ))),
            None => Ok(()),
        }
    }
}

/// The pixel an instance is represented by: its rounded centroid when that
/// falls inside the instance, otherwise the instance pixel nearest to the
/// exact centroid (first in row-major order on ties).
pub fn instance_center(pixels: &[(usize, usize)]) -> Option<(usize, usize)> {
    if pixels.is_empty() {
        return None;
    }
    let n = pixels.len() as f64;
    let cy = pixels.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let cx = pixels.iter().map(|p| p.1 as f64).sum::<f64>() / n;
    let rounded = (cy.round() as usize, cx.round() as usize);
    if pixels.contains(&rounded) {
        return Some(rounded);
    }
    let mut best = pixels[0];
    let mut best_d = f64::INFINITY;
    for &(y, x) in pixels {
        let d = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
        if d < best_d || (d == best_d && (y, x) < best) {
            best = (y, x);
            best_d = d;
        }
    }
    Some(best)
}

/// Pixel lists per nonzero instance id, in ascending id order; pixels row-major.
pub fn instance_pixels(instance: &Array2<u32>) -> BTreeMap<u32, Vec<(usize, usize)>> {
    let mut map: BTreeMap<u32, Vec<(usize, usize)>> = BTreeMap::new();
    for (p, &id) in instance.indexed_iter() {
        if id != 0 {
            map.entry(id).or_default().push(p);
        }
    }
    map
}

/// Majority foreground class over an instance's pixels; ties break toward the lower class.
pub fn majority_class(semantic: &Array2<u8>, pixels: &[(usize, usize)]) -> Option<u8> {
    let mut counts = [0usize; 256];
    for &p in pixels {
        counts[semantic[p] as usize] += 1;
    }
    let (class, &count) = counts
        .iter()
        .enumerate()
        .skip(1)
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?;
    (count > 0).then_some(class as u8)
}

/// One marker per instance, at its center pixel, carrying its majority class.
pub fn build_point_map(instance: &Array2<u32>, semantic: &Array2<u8>) -> Result<PointMap> {
    let ids: Vec<u32> = instance_pixels(instance).into_keys().collect();
    build_point_map_for_ids(instance, semantic, &ids)
}

/// As [`build_point_map`], restricted to an explicit id set. Every id must label
/// at least one pixel.
pub fn build_point_map_for_ids(
    instance: &Array2<u32>,
    semantic: &Array2<u8>,
    ids: &[u32],
) -> Result<PointMap> {
    if instance.dim() != semantic.dim() {
        return Err(Error::arg(format!(
            "instance {:?} and semantic {:?} shapes differ",
            instance.dim(),
            semantic.dim()
        )));
    }
    let pixels = instance_pixels(instance);
    let mut grid = Array2::<u8>::zeros(instance.dim());
    for &id in ids {
        let px = pixels
            .get(&id)
            .filter(|p| !p.is_empty())
            .ok_or_else(|| Error::Data(format!("instance id {id} labels no pixels")))?;
        let class = majority_class(semantic, px)
            .ok_or_else(|| Error::Data(format!("instance {id} has no foreground class")))?;
        let center = instance_center(px).expect("nonempty instance");
        grid[center] = class;
    }
    Ok(PointMap::new(grid))
}

const PROMPT_HEAD: &str = "high-quality histopathology";
const PROMPT_MIDDLE: &str = "tissue image including nuclei types of";

/// Fills the structure-related prompt template.
///
/// Cell types are joined by ", " in the order given. Names that would make
/// the fill ambiguous (commas in cell types, template words in the tissue or
/// stain) are rejected.
pub fn make_prompt(tissue: &str, cell_types: &[&str], stain: Option<&str>) -> Result<String> {
    let tissue = tissue.trim();
    if tissue.is_empty() {
        return Err(Error::arg("tissue type is empty"));
    }
    if tissue.contains("-stained") || tissue.contains("tissue image") {
        return Err(Error::arg(format!("tissue type {tissue:?} collides with the template")));
    }
    if cell_types.is_empty() {
        return Err(Error::arg("cell-type list is empty"));
    }
    for c in cell_types {
        if c.trim().is_empty() || c.trim() != *c {
            return Err(Error::arg(format!("invalid cell type {c:?}")));
        }
        if c.contains(',') {
            return Err(Error::arg(format!("cell type {c:?} contains a comma")));
        }
    }
    let cells = cell_types.join(", ");
    match stain {
        None => Ok(format!("{PROMPT_HEAD} {tissue} {PROMPT_MIDDLE} {cells}.")),
        Some(s) => {
            let s = s.trim();
            if s.is_empty() || s.contains(char::is_whitespace) || s.contains("-stained") {
                return Err(Error::arg(format!("invalid stain {s:?}")));
            }
            Ok(format!("{PROMPT_HEAD} {s}-stained {tissue} {PROMPT_MIDDLE} {cells}."))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    Template,
    External,
}

/// A prompt and its fixed-length embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TextCondition {
    pub prompt: String,
    pub embedding: Vec<f32>,
    pub source: EmbeddingSource,
}

impl TextCondition {
    pub fn new(embedder: &dyn TextEmbedder, prompt: &str) -> Result<Self> {
        Ok(Self {
            prompt: prompt.to_string(),
            embedding: embed_text(embedder, prompt)?,
            source: embedder.source(),
        })
    }
}

/// Maps prompts to fixed-dimension vectors.
pub trait TextEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn source(&self) -> EmbeddingSource;
    fn embed(&self, prompt: &str) -> Result<Vec<f32>>;
}

/// Checks the embedder contract on top of [`TextEmbedder::embed`].
pub fn embed_text(embedder: &dyn TextEmbedder, prompt: &str) -> Result<Vec<f32>> {
    if prompt.trim().is_empty() {
        return Err(Error::arg("prompt is empty"));
    }
    let v = embedder.embed(prompt)?;
    if v.len() != embedder.dim() {
        return Err(Error::Numeric(format!(
            "embedder returned {} values, expected {}",
            v.len(),
            embedder.dim()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("non-finite embedding for {prompt:?}")));
    }
    Ok(v)
}

pub const DEFAULT_EMBED_DIM: usize = 512;

/// Bag of hashed lowercase word tokens, L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self {
            dim: DEFAULT_EMBED_DIM,
        }
    }
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::arg("embedding dimension must be positive"));
        }
        Ok(Self { dim })
    }

    /// Bucket a token hashes to.
    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a(token.as_bytes()) % self.dim as u64) as usize
    }
}

pub fn tokenize(prompt: &str) -> impl Iterator<Item = String> + '_ {
    prompt
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

impl TextEmbedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn source(&self) -> EmbeddingSource {
        EmbeddingSource::Template
    }

    fn embed(&self, prompt: &str) -> Result<Vec<f32>> {
        let mut v = vec![0f64; self.dim];
        for tok in tokenize(prompt) {
            v[self.bucket(&tok)] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::arg(format!("prompt {prompt:?} has no word tokens")));
        }
        Ok(v.into_iter().map(|x| (x / norm) as f32).collect())
    }
}

/// Precomputed prompt vectors loaded from a manifest.
///
/// The manifest is UTF-8 text, one entry per line: a vector file path
/// (relative to the manifest), a tab, then the prompt. Blank lines and lines
/// starting with `#` are skipped. Each vector file is a rank-1 float32
/// tensor container.
#[derive(Debug, Clone)]
pub struct TableEmbedder {
    dim: usize,
    table: HashMap<String, Vec<f32>>,
}

impl TableEmbedder {
    pub fn from_entries(entries: impl IntoIterator<Item = (String, Vec<f32>)>) -> Result<Self> {
        let mut table = HashMap::new();
        let mut dim = None;
        for (prompt, v) in entries {
            match dim {
                None => dim = Some(v.len()),
                Some(d) if d != v.len() => {
                    return Err(Error::Data(format!(
                        "vector for {prompt:?} has dimension {}, expected {d}",
                        v.len()
                    )))
                }
                _ => {}
            }
            if table.insert(prompt.clone(), v).is_some() {
                return Err(Error::Data(format!("duplicate prompt {prompt:?}")));
            }
        }
        let dim = dim.ok_or_else(|| Error::Data("embedding table is empty".into()))?;
        if dim == 0 {
            return Err(Error::Data("embedding vectors are empty".into()));
        }
        Ok(Self { dim, table })
    }

    pub fn load(manifest: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let base = manifest.parent().unwrap_or(Path::new("."));
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (file, prompt) = line.split_once('\t').ok_or_else(|| {
                Error::Data(format!("{}:{}: expected `path<TAB>prompt`", manifest.display(), lineno + 1))
            })?;
            let tensor = persistence::read_tensor(&base.join(file))?;
            if tensor.dims().len() != 1 {
                return Err(Error::Data(format!("{file}: embedding must be rank 1")));
            }
            entries.push((prompt.to_string(), tensor.to_f32()?));
        }
        Self::from_entries(entries)
    }

    /// Writes a manifest plus one vector file per prompt into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut prompts: Vec<&String> = self.table.keys().collect();
        prompts.sort();
        let mut manifest = String::new();
        for (i, p) in prompts.iter().enumerate() {
            if p.contains('\t') || p.contains('\n') {
                return Err(Error::Data(format!("prompt {p:?} cannot be stored in a manifest")));
            }
            let file = format!("vec_{i:05}.ncsd");
            persistence::write_tensor(
                &dir.join(&file),
                &persistence::StoredTensor::f32(vec![self.dim], self.table[*p].clone())?,
            )?;
            manifest.push_str(&format!("{file}\t{p}\n"));
        }
        persistence::write_atomic(&dir.join("embeddings.tsv"), manifest.as_bytes())
    }
}

impl TextEmbedder for TableEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn source(&self) -> EmbeddingSource {
        EmbeddingSource::External
    }

    fn embed(&self, prompt: &str) -> Result<Vec<f32>> {
        self.table
            .get(prompt)
            .cloned()
            .ok_or_else(|| Error::Lookup(format!("no embedding for prompt {prompt:?}")))
    }
}
