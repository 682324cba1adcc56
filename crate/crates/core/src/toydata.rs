//! Procedural nuclei patches with exact ground truth.

use std::collections::{BTreeSet, VecDeque};
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{build_point_map, make_prompt, PointMap};
use crate::diffusion::TripletSample;
use crate::error::{Error, Result};
use crate::instancing::distance_map;
use crate::persistence::dataset::{write_sample, DatasetManifest, Split};

/// Prompt cell list for a patch without nuclei.
pub const NO_NUCLEI: &str = "none";

const PLACEMENT_ATTEMPTS: usize = 60;
const MIN_NUCLEUS_PIXELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassStyle {
    pub name: String,
    /// Base RGB color.
    pub color: [u8; 3],
    /// Multiplier on the drawn radius.
    pub size_bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyDataConfig {
    pub patch_size: usize,
    /// Inclusive range of nuclei attempted per patch.
    pub nuclei_per_patch: [usize; 2],
    /// Semi-major axis range in pixels, before the class size bias.
    pub radius_range: [f64; 2],
    pub class_palette: Vec<ClassStyle>,
    pub tissue_names: Vec<String>,
    /// Optional stain for the prompt (e.g. "IHC").
    pub stain: Option<String>,
    /// Chance that a nucleus is placed abutting an earlier one.
    pub touching_probability: f64,
    /// Peak amplitude of the smooth background texture, in [−1, 1] units.
    pub texture_amplitude: f64,
    pub seed: u64,
}

impl Default for ToyDataConfig {
    fn default() -> Self {
        let class = |name: &str, color, size_bias| ClassStyle {
            name: name.into(),
            color,
            size_bias,
        };
        Self {
            patch_size: 32,
            nuclei_per_patch: [3, 8],
            radius_range: [2.5, 4.0],
            class_palette: vec![
                class("epithelial", [150, 60, 170], 1.15),
                class("lymphocyte", [45, 35, 120], 0.8),
                class("connective", [215, 120, 70], 1.0),
            ],
            tissue_names: vec!["colon".into(), "breast".into(), "kidney".into()],
            stain: None,
            touching_probability: 0.2,
            texture_amplitude: 0.08,
            seed: 0,
        }
    }
}

/// Background colors cycled over tissue indices.
const TISSUE_BACKGROUNDS: [[u8; 3]; 6] = [
    [235, 200, 215],
    [230, 215, 185],
    [205, 215, 235],
    [220, 230, 200],
    [240, 225, 230],
    [210, 200, 225],
];

/// Colors used for label maps in PNG exports; index 0 is background.
pub const LABEL_LEGEND: [[u8; 3]; 8] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [145, 30, 180],
    [70, 240, 240],
    [245, 130, 48],
];

impl ToyDataConfig {
    pub fn num_fg_classes(&self) -> usize {
        self.class_palette.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.class_palette.iter().map(|c| c.name.clone()).collect()
    }

    pub fn tissue_background(&self, tissue_index: usize) -> [u8; 3] {
        TISSUE_BACKGROUNDS[tissue_index % TISSUE_BACKGROUNDS.len()]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::arg(m));
        if self.patch_size < 4 {
            return bad(format!("patch_size must be at least 4, got {}", self.patch_size));
        }
        if self.class_palette.is_empty() || self.class_palette.len() > 255 {
            return bad("class_palette needs 1..=255 classes".into());
        }
        let [lo, hi] = self.nuclei_per_patch;
        if lo > hi {
            return bad(format!("nuclei_per_patch range [{lo}, {hi}] is empty"));
        }
        let [rlo, rhi] = self.radius_range;
        let max_bias = self.class_palette.iter().map(|c| c.size_bias).fold(0.0, f64::max);
        if !(rlo > 0.0 && rlo <= rhi) {
            return bad(format!("radius_range [{rlo}, {rhi}] is invalid"));
        }
        if 2.0 * (rhi * max_bias) + 3.0 > self.patch_size as f64 {
            return bad(format!(
                "largest nucleus (radius {}) does not fit a {} patch",
                rhi * max_bias,
                self.patch_size
            ));
        }
        for c in &self.class_palette {
            if !(c.size_bias > 0.0 && c.size_bias.is_finite()) {
                return bad(format!("class {} has invalid size_bias {}", c.name, c.size_bias));
            }
            if c.name.trim().is_empty() || c.name.contains(',') {
                return bad(format!("invalid class name {:?}", c.name));
            }
        }
        let names: BTreeSet<_> = self.class_palette.iter().map(|c| &c.name).collect();
        if names.len() != self.class_palette.len() {
            return bad("class names must be distinct".into());
        }
        if self.tissue_names.is_empty() {
            return bad("tissue_names is empty".into());
        }
        if !(0.0..=1.0).contains(&self.touching_probability) {
            return bad("touching_probability must lie in [0, 1]".into());
        }
        if !(0.0..=0.5).contains(&self.texture_amplitude) {
            return bad("texture_amplitude must lie in [0, 0.5]".into());
        }
        // Exercise the template once so bad tissue names fail early.
        let first = self.class_palette[0].name.as_str();
        for t in &self.tissue_names {
            make_prompt(t, &[first], self.stain.as_deref())?;
        }
        Ok(())
    }

    /// sha256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        crate::persistence::sha256_hex(serde_json::to_string(self).unwrap_or_default().as_bytes())
    }
}

/// One generated patch with its conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub triplet: TripletSample,
    pub points: PointMap,
    pub prompt: String,
    pub tissue: String,
}

/// Smooth field: bilinear interpolation of a coarse random grid, values in [−1, 1].
fn smooth_field(size: usize, cells: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let g = cells + 1;
    let coarse: Vec<f64> = (0..g * g).map(|_| rng.random_range(-1.0..1.0)).collect();
    Array2::from_shape_fn((size, size), |(y, x)| {
        let fy = y as f64 / (size - 1) as f64 * cells as f64;
        let fx = x as f64 / (size - 1) as f64 * cells as f64;
        let (y0, x0) = ((fy.floor() as usize).min(cells - 1), (fx.floor() as usize).min(cells - 1));
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let at = |yy: usize, xx: usize| coarse[yy * g + xx];
        at(y0, x0) * (1.0 - ty) * (1.0 - tx)
            + at(y0, x0 + 1) * (1.0 - ty) * tx
            + at(y0 + 1, x0) * ty * (1.0 - tx)
            + at(y0 + 1, x0 + 1) * ty * tx
    })
}

/// Pixels of a rotated ellipse, reduced to its largest 4-connected component.
fn ellipse(size: usize, cy: f64, cx: f64, ry: f64, rx: f64, angle: f64) -> Vec<(usize, usize)> {
    let (s, c) = angle.sin_cos();
    let r = ry.max(rx).ceil() as isize + 1;
    let mut px = BTreeSet::new();
    for y in (cy.round() as isize - r)..=(cy.round() as isize + r) {
        for x in (cx.round() as isize - r)..=(cx.round() as isize + r) {
            if y < 0 || x < 0 || y >= size as isize || x >= size as isize {
                continue;
            }
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let u = dx * c + dy * s;
            let v = -dx * s + dy * c;
            if (u / rx).powi(2) + (v / ry).powi(2) <= 1.0 {
                px.insert((y as usize, x as usize));
            }
        }
    }
    largest_component(&px)
}

fn largest_component(px: &BTreeSet<(usize, usize)>) -> Vec<(usize, usize)> {
    let mut seen = BTreeSet::new();
    let mut best = Vec::new();
    for &start in px {
        if seen.contains(&start) {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen.insert(start);
        while let Some((y, x)) = queue.pop_front() {
            comp.push((y, x));
            let nbrs = [
                (y.wrapping_sub(1), x),
                (y + 1, x),
                (y, x.wrapping_sub(1)),
                (y, x + 1),
            ];
            for q in nbrs {
                if px.contains(&q) && seen.insert(q) {
                    queue.push_back(q);
                }
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    best.sort();
    best
}

fn touches(instance: &Array2<u32>, pixels: &[(usize, usize)], gap: bool) -> (bool, Vec<u32>) {
    let (h, w) = instance.dim();
    let mut overlap = false;
    let mut adjacent = BTreeSet::new();
    for &(y, x) in pixels {
        if instance[(y, x)] != 0 {
            overlap = true;
        }
        if gap {
            for (dy, dx) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                    let id = instance[(ny as usize, nx as usize)];
                    if id != 0 {
                        adjacent.insert(id);
                    }
                }
            }
        }
    }
    (overlap, adjacent.into_iter().collect())
}

/// Draws one patch. All randomness comes from `rng`.
pub fn generate_patch_with(config: &ToyDataConfig, rng: &mut ChaCha8Rng) -> Result<Patch> {
    config.validate()?;
    let n = config.patch_size;
    let k_fg = config.num_fg_classes();
    let tissue_index = rng.random_range(0..config.tissue_names.len());
    let tissue = config.tissue_names[tissue_index].clone();
    let count = rng.random_range(config.nuclei_per_patch[0]..=config.nuclei_per_patch[1]);

    let mut instance = Array2::<u32>::zeros((n, n));
    let mut semantic = Array2::<u8>::zeros((n, n));
    let mut shades = Vec::new();
    let mut next_id = 1u32;
    for _ in 0..count {
        let class = rng.random_range(0..k_fg);
        let style = &config.class_palette[class];
        let want_touch = next_id > 1 && rng.random::<f64>() < config.touching_probability;
        let shade = rng.random_range(-0.06..0.06);
        for _ in 0..PLACEMENT_ATTEMPTS {
            let rx = rng.random_range(config.radius_range[0]..=config.radius_range[1]) * style.size_bias;
            let ry = rx * rng.random_range(0.7..=1.0);
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let (cy, cx) = if want_touch {
                let other = rng.random_range(1..next_id);
                let px = crate::conditioning::instance_pixels(&instance)
                    .remove(&other)
                    .unwrap_or_default();
                let (oy, ox) = crate::conditioning::instance_center(&px).unwrap_or((n / 2, n / 2));
                let dir = rng.random_range(0.0..std::f64::consts::TAU);
                let r_other = (px.len() as f64 / std::f64::consts::PI).sqrt();
                let reach = r_other + 0.5 * (rx + ry) + rng.random_range(-0.5..0.5);
                (oy as f64 + reach * dir.sin(), ox as f64 + reach * dir.cos())
            } else {
                let m = rx.ceil() + 1.0;
                (
                    rng.random_range(m..=(n as f64 - 1.0 - m)),
                    rng.random_range(m..=(n as f64 - 1.0 - m)),
                )
            };
            let m = rx.ceil();
            if cy < m || cx < m || cy > n as f64 - 1.0 - m || cx > n as f64 - 1.0 - m {
                continue;
            }
            let px = ellipse(n, cy, cx, ry, rx, angle);
            if px.len() < MIN_NUCLEUS_PIXELS {
                continue;
            }
            let (overlap, adjacent) = touches(&instance, &px, true);
            let ok = !overlap && if want_touch { !adjacent.is_empty() } else { adjacent.is_empty() };
            if !ok {
                continue;
            }
            for &p in &px {
                instance[p] = next_id;
                semantic[p] = class as u8 + 1;
            }
            shades.push(shade);
            next_id += 1;
            break;
        }
    }

    let bg = config.tissue_background(tissue_index);
    let texture = smooth_field(n, 4, rng);
    let grain = smooth_field(n, 8, rng);
    let amp = config.texture_amplitude;
    let mut image = Array3::<f32>::zeros((n, n, 3));
    for y in 0..n {
        for x in 0..n {
            let id = instance[(y, x)];
            let (base, shade) = if id == 0 {
                (bg, 0.0)
            } else {
                let c = semantic[(y, x)] as usize - 1;
                (config.class_palette[c].color, shades[id as usize - 1])
            };
            let t = amp * texture[(y, x)] + 0.5 * amp * grain[(y, x)] + shade;
            for ch in 0..3 {
                let v = base[ch] as f64 / 127.5 - 1.0 + t;
                image[(y, x, ch)] = v.clamp(-1.0, 1.0) as f32;
            }
        }
    }

    let distance = distance_map(&instance).0;
    let points = build_point_map(&instance, &semantic)?;
    let present: BTreeSet<u8> = semantic.iter().copied().filter(|&c| c != 0).collect();
    let names: Vec<&str> = if present.is_empty() {
        vec![NO_NUCLEI]
    } else {
        present
            .iter()
            .map(|&c| config.class_palette[c as usize - 1].name.as_str())
            .collect()
    };
    let prompt = make_prompt(&tissue, &names, config.stain.as_deref())?;
    Ok(Patch {
        triplet: TripletSample {
            image,
            distance,
            semantic,
            instance: Some(instance),
        },
        points,
        prompt,
        tissue,
    })
}

/// Generator for patch `index` of a dataset with seed `seed`.
pub fn patch_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Patch `index` of the dataset defined by `config` (including its seed).
pub fn generate_patch(config: &ToyDataConfig, index: u64) -> Result<Patch> {
    generate_patch_with(config, &mut patch_rng(config.seed, index))
}

pub fn generate_patches(config: &ToyDataConfig, count: usize) -> Result<Vec<Patch>> {
    (0..count as u64).map(|i| generate_patch(config, i)).collect()
}

/// Writes `count` patches under `root` (train first, then test) and the
/// manifest last, so an interrupted run leaves no manifest behind.
pub fn generate_dataset(
    config: &ToyDataConfig,
    count: usize,
    split_fractions: [f64; 2],
    root: &Path,
) -> Result<DatasetManifest> {
    config.validate()?;
    let (n_train, _) = split_counts(count, split_fractions)?;
    let mut names = vec!["background".to_string()];
    names.extend(config.class_names());
    let legend = (0..names.len()).map(|i| LABEL_LEGEND[i % LABEL_LEGEND.len()]).collect();
    let mut manifest = DatasetManifest::new(names, legend, config.digest());
    manifest.generator = Some(serde_json::to_value(config)?);
    manifest.seed = Some(config.seed);
    for i in 0..count {
        let patch = generate_patch(config, i as u64)?;
        let split = if i < n_train { Split::Train } else { Split::Test };
        let id = format!("{i:05}");
        manifest.samples.push(write_sample(
            root,
            &format!("{}/{id}", split.as_str()),
            &id,
            split,
            &patch.triplet,
            Some(&patch.points),
            &patch.prompt,
            &patch.tissue,
        )?);
    }
    manifest.save(root)?;
    Ok(manifest)
}

/// Train/test sizes for `count` samples: train gets round(count · fraction).
pub fn split_counts(count: usize, fractions: [f64; 2]) -> Result<(usize, usize)> {
    let [a, b] = fractions;
    if !(a >= 0.0 && b >= 0.0) || ((a + b) - 1.0).abs() > 1e-9 {
        return Err(Error::arg(format!(
            "split fractions must be nonnegative and sum to 1, got [{a}, {b}]"
        )));
    }
    let train = ((count as f64) * a).round() as usize;
    let train = train.min(count);
    Ok((train, count - train))
}

fn to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Image | distance | label | instance panels side by side.
pub fn render_triplet(t: &TripletSample) -> RgbImage {
    let (h, w) = t.shape();
    let mut img = RgbImage::new(4 * w as u32 + 3, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |c| to_u8(t.image[(y, x, c)]);
            img.put_pixel(x as u32, y as u32, Rgb([px(0), px(1), px(2)]));
            let d = (t.distance[(y, x)].clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel((w + 1 + x) as u32, y as u32, Rgb([d, d, d]));
            let l = LABEL_LEGEND[t.semantic[(y, x)] as usize % LABEL_LEGEND.len()];
            img.put_pixel((2 * w + 2 + x) as u32, y as u32, Rgb(l));
            let id = t.instance.as_ref().map_or(0, |i| i[(y, x)]);
            let c = if id == 0 {
                [0, 0, 0]
            } else {
                let hsh = id.wrapping_mul(2_654_435_761);
                [(hsh >> 24) as u8 | 64, (hsh >> 16) as u8 | 64, (hsh >> 8) as u8 | 64]
            };
            img.put_pixel((3 * w + 3 + x) as u32, y as u32, Rgb(c));
        }
    }
    img
}

/// Rows of rendered triplets stacked vertically with a 1-pixel gap.
pub fn save_grid(samples: &[&TripletSample], path: &Path) -> Result<()> {
    let rows: Vec<RgbImage> = samples.iter().map(|t| render_triplet(t)).collect();
    let width = rows.iter().map(|r| r.width()).max().unwrap_or(1);
    let height = rows.iter().map(|r| r.height() + 1).sum::<u32>().max(1);
    let mut out = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let mut y0 = 0;
    for r in &rows {
        image::imageops::replace(&mut out, r, 0, y0 as i64);
        y0 += r.height() + 1;
    }
    out.save(path)?;
    Ok(())
}
