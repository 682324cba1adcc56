//! Independent reference implementations and fixtures shared by the test targets.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Device, Tensor};
use cosynth::conditioning::{HashEmbedder, PointMap, TextCondition};
use cosynth::denoiser::{DenoiserConfig, PointEncoderConfig};
use cosynth::diffusion::TripletSample;
use cosynth::schedules::NoiseSchedule;
use cosynth::toydata::{generate_patch, ToyDataConfig};
use cosynth::train::Example;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- models and data

pub fn tiny_model(num_classes: usize) -> DenoiserConfig {
    DenoiserConfig {
        num_classes,
        base_width: 8,
        width_mults: vec![1, 2],
        groups: 4,
        time_dim: 16,
        text_dim: 16,
        points: PointEncoderConfig {
            features: 4,
            growth: 4,
            blocks: 1,
            dense_blocks: 1,
            dense_layers: 1,
        },
    }
}

pub fn small_data() -> ToyDataConfig {
    ToyDataConfig {
        patch_size: 16,
        nuclei_per_patch: [1, 4],
        ..Default::default()
    }
}

pub fn examples(cfg: &ToyDataConfig, n: usize, text_dim: usize) -> Vec<Example> {
    let emb = HashEmbedder::new(text_dim).unwrap();
    (0..n as u64)
        .map(|i| {
            let p = generate_patch(cfg, i).unwrap();
            Example {
                text: TextCondition::new(&emb, &p.prompt).unwrap(),
                triplet: p.triplet,
                points: p.points,
            }
        })
        .collect()
}

/// Random in-range triplet with one marker per foreground class present.
pub fn random_example(rng: &mut ChaCha8Rng, size: usize, k: usize, prompt: &str, text_dim: usize) -> Example {
    let image = Array3::from_shape_fn((size, size, 3), |_| rng.random_range(-1.0f32..=1.0));
    let distance = Array2::from_shape_fn((size, size), |_| rng.random_range(0.0f32..=1.0));
    let semantic = Array2::from_shape_fn((size, size), |_| rng.random_range(0..k as u8));
    let mut grid = Array2::zeros((size, size));
    for ((y, x), &c) in semantic.indexed_iter() {
        if c != 0 && rng.random_bool(0.3) {
            grid[(y, x)] = c;
        }
    }
    let emb = HashEmbedder::new(text_dim).unwrap();
    Example {
        triplet: TripletSample {
            image,
            distance,
            semantic,
            instance: None,
        },
        points: PointMap::new(grid),
        text: TextCondition::new(&emb, prompt).unwrap(),
    }
}

pub fn to_vec_f64(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

// ---------------------------------------------------------------- categorical chain

/// Single-step transition matrix (1−β)I + β/K·11ᵀ, row = from-state.
pub fn transition(k: usize, beta: f64) -> Vec<Vec<f64>> {
    (0..k)
        .map(|i| {
            (0..k)
                .map(|j| if i == j { 1.0 - beta + beta / k as f64 } else { beta / k as f64 })
                .collect()
        })
        .collect()
}

pub fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let m = b[0].len();
    (0..n)
        .map(|i| (0..m).map(|j| (0..b.len()).map(|l| a[i][l] * b[l][j]).sum()).collect())
        .collect()
}

pub fn identity(k: usize) -> Vec<Vec<f64>> {
    (0..k).map(|i| (0..k).map(|j| (i == j) as u8 as f64).collect()).collect()
}

/// Per-pixel probabilities of a chain over a grid of `pixels` binary-or-K states,
/// computed by enumerating every joint path x0 → x1 → … → xT.
pub struct ChainEnumeration {
    pub k: usize,
    pub pixels: usize,
    pub steps: usize,
    /// joint[path] over (x0, x1, …, xT) grid states, each grid encoded in base K.
    pub joint: Vec<f64>,
}

impl ChainEnumeration {
    /// `prior[p][c]` is the probability that pixel `p` starts in class `c`.
    pub fn new(k: usize, prior: &[Vec<f64>], betas: &[f64]) -> Self {
        let pixels = prior.len();
        let states = k.pow(pixels as u32);
        let steps = betas.len();
        let mats: Vec<_> = betas.iter().map(|&b| transition(k, b)).collect();
        let total = states.pow((steps + 1) as u32);
        let mut joint = vec![0.0; total];
        for (path, slot) in joint.iter_mut().enumerate() {
            let seq = Self::decode_path(path, states, steps + 1);
            let mut p = 1.0;
            for px in 0..pixels {
                let cls = |s: usize| (s / k.pow(px as u32)) % k;
                p *= prior[px][cls(seq[0])];
                for t in 1..=steps {
                    p *= mats[t - 1][cls(seq[t - 1])][cls(seq[t])];
                }
            }
            *slot = p;
        }
        Self { k, pixels, steps, joint }
    }

    fn decode_path(mut path: usize, states: usize, len: usize) -> Vec<usize> {
        let mut seq = vec![0; len];
        for s in seq.iter_mut() {
            *s = path % states;
            path /= states;
        }
        seq
    }

    pub fn states(&self) -> usize {
        self.k.pow(self.pixels as u32)
    }

    pub fn class_of(&self, state: usize, pixel: usize) -> usize {
        (state / self.k.pow(pixel as u32)) % self.k
    }

    /// P(x_{t−1}[pixel] = c | x_t = state), indexed [state][pixel][c].
    pub fn posteriors(&self, t: usize) -> Vec<Vec<Vec<f64>>> {
        let n = self.states();
        let mut num = vec![vec![vec![0.0; self.k]; self.pixels]; n];
        let mut den = vec![0.0; n];
        for (path, &p) in self.joint.iter().enumerate() {
            let seq = Self::decode_path(path, n, self.steps + 1);
            den[seq[t]] += p;
            for px in 0..self.pixels {
                num[seq[t]][px][self.class_of(seq[t - 1], px)] += p;
            }
        }
        for (rows, d) in num.iter_mut().zip(&den) {
            for v in rows.iter_mut().flatten() {
                *v /= d;
            }
        }
        num
    }

    /// P(x_t[pixel] = c).
    pub fn marginal(&self, t: usize, pixel: usize) -> Vec<f64> {
        let n = self.states();
        let mut out = vec![0.0; self.k];
        for (path, &p) in self.joint.iter().enumerate() {
            let seq = Self::decode_path(path, n, self.steps + 1);
            out[self.class_of(seq[t], pixel)] += p;
        }
        out
    }
}

/// (1, K, H, W) tensor from per-pixel rows, pixels in row-major order.
pub fn rows_to_tensor(rows: &[Vec<f64>], h: usize, w: usize) -> Tensor {
    let k = rows[0].len();
    let mut data = vec![0.0; k * h * w];
    for (p, row) in rows.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            data[c * h * w + p] = v;
        }
    }
    Tensor::from_vec(data, (1, k, h, w), &Device::Cpu).unwrap()
}

/// Per-pixel rows of a (1, K, H, W) tensor.
pub fn tensor_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (_, k, h, w) = t.dims4().unwrap();
    let v = to_vec_f64(t);
    (0..h * w).map(|p| (0..k).map(|c| v[c * h * w + p]).collect()).collect()
}

pub fn schedule_betas(s: &NoiseSchedule) -> Vec<f64> {
    s.betas().to_vec()
}

// ---------------------------------------------------------------- metric oracles

fn ids(m: &Array2<u32>) -> BTreeSet<u32> {
    m.iter().copied().filter(|&v| v != 0).collect()
}

fn area(m: &Array2<u32>, id: u32) -> usize {
    m.iter().filter(|&&v| v == id).count()
}

fn inter(a: &Array2<u32>, ia: u32, b: &Array2<u32>, ib: u32) -> usize {
    a.iter().zip(b.iter()).filter(|(&x, &y)| x == ia && y == ib).count()
}

/// Per-nucleus Dice against the most-overlapping prediction, by pixel scans.
pub fn brute_mdice(pred: &Array2<u32>, gt: &Array2<u32>) -> Option<f64> {
    let g_ids = ids(gt);
    if g_ids.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    for &g in &g_ids {
        let mut best: Option<(u32, usize)> = None;
        for &p in &ids(pred) {
            let n = inter(gt, g, pred, p);
            if n > 0 && best.is_none_or(|(_, bn)| n > bn) {
                best = Some((p, n));
            }
        }
        if let Some((p, n)) = best {
            sum += 2.0 * n as f64 / (area(gt, g) + area(pred, p)) as f64;
        }
    }
    Some(sum / g_ids.len() as f64)
}

/// AJI by pixel scans: best-IoU prediction per ground truth (lowest id on ties).
pub fn brute_aji(pred: &Array2<u32>, gt: &Array2<u32>) -> Option<f64> {
    let g_ids = ids(gt);
    if g_ids.is_empty() {
        return None;
    }
    let p_ids = ids(pred);
    let (mut i_sum, mut u_sum) = (0usize, 0usize);
    let mut used = BTreeSet::new();
    for &g in &g_ids {
        let ga = area(gt, g);
        let mut best: Option<(u32, usize, usize)> = None;
        for &p in &p_ids {
            let n = inter(gt, g, pred, p);
            if n == 0 {
                continue;
            }
            let u = ga + area(pred, p) - n;
            let better = match best {
                None => true,
                // n/u > bn/bu without floating point.
                Some((_, bn, bu)) => n * bu > bn * u,
            };
            if better {
                best = Some((p, n, u));
            }
        }
        match best {
            Some((p, n, u)) => {
                i_sum += n;
                u_sum += u;
                used.insert(p);
            }
            None => u_sum += ga,
        }
    }
    for &p in &p_ids {
        if !used.contains(&p) {
            u_sum += area(pred, p);
        }
    }
    Some(i_sum as f64 / u_sum as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BruteDetection {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub f_d: f64,
    pub acc: Option<f64>,
    pub per_class_f: Vec<Option<f64>>,
}

fn majority(classes: &Array2<u8>, m: &Array2<u32>, id: u32) -> u8 {
    let mut counts = BTreeMap::new();
    for (&v, &c) in m.iter().zip(classes.iter()) {
        if v == id && c != 0 {
            *counts.entry(c).or_insert(0usize) += 1;
        }
    }
    // Highest count, lowest class on ties.
    counts.iter().fold((0u8, 0usize), |b, (&c, &n)| if n > b.1 { (c, n) } else { b }).0
}

/// Detection scores by enumerating every (gt, pred) pair against the IoU > 0.5 rule.
///
/// Such pairs are automatically one-to-one, so no matching search is needed;
/// the function asserts that property instead of relying on it.
pub fn brute_detection(
    pred: &Array2<u32>,
    pred_cls: &Array2<u8>,
    gt: &Array2<u32>,
    gt_cls: &Array2<u8>,
    k_fg: usize,
) -> BruteDetection {
    let (g_ids, p_ids) = (ids(gt), ids(pred));
    let mut pairs = Vec::new();
    for &g in &g_ids {
        for &p in &p_ids {
            let n = inter(gt, g, pred, p);
            let u = area(gt, g) + area(pred, p) - n;
            if 2 * n > u {
                pairs.push((g, p));
            }
        }
    }
    let gs: BTreeSet<_> = pairs.iter().map(|x| x.0).collect();
    let ps: BTreeSet<_> = pairs.iter().map(|x| x.1).collect();
    assert_eq!(gs.len(), pairs.len(), "IoU > 0.5 pairs must be one-to-one");
    assert_eq!(ps.len(), pairs.len(), "IoU > 0.5 pairs must be one-to-one");

    let tp = pairs.len();
    let fp = p_ids.len() - tp;
    let fn_ = g_ids.len() - tp;
    let f = |tp: usize, fp: usize, fn_: usize| {
        let d = 2 * tp + fp + fn_;
        (d > 0).then(|| 2.0 * tp as f64 / d as f64)
    };
    let mut per = vec![(0usize, 0usize, 0usize); k_fg + 1];
    let mut correct = 0;
    for &(g, p) in &pairs {
        let (cg, cp) = (majority(gt_cls, gt, g) as usize, majority(pred_cls, pred, p) as usize);
        if cg == cp {
            correct += 1;
            per[cg].0 += 1;
        } else {
            per[cg].2 += 1;
            per[cp].1 += 1;
        }
    }
    for &p in p_ids.iter().filter(|p| !ps.contains(p)) {
        per[majority(pred_cls, pred, p) as usize].1 += 1;
    }
    for &g in g_ids.iter().filter(|g| !gs.contains(g)) {
        per[majority(gt_cls, gt, g) as usize].2 += 1;
    }
    BruteDetection {
        tp,
        fp,
        fn_,
        f_d: f(tp, fp, fn_).unwrap_or(1.0),
        acc: (tp > 0).then(|| correct as f64 / tp as f64),
        per_class_f: (1..=k_fg).map(|c| f(per[c].0, per[c].1, per[c].2)).collect(),
    }
}

/// Random instance map of rectangles painted over each other, ids relabelled to be
/// connected-agnostic (an id may be fragmented by later paint; both sides see the same map).
pub fn random_instances(rng: &mut ChaCha8Rng, size: usize, max_rects: usize) -> Array2<u32> {
    let mut m = Array2::zeros((size, size));
    let n = rng.random_range(0..=max_rects);
    for id in 1..=n as u32 {
        let (h, w) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let (y, x) = (rng.random_range(0..size), rng.random_range(0..size));
        for yy in y..(y + h).min(size) {
            for xx in x..(x + w).min(size) {
                m[(yy, xx)] = id;
            }
        }
    }
    m
}

/// A prediction derived from `gt`: shifted, partly merged, partly dropped, with extra blobs.
pub fn perturb_instances(rng: &mut ChaCha8Rng, gt: &Array2<u32>) -> Array2<u32> {
    let (h, w) = gt.dim();
    let (dy, dx) = (rng.random_range(-1i32..=1), rng.random_range(-1i32..=1));
    let mut remap = BTreeMap::new();
    for &g in &ids(gt) {
        let target = match rng.random_range(0..10) {
            0 => 0,
            1 => 1 + rng.random_range(0..3),
            _ => 100 + g * 7 % 13 + g,
        };
        remap.insert(g, target);
    }
    let mut p = Array2::zeros((h, w));
    for ((y, x), &g) in gt.indexed_iter() {
        if g == 0 || rng.random_bool(0.05) {
            continue;
        }
        let (ny, nx) = (y as i32 + dy, x as i32 + dx);
        if (0..h as i32).contains(&ny) && (0..w as i32).contains(&nx) {
            p[(ny as usize, nx as usize)] = remap[&g];
        }
    }
    for _ in 0..rng.random_range(0..3) {
        let (y, x) = (rng.random_range(0..h), rng.random_range(0..w));
        for yy in y..(y + 3).min(h) {
            for xx in x..(x + 3).min(w) {
                p[(yy, xx)] = 500 + rng.random_range(0..3);
            }
        }
    }
    p
}

/// Class map where every instance carries one random class, with occasional mixed pixels.
pub fn random_classes(rng: &mut ChaCha8Rng, inst: &Array2<u32>, k_fg: usize) -> Array2<u8> {
    let mut of: BTreeMap<u32, u8> = BTreeMap::new();
    for &i in &ids(inst) {
        of.insert(i, rng.random_range(1..=k_fg as u8));
    }
    inst.mapv(|i| {
        if i == 0 {
            0
        } else if rng.random_bool(0.1) {
            rng.random_range(1..=k_fg as u8)
        } else {
            of[&i]
        }
    })
}

// ---------------------------------------------------------------- disk fixtures

pub fn disk_pixels(cy: i64, cx: i64, r: f64, size: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..size as i64 {
        for x in 0..size as i64 {
            let (ddy, ddx) = ((y - cy) as f64, (x - cx) as f64);
            if ddy * ddy + ddx * ddx <= r * r {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

fn adjacent(a: &[(usize, usize)], b: &[(usize, usize)]) -> bool {
    let set: BTreeSet<_> = a.iter().copied().collect();
    b.iter().any(|&(y, x)| {
        (-1i64..=1).any(|dy| {
            (-1i64..=1).any(|dx| {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                ny >= 0 && nx >= 0 && set.contains(&(ny as usize, nx as usize))
            })
        })
    })
}

/// Equal disks laid out along `dir`, each as close to its predecessor as
/// possible without sharing a pixel; returns (instance, semantic).
pub fn touching_disks(
    count: usize,
    r: f64,
    dir: (i64, i64),
    class: u8,
    size: usize,
) -> Option<(Array2<u32>, Array2<u8>)> {
    let back = (count as i64 - 1) * r.ceil() as i64;
    let c0 = (size as i64 / 2 - dir.0 * back, size as i64 / 2 - dir.1 * back);
    let full = disk_pixels(100, 100, r, 201).len();
    let mut inst = Array2::zeros((size, size));
    let mut prev = disk_pixels(c0.0, c0.1, r, size);
    if prev.len() != full {
        return None;
    }
    let mut centre = c0;
    for &p in &prev {
        inst[p] = 1u32;
    }
    for id in 2..=count as u32 {
        let mut step = 1;
        loop {
            let c = (centre.0 + dir.0 * step, centre.1 + dir.1 * step);
            let px = disk_pixels(c.0, c.1, r, size);
            if px.iter().all(|&p| inst[p] == 0) {
                if px.len() != full || !adjacent(&prev, &px) {
                    return None;
                }
                for &p in &px {
                    inst[p] = id;
                }
                prev = px;
                centre = c;
                break;
            }
            step += 1;
        }
    }
    let sem = inst.mapv(|v| if v == 0 { 0 } else { class });
    Some((inst, sem))
}

/// Randomly placed equal disks with at least a one-pixel gap between any two.
pub fn separated_disks(rng: &mut ChaCha8Rng, size: usize, k_fg: usize) -> (Array2<u32>, Array2<u8>) {
    let mut inst = Array2::zeros((size, size));
    let mut sem = Array2::zeros((size, size));
    let mut id = 0;
    for _ in 0..40 {
        let r = rng.random_range(1.5..4.0);
        let (cy, cx) = (rng.random_range(0..size as i64), rng.random_range(0..size as i64));
        let px = disk_pixels(cy, cx, r, size);
        let clear = px.iter().all(|&(y, x)| {
            (-1i64..=1).all(|dy| {
                (-1i64..=1).all(|dx| {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    ny < 0 || nx < 0 || ny >= size as i64 || nx >= size as i64 || inst[(ny as usize, nx as usize)] == 0
                })
            })
        });
        if !clear || px.is_empty() {
            continue;
        }
        id += 1;
        let c = rng.random_range(1..=k_fg as u8);
        for p in px {
            inst[p] = id;
            sem[p] = c;
        }
    }
    (inst, sem)
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
