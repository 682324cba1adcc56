//! Gaussian and categorical diffusion over (image, distance, label) triplets.
//!
//! Tensors are NCHW; categorical quantities keep classes on axis 1.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conditioning::{PointMap, TextCondition};
use crate::denoiser::{check_finite, DenoiserInput, DenoiserOutput, JointDenoiser};
use crate::error::{Error, Result};
use crate::schedules::{BranchSchedules, NoiseSchedule};

/// Tolerance for probability rows summing to one.
pub const ROW_TOL: f64 = 1e-6;
const LOG_FLOOR: f64 = 1e-30;

/// Image (H×W×3, [−1, 1]), distance map ([0, 1]), semantic label and optional instances.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletSample {
    pub image: Array3<f32>,
    pub distance: Array2<f32>,
    pub semantic: Array2<u8>,
    pub instance: Option<Array2<u32>>,
}

impl TripletSample {
    pub fn shape(&self) -> (usize, usize) {
        self.semantic.dim()
    }

    /// Shape, range and label-consistency checks; `num_classes` includes background.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let (h, w) = self.shape();
        if self.image.dim() != (h, w, 3) || self.distance.dim() != (h, w) {
            return Err(Error::Data(format!(
                "shapes disagree: image {:?}, distance {:?}, semantic {:?}",
                self.image.dim(),
                self.distance.dim(),
                (h, w)
            )));
        }
        if let Some(v) = self.image.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("image value {v} outside [-1, 1]")));
        }
        if let Some(v) = self.distance.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("distance value {v} outside [0, 1]")));
        }
        if let Some(v) = self.semantic.iter().find(|&&v| v as usize >= num_classes) {
            return Err(Error::Data(format!("label {v} outside 0..{num_classes}")));
        }
        if let Some(inst) = &self.instance {
            if inst.dim() != (h, w) {
                return Err(Error::Data("instance map shape differs".into()));
            }
            if let Some((p, _)) = inst
                .indexed_iter()
                .find(|(p, &id)| id != 0 && self.semantic[*p] == 0)
            {
                return Err(Error::Data(format!("instance pixel {p:?} has background class")));
            }
        }
        Ok(())
    }
}

/// A noisy triplet at step `t`, batch of one: image (1, 3, H, W),
/// distance (1, 1, H, W), label probabilities (1, K, H, W).
#[derive(Debug, Clone)]
pub struct NoisyState {
    pub t: usize,
    pub image: Tensor,
    pub distance: Tensor,
    pub label: Tensor,
}

/// Standard-normal tensor drawn from `rng`.
pub fn randn(rng: &mut impl Rng, dims: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let n: usize = dims.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, dims, device)?.to_dtype(dtype)?)
}

/// (B, 1, 1, 1) tensor of per-sample coefficients.
fn per_sample(values: Vec<f64>, like: &Tensor) -> Result<Tensor> {
    let b = values.len();
    Ok(Tensor::from_vec(values, (b, 1, 1, 1), like.device())?.to_dtype(like.dtype())?)
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::arg(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

fn batch_steps(x: &Tensor, steps: &[usize]) -> Result<()> {
    if x.rank() == 0 || x.dim(0)? != steps.len() {
        return Err(Error::arg(format!(
            "{} steps for tensor of shape {:?}",
            steps.len(),
            x.dims()
        )));
    }
    Ok(())
}

/// √ᾱ_t·x0 + √(1−ᾱ_t)·ε.
pub fn gaussian_forward_marginal(x0: &Tensor, t: usize, s: &NoiseSchedule, noise: &Tensor) -> Result<Tensor> {
    same_shape(x0, noise, "gaussian_forward_marginal")?;
    let ab = s.alpha_bar(t)?;
    Ok(((x0 * ab.sqrt())? + (noise * (1.0 - ab).sqrt())?)?)
}

/// Batched marginal with one step per leading-axis sample.
pub fn gaussian_forward_steps(x0: &Tensor, steps: &[usize], s: &NoiseSchedule, noise: &Tensor) -> Result<Tensor> {
    same_shape(x0, noise, "gaussian_forward_steps")?;
    batch_steps(x0, steps)?;
    let ab = steps.iter().map(|&t| s.alpha_bar(t)).collect::<Result<Vec<_>>>()?;
    let a = per_sample(ab.iter().map(|v| v.sqrt()).collect(), x0)?;
    let b = per_sample(ab.iter().map(|v| (1.0 - v).sqrt()).collect(), x0)?;
    Ok((x0.broadcast_mul(&a)? + noise.broadcast_mul(&b)?)?)
}

fn check_rows(p: &Tensor, what: &str) -> Result<()> {
    let k = p.dim(1)?;
    if k < 2 {
        return Err(Error::arg(format!("{what}: need at least 2 classes, got {k}")));
    }
    let sums = p.sum(1)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if let Some(s) = sums.iter().find(|s| (*s - 1.0).abs() > ROW_TOL) {
        return Err(Error::arg(format!("{what}: probability row sums to {s}")));
    }
    Ok(())
}

/// q(x_t | x0) = ᾱ_t·x0 + (1−ᾱ_t)/K.
pub fn categorical_forward_marginal(x0: &Tensor, t: usize, s: &NoiseSchedule) -> Result<Tensor> {
    check_rows(x0, "categorical_forward_marginal")?;
    let k = x0.dim(1)? as f64;
    let ab = s.alpha_bar(t)?;
    Ok(((x0 * ab)? + (1.0 - ab) / k)?)
}

pub fn categorical_forward_steps(x0: &Tensor, steps: &[usize], s: &NoiseSchedule) -> Result<Tensor> {
    check_rows(x0, "categorical_forward_steps")?;
    batch_steps(x0, steps)?;
    let k = x0.dim(1)? as f64;
    let ab = steps.iter().map(|&t| s.alpha_bar(t)).collect::<Result<Vec<_>>>()?;
    let a = per_sample(ab.clone(), x0)?;
    let c = per_sample(ab.iter().map(|v| (1.0 - v) / k).collect(), x0)?;
    Ok(x0.broadcast_mul(&a)?.broadcast_add(&c)?)
}

/// One draw per pixel from (B, K, H, W) probabilities; returns (B, H, W) u32 classes.
pub fn categorical_sample(probs: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
    let (b, k, h, w) = probs.dims4()?;
    let p = probs.to_dtype(DType::F64)?.permute((0, 2, 3, 1))?.flatten_all()?.to_vec1::<f64>()?;
    let mut out = Vec::with_capacity(b * h * w);
    for row in p.chunks(k) {
        out.push(sample_row(row, rng.random::<f64>()));
    }
    Ok(Tensor::from_vec(out, (b, h, w), probs.device())?)
}

fn sample_row(row: &[f64], u: f64) -> u32 {
    let total: f64 = row.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in row.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if target < acc {
            return i as u32;
        }
    }
    last as u32
}

/// (B, H, W) class indices to a (B, K, H, W) one-hot tensor.
pub fn one_hot(labels: &Tensor, k: usize, dtype: DType) -> Result<Tensor> {
    let classes = Tensor::arange(0u32, k as u32, labels.device())?.reshape((1, k, 1, 1))?;
    let l = labels.unsqueeze(1)?;
    if let Some(v) = l.flatten_all()?.to_vec1::<u32>()?.iter().find(|&&v| v as usize >= k) {
        return Err(Error::arg(format!("label {v} outside 0..{k}")));
    }
    Ok(l.broadcast_eq(&classes)?.to_dtype(dtype)?)
}

/// Unnormalized posterior factors for per-sample steps.
fn posterior_unnormalized(x_t: &Tensor, x0: &Tensor, steps: &[usize], s: &NoiseSchedule) -> Result<Tensor> {
    same_shape(x_t, x0, "categorical_posterior")?;
    batch_steps(x_t, steps)?;
    let k = x_t.dim(1)? as f64;
    let betas = steps.iter().map(|&t| s.beta(t)).collect::<Result<Vec<_>>>()?;
    let prev = steps.iter().map(|&t| s.alpha_bar_prev(t)).collect::<Result<Vec<_>>>()?;
    let fwd = x_t
        .broadcast_mul(&per_sample(betas.iter().map(|b| 1.0 - b).collect(), x_t)?)?
        .broadcast_add(&per_sample(betas.iter().map(|b| b / k).collect(), x_t)?)?;
    let back = x0
        .broadcast_mul(&per_sample(prev.clone(), x0)?)?
        .broadcast_add(&per_sample(prev.iter().map(|a| (1.0 - a) / k).collect(), x0)?)?;
    Ok((fwd * back)?)
}

/// q(x_{t−1} | x_t, x0) ∝ [(1−β_t)x_t + β_t/K] ⊙ [ᾱ_{t−1}x0 + (1−ᾱ_{t−1})/K], per-sample steps.
pub fn categorical_posterior_steps(x_t: &Tensor, x0: &Tensor, steps: &[usize], s: &NoiseSchedule) -> Result<Tensor> {
    let u = posterior_unnormalized(x_t, x0, steps, s)?;
    let z = u.sum_keepdim(1)?;
    let min = z.flatten_all()?.min(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !(min > 0.0) || !min.is_finite() {
        return Err(Error::Numeric(format!(
            "posterior normalizer {min} at steps {steps:?}"
        )));
    }
    Ok(u.broadcast_div(&z)?)
}

pub fn categorical_posterior(x_t: &Tensor, x0: &Tensor, t: usize, s: &NoiseSchedule) -> Result<Tensor> {
    let b = x_t.dim(0)?;
    categorical_posterior_steps(x_t, x0, &vec![t; b], s)
}

/// DDPM ancestral step with σ_t² = β_t, noise-free at t = 1.
pub fn gaussian_reverse_step(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    s: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    same_shape(x_t, eps_hat, "gaussian_reverse_step")?;
    let (beta, ab) = s.at(t)?;
    let mean = ((x_t - (eps_hat * (beta / (1.0 - ab).sqrt()))?)? / (1.0 - beta).sqrt())?;
    if t == 1 {
        return Ok(mean);
    }
    let z = randn(rng, x_t.dims(), x_t.dtype(), x_t.device())?;
    Ok((mean + (z * beta.sqrt())?)?)
}

/// Noise implied by the x0 estimate of `eps_hat`, with that estimate clamped to [lo, hi].
///
/// Feeding the result to [`gaussian_reverse_step`] gives the posterior mean around the
/// clamped x0. Near t = T, where β_t is close to one, the plain step divides by
/// √(1−β_t) and amplifies prediction error by orders of magnitude.
pub fn clamp_eps(x_t: &Tensor, eps_hat: &Tensor, t: usize, s: &NoiseSchedule, lo: f64, hi: f64) -> Result<Tensor> {
    same_shape(x_t, eps_hat, "clamp_eps")?;
    let ab = s.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    if !(a > 0.0) || !(b > 0.0) {
        return Ok(eps_hat.clone());
    }
    let x0 = ((x_t - (eps_hat * b)?)? / a)?.clamp(lo, hi)?;
    Ok(((x_t - (x0 * a)?)? / b)?)
}

/// ω·cond + (1−ω)·uncond.
pub fn cfg_combine(cond: &Tensor, uncond: &Tensor, omega: f64) -> Result<Tensor> {
    same_shape(cond, uncond, "cfg_combine")?;
    Ok(((cond * omega)? + (uncond * (1.0 - omega))?)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub image: f64,
    pub distance: f64,
    pub label: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            image: 9.0,
            distance: 1.0,
            label: 3.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [("image", self.image), ("distance", self.distance), ("label", self.label)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::arg(format!("loss weight {n} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn combine(&self, image: f64, distance: f64, label: f64) -> f64 {
        self.image * image + self.distance * distance + self.label * label
    }
}

/// Regression targets for one batch.
#[derive(Debug, Clone)]
pub struct JointTargets<'a> {
    pub eps_image: &'a Tensor,
    pub eps_distance: &'a Tensor,
    /// One-hot clean labels (B, K, H, W).
    pub label_x0: &'a Tensor,
    /// One-hot noisy labels the model saw.
    pub label_t: &'a Tensor,
    pub steps: &'a [usize],
}

#[derive(Debug, Clone)]
pub struct LossTerms {
    /// Weighted scalar with the autograd graph attached.
    pub total: Tensor,
    pub total_value: f64,
    pub image: f64,
    pub distance: f64,
    pub label: f64,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// T·KL(q(x_{t−1}|x_t,x0) ‖ p_θ(x_{t−1}|x_t)), averaged over pixels.
///
/// With t drawn uniformly from 1..=T this is the unbiased estimate of the summed
/// per-step terms of the bound. At t = 1 the true posterior is x0 itself, so the
/// KL is the cross-entropy −Σ x0·log p_θ(x0|x1).
pub fn label_loss(logits: &Tensor, targets: &JointTargets, s: &NoiseSchedule) -> Result<Tensor> {
    same_shape(logits, targets.label_x0, "label_loss")?;
    let x0_hat = candle_nn::ops::softmax(logits, 1)?;
    let q = posterior_unnormalized(targets.label_t, targets.label_x0, targets.steps, s)?;
    let q = q.broadcast_div(&q.sum_keepdim(1)?)?.detach();
    let p = posterior_unnormalized(targets.label_t, &x0_hat, targets.steps, s)?;
    let log_p = (p.clamp(LOG_FLOOR, f64::INFINITY)?.log()?
        .broadcast_sub(&p.sum_keepdim(1)?.log()?))?;
    let log_q = q.clamp(LOG_FLOOR, f64::INFINITY)?.log()?;
    let kl = (&q * (log_q - log_p)?)?.sum(1)?;
    Ok((kl.mean_all()? * s.num_steps() as f64)?)
}

pub fn joint_loss(
    out: &DenoiserOutput,
    targets: &JointTargets,
    label_schedule: &NoiseSchedule,
    weights: &LossWeights,
) -> Result<LossTerms> {
    weights.validate()?;
    same_shape(&out.eps_image, targets.eps_image, "image loss")?;
    same_shape(&out.eps_distance, targets.eps_distance, "distance loss")?;
    let li = (&out.eps_image - targets.eps_image)?.sqr()?.mean_all()?;
    let ld = (&out.eps_distance - targets.eps_distance)?.sqr()?.mean_all()?;
    let ll = label_loss(&out.label_logits, targets, label_schedule)?;
    let total = ((&li * weights.image)? + (&ld * weights.distance)? + (&ll * weights.label)?)?;
    let (image, distance, label) = (scalar(&li)?, scalar(&ld)?, scalar(&ll)?);
    Ok(LossTerms {
        total_value: scalar(&total)?,
        total,
        image,
        distance,
        label,
    })
}

/// How the text condition is used at sampling time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Guidance {
    /// One text-conditioned pass per step.
    Conditional,
    /// Conditional and text-dropped passes blended with `omega`.
    Free { omega: f64 },
}

impl Guidance {
    pub fn validate(&self) -> Result<()> {
        match self {
            Guidance::Free { omega } if !omega.is_finite() => {
                Err(Error::arg(format!("guidance scale must be finite, got {omega}")))
            }
            _ => Ok(()),
        }
    }
}

/// Per-step model prediction with guidance applied to all three heads.
fn guided(
    model: &JointDenoiser,
    x: (&Tensor, &Tensor, &Tensor),
    steps: &[usize],
    pf: &Tensor,
    text: &Tensor,
    guidance: Guidance,
) -> Result<DenoiserOutput> {
    let b = steps.len();
    let run = |present: bool| -> Result<DenoiserOutput> {
        let mask = model.text_mask(&vec![present; b])?;
        model.forward(&DenoiserInput {
            image: x.0,
            distance: x.1,
            label: x.2,
            steps,
            point_features: pf,
            text,
            text_mask: &mask,
        })
    };
    let cond = run(true)?;
    let out = match guidance {
        Guidance::Conditional => cond,
        Guidance::Free { omega } => {
            let unc = run(false)?;
            DenoiserOutput {
                eps_image: cfg_combine(&cond.eps_image, &unc.eps_image, omega)?,
                eps_distance: cfg_combine(&cond.eps_distance, &unc.eps_distance, omega)?,
                label_logits: cfg_combine(&cond.label_logits, &unc.label_logits, omega)?,
            }
        }
    };
    check_finite(&out, steps[0])?;
    // Sampling never backpropagates; dropping the graph keeps memory flat over the chain.
    Ok(DenoiserOutput {
        eps_image: out.eps_image.detach(),
        eps_distance: out.eps_distance.detach(),
        label_logits: out.label_logits.detach(),
    })
}

/// Runs the full reverse chain for a batch; trajectory `i` draws all its
/// randomness from a generator seeded with `seeds[i]`.
pub fn sample_batch(
    model: &JointDenoiser,
    pcs: &[&PointMap],
    tcs: &[&TextCondition],
    guidance: Guidance,
    schedules: &BranchSchedules,
    seeds: &[u64],
) -> Result<Vec<TripletSample>> {
    guidance.validate()?;
    let b = pcs.len();
    if b == 0 || tcs.len() != b || seeds.len() != b {
        return Err(Error::arg(format!(
            "batch needs matching nonempty inputs: {b} point maps, {} texts, {} seeds",
            tcs.len(),
            seeds.len()
        )));
    }
    let (h, w) = pcs[0].shape();
    model.check_size(h, w)?;
    let k = model.num_classes();
    let (dt, dev) = (model.dtype(), model.device());
    let pf = model.encode_points(pcs)?.detach();
    let text = model.text_tensor(tcs)?;
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();

    let stack = |parts: Vec<Tensor>| -> Result<Tensor> { Ok(Tensor::cat(&parts, 0)?) };
    let mut image = stack(
        rngs.iter_mut()
            .map(|r| randn(r, &[1, 3, h, w], dt, &dev))
            .collect::<Result<_>>()?,
    )?;
    let mut distance = stack(
        rngs.iter_mut()
            .map(|r| randn(r, &[1, 1, h, w], dt, &dev))
            .collect::<Result<_>>()?,
    )?;
    let uniform = (Tensor::ones((1, k, h, w), dt, &dev)? / k as f64)?;
    let mut label = stack(
        rngs.iter_mut()
            .map(|r| one_hot(&categorical_sample(&uniform, r)?, k, dt))
            .collect::<Result<_>>()?,
    )?;

    for t in (1..=schedules.num_steps()).rev() {
        let steps = vec![t; b];
        let out = guided(model, (&image, &distance, &label), &steps, &pf, &text, guidance)?;
        let x0_hat = candle_nn::ops::softmax(&out.label_logits, 1)?;
        let probs = categorical_posterior(&label, &x0_hat, t, &schedules.label)?;
        let mut next = (Vec::new(), Vec::new(), Vec::new());
        for (i, rng) in rngs.iter_mut().enumerate() {
            let sl = |x: &Tensor| x.narrow(0, i, 1);
            let (xi, xd) = (sl(&image)?, sl(&distance)?);
            let ei = clamp_eps(&xi, &sl(&out.eps_image)?, t, &schedules.image, -1.0, 1.0)?;
            let ed = clamp_eps(&xd, &sl(&out.eps_distance)?, t, &schedules.distance, 0.0, 1.0)?;
            next.0.push(gaussian_reverse_step(&xi, &ei, t, &schedules.image, rng)?);
            next.1.push(gaussian_reverse_step(&xd, &ed, t, &schedules.distance, rng)?);
            next.2.push(one_hot(&categorical_sample(&sl(&probs)?, rng)?, k, dt)?);
        }
        image = stack(next.0)?;
        distance = stack(next.1)?;
        label = stack(next.2)?;
    }

    let image = image.clamp(-1.0, 1.0)?.to_dtype(DType::F32)?;
    let distance = distance.clamp(0.0, 1.0)?.to_dtype(DType::F32)?;
    let classes = label.argmax(1)?.to_dtype(DType::U8)?;
    (0..b)
        .map(|i| {
            let img: Vec<f32> = image.get(i)?.permute((1, 2, 0))?.flatten_all()?.to_vec1()?;
            let d: Vec<f32> = distance.get(i)?.flatten_all()?.to_vec1()?;
            let l: Vec<u8> = classes.get(i)?.flatten_all()?.to_vec1()?;
            let shape_err = |e: ndarray::ShapeError| Error::Numeric(e.to_string());
            Ok(TripletSample {
                image: Array3::from_shape_vec((h, w, 3), img).map_err(shape_err)?,
                distance: Array2::from_shape_vec((h, w), d).map_err(shape_err)?,
                semantic: Array2::from_shape_vec((h, w), l).map_err(shape_err)?,
                instance: None,
            })
        })
        .collect()
}

/// Per-trajectory seeds for a run seeded with `seed`.
pub fn trajectory_seeds(seed: u64, count: usize) -> Vec<u64> {
    (0..count as u64)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(i);
            r.random::<u64>()
        })
        .collect()
}

/// Single-trajectory sampler.
pub fn sample_triplet(
    model: &JointDenoiser,
    pc: &PointMap,
    tc: &TextCondition,
    guidance: Guidance,
    schedules: &BranchSchedules,
    seed: u64,
) -> Result<TripletSample> {
    Ok(sample_batch(model, &[pc], &[tc], guidance, schedules, &[seed])?.remove(0))
}

/// Converts H×W×3 images to a (B, 3, H, W) tensor.
pub fn images_to_tensor(images: &[&Array3<f32>], dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w, _) = images.first().ok_or_else(|| Error::arg("empty image batch"))?.dim();
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.dim() != (h, w, 3) {
            return Err(Error::arg(format!("image shape {:?} in batch of {:?}", img.dim(), (h, w, 3))));
        }
        data.extend(img.view().permuted_axes([2, 0, 1]).iter().copied());
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?.to_dtype(dtype)?)
}

/// Stacks H×W maps into a (B, 1, H, W) tensor.
pub fn maps_to_tensor(maps: &[&Array2<f32>], dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w) = maps.first().ok_or_else(|| Error::arg("empty map batch"))?.dim();
    let mut data = Vec::with_capacity(maps.len() * h * w);
    for m in maps {
        if m.dim() != (h, w) {
            return Err(Error::arg("map shapes differ within batch"));
        }
        data.extend(m.iter().copied());
    }
    Ok(Tensor::from_vec(data, (maps.len(), 1, h, w), device)?.to_dtype(dtype)?)
}

/// Stacks H×W label maps into a (B, H, W) u32 tensor.
pub fn labels_to_tensor(labels: &[&Array2<u8>], device: &Device) -> Result<Tensor> {
    let (h, w) = labels.first().ok_or_else(|| Error::arg("empty label batch"))?.dim();
    let mut data = Vec::with_capacity(labels.len() * h * w);
    for l in labels {
        if l.dim() != (h, w) {
            return Err(Error::arg("label shapes differ within batch"));
        }
        data.extend(l.iter().map(|&v| v as u32));
    }
    Ok(Tensor::from_vec(data, (labels.len(), h, w), device)?)
}
