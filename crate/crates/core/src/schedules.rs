//! Per-branch noise schedules shared by the Gaussian and categorical processes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest per-step noise rate a cosine schedule may emit.
pub const MAX_BETA: f64 = 0.999;

/// Default offset of the cosine schedule.
pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;

/// Per-step noise rates β_t and their cumulative signal fractions ᾱ_t, for t = 1..=T.
///
/// Steps are 1-based everywhere in the public API; ᾱ_0 is the implicit 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Serializable description of a schedule, as it appears in run configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CosineScheduleConfig {
    pub steps: usize,
    #[serde(default = "default_offset")]
    pub offset: f64,
}

fn default_offset() -> f64 {
    DEFAULT_COSINE_OFFSET
}

impl Default for CosineScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            offset: DEFAULT_COSINE_OFFSET,
        }
    }
}

impl CosineScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        cosine_schedule(self.steps, self.offset)
    }
}

/// Builds the cosine schedule ᾱ(t) = f(t)/f(0) with
/// f(t) = cos²(((t/T + s)/(1 + s)) · π/2), clipping every β_t at [`MAX_BETA`].
///
/// The stored ᾱ values are re-accumulated from the clipped betas so that
/// ᾱ_t = ᾱ_{t-1}·(1-β_t) holds exactly in floating point.
pub fn cosine_schedule(steps: usize, offset: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::arg("cosine schedule needs at least one step"));
    }
    if !(offset > 0.0 && offset < 1.0) {
        return Err(Error::arg(format!(
            "cosine offset must lie in (0, 1), got {offset}"
        )));
    }
    let f = |t: usize| {
        let x = (t as f64 / steps as f64 + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2;
        x.cos().powi(2)
    };
    let f0 = f(0);
    let betas = (1..=steps)
        .map(|t| {
            let beta = 1.0 - (f(t) / f0) / (f(t - 1) / f0);
            beta.clamp(f64::MIN_POSITIVE, MAX_BETA)
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    /// Builds a schedule from explicit betas, each of which must lie in (0, 1).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::arg("schedule needs at least one step"));
        }
        if let Some((i, b)) = betas
            .iter()
            .enumerate()
            .find(|(_, &b)| !(b > 0.0 && b < 1.0))
        {
            return Err(Error::arg(format!("beta_{} = {b} is outside (0, 1)", i + 1)));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.betas.len() {
            return Err(Error::Index {
                index: t,
                len: self.betas.len(),
            });
        }
        Ok(())
    }

    /// Returns (β_t, ᾱ_t) for 1 ≤ t ≤ T.
    pub fn at(&self, t: usize) -> Result<(f64, f64)> {
        self.check(t)?;
        Ok((self.betas[t - 1], self.alpha_bars[t - 1]))
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.at(t).map(|(b, _)| b)
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.at(t).map(|(_, a)| a)
    }

    /// ᾱ_{t-1}, with ᾱ_0 = 1.
    pub fn alpha_bar_prev(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(if t == 1 { 1.0 } else { self.alpha_bars[t - 2] })
    }
}

/// Free-function form of [`NoiseSchedule::at`].
pub fn schedule_at(schedule: &NoiseSchedule, t: usize) -> Result<(f64, f64)> {
    schedule.at(t)
}

/// The three per-branch schedules of the joint process.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchSchedules {
    pub image: NoiseSchedule,
    pub distance: NoiseSchedule,
    pub label: NoiseSchedule,
}

impl BranchSchedules {
    pub fn new(image: NoiseSchedule, distance: NoiseSchedule, label: NoiseSchedule) -> Result<Self> {
        let t = image.num_steps();
        if distance.num_steps() != t || label.num_steps() != t {
            return Err(Error::arg(format!(
                "branch schedules disagree on T: image {t}, distance {}, label {}",
                distance.num_steps(),
                label.num_steps()
            )));
        }
        Ok(Self {
            image,
            distance,
            label,
        })
    }

    /// Identical cosine schedules on all three branches.
    pub fn cosine(steps: usize, offset: f64) -> Result<Self> {
        let s = cosine_schedule(steps, offset)?;
        Self::new(s.clone(), s.clone(), s)
    }

    pub fn num_steps(&self) -> usize {
        self.image.num_steps()
    }
}
