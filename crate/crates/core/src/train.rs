//! Mini-batch training of the joint denoiser.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{PointMap, TextCondition};
use crate::denoiser::{DenoiserInput, JointDenoiser};
use crate::diffusion::{
    categorical_forward_steps, categorical_sample, gaussian_forward_steps, images_to_tensor,
    joint_loss, labels_to_tensor, maps_to_tensor, one_hot, randn, LossWeights, TripletSample,
};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::schedules::BranchSchedules;

/// One conditioned training triplet.
#[derive(Debug, Clone)]
pub struct Example {
    pub triplet: TripletSample,
    pub points: PointMap,
    pub text: TextCondition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub text_dropout: f64,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            steps: 1000,
            text_dropout: 0.1,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::arg("batch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.text_dropout) {
            return Err(Error::arg(format!(
                "text_dropout must lie in [0, 1], got {}",
                self.text_dropout
            )));
        }
        self.weights.validate()?;
        self.adam.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub total: f64,
    pub image: f64,
    pub distance: f64,
    pub label: f64,
}

pub const LOSS_LOG_HEADER: &str = "step,total,image,distance,label";

impl LossRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.8e},{:.8e},{:.8e},{:.8e}",
            self.step, self.total, self.image, self.distance, self.label
        )
    }
}

pub fn write_loss_log(w: &mut impl Write, records: &[LossRecord]) -> std::io::Result<()> {
    writeln!(w, "{LOSS_LOG_HEADER}")?;
    for r in records {
        writeln!(w, "{}", r.csv_line())?;
    }
    Ok(())
}

/// The random draws of one optimization step.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub indices: Vec<usize>,
    pub steps: Vec<usize>,
    pub text_present: Vec<bool>,
}

pub struct Trainer {
    model: JointDenoiser,
    opt: Adam,
    schedules: BranchSchedules,
    config: TrainConfig,
}

impl Trainer {
    pub fn new(model: JointDenoiser, schedules: BranchSchedules, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let opt = Adam::new(model.params().vars(), config.adam)?;
        Ok(Self { model, opt, schedules, config })
    }

    pub fn model(&self) -> &JointDenoiser {
        &self.model
    }

    pub fn optimizer(&self) -> &Adam {
        &self.opt
    }

    pub fn optimizer_mut(&mut self) -> &mut Adam {
        &mut self.opt
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn schedules(&self) -> &BranchSchedules {
        &self.schedules
    }

    /// Completed optimization steps.
    pub fn step_count(&self) -> u64 {
        self.opt.step_count()
    }

    /// Generator for the step about to run; depends only on seed and step.
    fn step_rng(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step);
        rng
    }

    /// Loss of the model on a batch without updating parameters.
    pub fn batch_loss(
        &self,
        data: &[Example],
        plan: &BatchPlan,
        rng: &mut ChaCha8Rng,
    ) -> Result<crate::diffusion::LossTerms> {
        let m = &self.model;
        let (dt, dev) = (m.dtype(), m.device());
        let k = m.num_classes();
        let ex: Vec<&Example> = plan.indices.iter().map(|&i| &data[i]).collect();
        let b = ex.len();
        let (h, w) = ex[0].triplet.shape();

        let x0_img = images_to_tensor(&ex.iter().map(|e| &e.triplet.image).collect::<Vec<_>>(), dt, &dev)?;
        let x0_dist = maps_to_tensor(&ex.iter().map(|e| &e.triplet.distance).collect::<Vec<_>>(), dt, &dev)?;
        let labels = labels_to_tensor(&ex.iter().map(|e| &e.triplet.semantic).collect::<Vec<_>>(), &dev)?;
        let x0_lab = one_hot(&labels, k, dt)?;

        let eps_i = randn(rng, &[b, 3, h, w], dt, &dev)?;
        let eps_d = randn(rng, &[b, 1, h, w], dt, &dev)?;
        let xt_img = gaussian_forward_steps(&x0_img, &plan.steps, &self.schedules.image, &eps_i)?;
        let xt_dist = gaussian_forward_steps(&x0_dist, &plan.steps, &self.schedules.distance, &eps_d)?;
        let q = categorical_forward_steps(&x0_lab, &plan.steps, &self.schedules.label)?;
        let xt_lab = one_hot(&categorical_sample(&q, rng)?, k, dt)?;

        let pf = m.encode_points(&ex.iter().map(|e| &e.points).collect::<Vec<_>>())?;
        let text = m.text_tensor(&ex.iter().map(|e| &e.text).collect::<Vec<_>>())?;
        let mask = m.text_mask(&plan.text_present)?;
        let out = m.forward(&DenoiserInput {
            image: &xt_img,
            distance: &xt_dist,
            label: &xt_lab,
            steps: &plan.steps,
            point_features: &pf,
            text: &text,
            text_mask: &mask,
        })?;
        joint_loss(
            &out,
            &crate::diffusion::JointTargets {
                eps_image: &eps_i,
                eps_distance: &eps_d,
                label_x0: &x0_lab,
                label_t: &xt_lab,
                steps: &plan.steps,
            },
            &self.schedules.label,
            &self.config.weights,
        )
    }

    fn plan(&self, n: usize, rng: &mut ChaCha8Rng) -> BatchPlan {
        let b = self.config.batch_size;
        let t_max = self.schedules.num_steps();
        let indices = (0..b).map(|_| rng.random_range(0..n)).collect();
        let steps = (0..b).map(|_| rng.random_range(1..=t_max)).collect();
        let text_present = (0..b)
            .map(|_| rng.random::<f64>() >= self.config.text_dropout)
            .collect();
        BatchPlan { indices, steps, text_present }
    }

    /// One optimization step on a batch drawn with replacement from `data`.
    pub fn train_step(&mut self, data: &[Example]) -> Result<LossRecord> {
        if data.is_empty() {
            return Err(Error::arg("empty training set"));
        }
        let (h, w) = data[0].triplet.shape();
        self.model.check_size(h, w)?;
        let step = self.opt.step_count();
        let mut rng = self.step_rng(step);
        let plan = self.plan(data.len(), &mut rng);
        let loss = self.batch_loss(data, &plan, &mut rng)?;
        if !loss.total_value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {}", step + 1)));
        }
        let grads = loss.total.backward()?;
        self.opt.step(&grads)?;
        Ok(LossRecord {
            step: step + 1,
            total: loss.total_value,
            image: loss.image,
            distance: loss.distance,
            label: loss.label,
        })
    }

    /// Runs until `config.steps` steps have completed, calling `on_step` after each.
    pub fn run(
        &mut self,
        data: &[Example],
        mut on_step: impl FnMut(&Self, &LossRecord) -> Result<()>,
    ) -> Result<Vec<LossRecord>> {
        let mut out = Vec::new();
        while self.step_count() < self.config.steps {
            let r = self.train_step(data)?;
            on_step(self, &r)?;
            out.push(r);
        }
        Ok(out)
    }
}

/// Mean of the first and last `window` totals, for trend checks.
pub fn smoothed_ends(records: &[LossRecord], window: usize) -> Option<(f64, f64)> {
    if window == 0 || records.len() < window {
        return None;
    }
    let mean = |r: &[LossRecord]| r.iter().map(|x| x.total).sum::<f64>() / r.len() as f64;
    Some((mean(&records[..window]), mean(&records[records.len() - window..])))
}
