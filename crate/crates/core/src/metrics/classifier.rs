//! Small image classifier used as the feature extractor for FID and IS.

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::Linear;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::frechet::{FeatureExtractor, ProbExtractor};
use crate::denoiser::conv::Conv;
use crate::denoiser::layers::linear;
use crate::denoiser::Params;
use crate::diffusion::images_to_tensor;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierConfig {
    pub width: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            width: 16,
            steps: 200,
            batch_size: 32,
            lr: 1e-2,
            seed: 0,
        }
    }
}

/// Two strided convolutions, global mean pooling and a linear head.
#[derive(Debug, Clone)]
pub struct ImageClassifier {
    conv1: Conv,
    conv2: Conv,
    head: Linear,
    width: usize,
    num_classes: usize,
    params: Params,
}

impl ImageClassifier {
    pub fn new(num_classes: usize, width: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 || width == 0 {
            return Err(Error::arg("classifier needs at least two classes and a positive width"));
        }
        let p = Params::new(seed, DType::F32, &Device::Cpu);
        Ok(Self {
            conv1: Conv::new(3, width / 2 + 1, 3, 2, &p.pp("conv1"))?,
            conv2: Conv::new(width / 2 + 1, width, 3, 2, &p.pp("conv2"))?,
            head: linear(width, num_classes, &p.pp("head"))?,
            width,
            num_classes,
            params: p,
        })
    }

    /// Fits on labelled images with Adam and cross-entropy.
    pub fn fit(images: &[Array3<f32>], labels: &[usize], num_classes: usize, cfg: ClassifierConfig) -> Result<Self> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(Error::arg("classifier needs matching nonempty images and labels"));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::arg(format!("label {l} outside 0..{num_classes}")));
        }
        let model = Self::new(num_classes, cfg.width, cfg.seed)?;
        let mut opt = Adam::new(
            model.params.vars(),
            AdamConfig {
                lr: cfg.lr,
                ..Default::default()
            },
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for _ in 0..cfg.steps {
            let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..images.len())).collect();
            let batch: Vec<&Array3<f32>> = idx.iter().map(|&i| &images[i]).collect();
            let x = images_to_tensor(&batch, DType::F32, &Device::Cpu)?;
            let y = Tensor::from_vec(
                idx.iter().map(|&i| labels[i] as u32).collect::<Vec<_>>(),
                idx.len(),
                &Device::Cpu,
            )?;
            let loss = candle_nn::loss::cross_entropy(&model.logits(&x)?, &y)?;
            opt.step(&loss.backward()?)?;
        }
        Ok(model)
    }

    fn pooled(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(x)?.relu()?;
        let h = self.conv2.forward(&h)?.relu()?;
        Ok(h.flatten_from(2)?.mean(D::Minus1)?)
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.head.forward(&self.pooled(x)?)?)
    }

    fn batched(&self, images: &[Array3<f32>], f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let x = images_to_tensor(&chunk.iter().collect::<Vec<_>>(), DType::F32, &Device::Cpu)?;
            let rows: Vec<Vec<f32>> = f(&x)?.to_vec2()?;
            out.extend(rows.into_iter().map(|r| r.into_iter().map(f64::from).collect()));
        }
        Ok(out)
    }

    pub fn predict(&self, images: &[Array3<f32>]) -> Result<Vec<usize>> {
        Ok(self
            .probabilities(images)?
            .iter()
            .map(|p| {
                p.iter()
                    .enumerate()
                    .fold((0, f64::MIN), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }
}

impl FeatureExtractor for ImageClassifier {
    fn dim(&self) -> usize {
        self.width
    }

    fn features(&self, images: &[Array3<f32>]) -> Result<Vec<Vec<f64>>> {
        self.batched(images, |x| self.pooled(x))
    }
}

impl ProbExtractor for ImageClassifier {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn probabilities(&self, images: &[Array3<f32>]) -> Result<Vec<Vec<f64>>> {
        self.batched(images, |x| Ok(candle_nn::ops::softmax(&self.logits(x)?, 1)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn separates_flat_colors() {
        let colors = [[-0.8f32, 0.2, 0.5], [0.6, -0.4, 0.1]];
        let mut imgs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let c = colors[i % 2];
            let jitter = (i as f32 * 0.37).sin() * 0.05;
            imgs.push(Array3::from_shape_fn((8, 8, 3), |(_, _, k)| c[k] + jitter));
            labels.push(i % 2);
        }
        let cfg = ClassifierConfig {
            steps: 60,
            ..Default::default()
        };
        let m = ImageClassifier::fit(&imgs, &labels, 2, cfg).unwrap();
        assert_eq!(m.predict(&imgs).unwrap(), labels);
        let f = m.features(&imgs[..3]).unwrap();
        assert_eq!((f.len(), f[0].len()), (3, 16));
    }
}
