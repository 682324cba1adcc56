use candle_core::{Module, Result, Tensor};
use candle_nn::Linear;

use super::conv::Conv;
use super::norm::GroupNorm;
use super::params::Params;

pub fn linear(in_dim: usize, out_dim: usize, p: &Params) -> Result<Linear> {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let w = p.uniform("weight", &[out_dim, in_dim], bound)?;
    let b = p.uniform("bias", &[out_dim], bound)?;
    Ok(Linear::new(w, Some(b)))
}

pub fn group_norm(groups: usize, channels: usize, p: &Params) -> Result<GroupNorm> {
    GroupNorm::new(groups, channels, p)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    x.relu()? - (x.neg()?.relu()? * slope)?
}

/// Nearest-neighbour 2× upsampling through broadcasting.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))
}

/// Sinusoidal features of (possibly fractional) step values, `dim` even.
pub fn sinusoidal(ts: &Tensor, dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp())
        .collect();
    let freqs = Tensor::from_vec(freqs, (1, half), ts.device())?.to_dtype(ts.dtype())?;
    let args = ts.reshape(((), 1))?.broadcast_mul(&freqs)?;
    Tensor::cat(&[args.sin()?, args.cos()?], 1)
}

#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    base: usize,
    fc1: Linear,
    fc2: Linear,
}

impl TimeEmbedding {
    pub fn new(base: usize, dim: usize, p: &Params) -> Result<Self> {
        Ok(Self {
            base,
            fc1: linear(base, dim, &p.pp("fc1"))?,
            fc2: linear(dim, dim, &p.pp("fc2"))?,
        })
    }

    pub fn forward(&self, ts: &Tensor) -> Result<Tensor> {
        let e = sinusoidal(ts, self.base)?;
        self.fc2.forward(&self.fc1.forward(&e)?.silu()?)
    }
}

/// GroupNorm, SiLU, conv twice, with the time embedding added in between.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    pub fn new(in_ch: usize, out_ch: usize, time_dim: usize, groups: usize, p: &Params) -> Result<Self> {
        Ok(Self {
            norm1: group_norm(groups, in_ch, &p.pp("norm1"))?,
            conv1: Conv::new(in_ch, out_ch, 3, 1, &p.pp("conv1"))?,
            time: linear(time_dim, out_ch, &p.pp("time"))?,
            norm2: group_norm(groups, out_ch, &p.pp("norm2"))?,
            conv2: Conv::new(out_ch, out_ch, 3, 1, &p.pp("conv2"))?,
            skip: if in_ch == out_ch {
                None
            } else {
                Some(Conv::new(in_ch, out_ch, 1, 1, &p.pp("skip"))?)
            },
        })
    }

    /// `emb` is the already activated (B, time_dim) conditioning vector.
    pub fn forward(&self, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self.time.forward(emb)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        skip + h
    }
}
