//! Group normalization with a hand-written backward pass.
//!
//! The generic graph version reduces over non-trailing axes, which is slow on
//! the CPU backend; this op walks each (sample, group) block directly.

use candle_core::{
    backend::BackendStorage, CpuStorage, CustomOp3, Layout, Module, Result, Shape, Tensor,
};

use super::conv::channel_sum;
use super::params::Params;

trait Float: num_traits::Float + Default + std::ops::AddAssign + 'static {}
impl Float for f32 {}
impl Float for f64 {}

#[derive(Debug, Clone, Copy)]
struct Dims {
    batch: usize,
    channels: usize,
    hw: usize,
    groups: usize,
}

impl Dims {
    fn new(l: &Layout, groups: usize) -> Result<Self> {
        let d = l.dims();
        if d.len() < 2 {
            candle_core::bail!("group norm expects (B, C, ...), got {d:?}");
        }
        let (batch, channels) = (d[0], d[1]);
        if groups == 0 || channels % groups != 0 {
            candle_core::bail!("{channels} channels not divisible into {groups} groups");
        }
        Ok(Self {
            batch,
            channels,
            hw: d[2..].iter().product(),
            groups,
        })
    }

    fn block(&self) -> usize {
        self.channels / self.groups * self.hw
    }
}

fn slice<'a, T>(data: &'a [T], l: &Layout) -> Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("group norm requires contiguous operands"),
    }
}

/// Per-block mean and inverse standard deviation.
fn stats<T: Float>(d: &Dims, x: &[T], eps: T) -> Vec<(T, T)> {
    let n = T::from(d.block()).unwrap_or(T::one());
    x.chunks(d.block())
        .map(|blk| {
            let mean = blk.iter().fold(T::zero(), |a, &v| a + v) / n;
            let var = blk.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
            (mean, (var + eps).sqrt().recip())
        })
        .collect()
}

fn forward<T: Float>(d: &Dims, x: &[T], gamma: &[T], beta: &[T], eps: T) -> Vec<T> {
    let st = stats(d, x, eps);
    let mut out = vec![T::zero(); x.len()];
    for (i, (o, xs)) in out.chunks_mut(d.hw).zip(x.chunks(d.hw)).enumerate() {
        let c = i % d.channels;
        let (mean, inv) = st[i / (d.channels / d.groups)];
        let (scale, shift) = (gamma[c] * inv, beta[c] - gamma[c] * inv * mean);
        for (o, &v) in o.iter_mut().zip(xs) {
            *o = v * scale + shift;
        }
    }
    out
}

/// Returns (dx, dgamma, dbeta).
fn backward<T: Float>(
    d: &Dims,
    x: &[T],
    gamma: &[T],
    dy: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let st = stats(d, x, eps);
    let per_group = d.channels / d.groups;
    let n = T::from(d.block()).unwrap_or(T::one());
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); d.channels];
    for (bg, (mean, inv)) in st.iter().copied().enumerate() {
        let base = bg * d.block();
        // Sums of dxhat and dxhat * xhat over the block.
        let (mut s1, mut s2) = (T::zero(), T::zero());
        for j in 0..per_group {
            let c = (bg % d.groups) * per_group + j;
            let off = base + j * d.hw;
            let mut gsum = T::zero();
            for k in off..off + d.hw {
                let xhat = (x[k] - mean) * inv;
                let g = dy[k] * gamma[c];
                s1 += g;
                s2 += g * xhat;
                gsum += dy[k] * xhat;
            }
            dgamma[c] += gsum;
        }
        let (m1, m2) = (s1 / n, s2 / n);
        for j in 0..per_group {
            let c = (bg % d.groups) * per_group + j;
            let off = base + j * d.hw;
            for k in off..off + d.hw {
                let xhat = (x[k] - mean) * inv;
                dx[k] = inv * (dy[k] * gamma[c] - m1 - xhat * m2);
            }
        }
    }
    let dbeta = channel_sum(dy, (d.batch, d.channels, d.hw));
    (dx, dgamma, dbeta)
}

#[derive(Debug, Clone, Copy)]
struct GroupNormOp {
    groups: usize,
    eps: f64,
}

impl CustomOp3 for GroupNormOp {
    fn name(&self) -> &'static str {
        "group-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let d = Dims::new(l1, self.groups)?;
        if l2.dims() != [d.channels] || l3.dims() != [d.channels] {
            candle_core::bail!("group norm affine parameters must have {} entries", d.channels);
        }
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(b)) => CpuStorage::F32(forward(
                &d,
                slice(x, l1)?,
                slice(g, l2)?,
                slice(b, l3)?,
                self.eps as f32,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(b)) => CpuStorage::F64(forward(
                &d,
                slice(x, l1)?,
                slice(g, l2)?,
                slice(b, l3)?,
                self.eps,
            )),
            _ => candle_core::bail!("group norm supports f32/f64 only, got {:?}", s1.dtype()),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let d = Dims::new(x.layout(), self.groups)?;
        let dev = x.device();
        let (xs, _) = x.storage_and_layout();
        let (gs, _) = gamma.storage_and_layout();
        let (dys, _) = grad.storage_and_layout();
        macro_rules! run {
            ($v:ident, $t:ty) => {{
                let (
                    candle_core::Storage::Cpu(CpuStorage::$v(xv)),
                    candle_core::Storage::Cpu(CpuStorage::$v(gv)),
                    candle_core::Storage::Cpu(CpuStorage::$v(dyv)),
                ) = (&*xs, &*gs, &*dys)
                else {
                    candle_core::bail!("group norm backward: mixed or non-cpu storage");
                };
                let (dx, dg, db) = backward::<$t>(
                    &d,
                    slice(xv, x.layout())?,
                    slice(gv, gamma.layout())?,
                    slice(dyv, grad.layout())?,
                    self.eps as $t,
                );
                (
                    Tensor::from_vec(dx, x.shape(), dev)?,
                    Tensor::from_vec(dg, d.channels, dev)?,
                    Tensor::from_vec(db, d.channels, dev)?,
                )
            }};
        }
        let (dx, dg, db) = match x.dtype() {
            candle_core::DType::F32 => run!(F32, f32),
            candle_core::DType::F64 => run!(F64, f64),
            dt => candle_core::bail!("group norm supports f32/f64 only, got {dt:?}"),
        };
        Ok((Some(dx), Some(dg), Some(db)))
    }
}

/// Affine group normalization over (B, C, ...) inputs.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    /// Unit scale and zero shift; `groups` is capped at `channels`.
    pub fn new(groups: usize, channels: usize, p: &Params) -> Result<Self> {
        let groups = groups.min(channels);
        if groups == 0 || channels % groups != 0 {
            candle_core::bail!("{channels} channels not divisible into {groups} groups");
        }
        Ok(Self {
            weight: p.constant("weight", &[channels], 1.0)?,
            bias: p.constant("bias", &[channels], 0.0)?,
            groups,
            eps: 1e-5,
        })
    }
}

impl Module for GroupNorm {
    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        xs.contiguous()?.apply_op3(
            &self.weight,
            &self.bias,
            GroupNormOp {
                groups: self.groups,
                eps: self.eps,
            },
        )
    }
}
