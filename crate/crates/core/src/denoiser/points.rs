//! Residual-in-residual dense block encoder for point maps.

use candle_core::{Device, DType, Module, Result, Tensor};
use serde::{Deserialize, Serialize};

use super::conv::Conv;
use super::layers::leaky_relu;
use super::params::Params;
use crate::conditioning::PointMap;

const SLOPE: f64 = 0.2;
const RES_SCALE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointEncoderConfig {
    pub features: usize,
    pub growth: usize,
    pub blocks: usize,
    /// Dense blocks inside each residual-in-residual block.
    pub dense_blocks: usize,
    /// Growth convolutions per dense block (a fuse convolution follows them).
    pub dense_layers: usize,
}

impl Default for PointEncoderConfig {
    fn default() -> Self {
        Self {
            features: 16,
            growth: 16,
            blocks: 2,
            dense_blocks: 1,
            dense_layers: 2,
        }
    }
}

#[derive(Debug, Clone)]
struct DenseBlock {
    growth: Vec<Conv>,
    fuse: Conv,
}

impl DenseBlock {
    fn new(c: &PointEncoderConfig, p: &Params) -> Result<Self> {
        let growth = (0..c.dense_layers)
            .map(|i| Conv::new(c.features + i * c.growth, c.growth, 3, 1, &p.pp(format!("conv{i}"))))
            .collect::<Result<Vec<_>>>()?;
        let fuse = Conv::new(c.features + c.dense_layers * c.growth, c.features, 3, 1, &p.pp("fuse"))?;
        Ok(Self { growth, fuse })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut feats = vec![x.clone()];
        for conv in &self.growth {
            let inp = Tensor::cat(&feats, 1)?;
            feats.push(leaky_relu(&conv.forward(&inp)?, SLOPE)?);
        }
        let out = self.fuse.forward(&Tensor::cat(&feats, 1)?)?;
        (out * RES_SCALE)? + x
    }
}

#[derive(Debug, Clone)]
struct Rrdb {
    dense: Vec<DenseBlock>,
}

impl Rrdb {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for d in &self.dense {
            h = d.forward(&h)?;
        }
        (h * RES_SCALE)? + x
    }
}

/// Maps a one-hot point map (no-marker channel plus one per class) to a
/// feature map of the same resolution.
#[derive(Debug, Clone)]
pub struct PointEncoder {
    num_fg_classes: usize,
    first: Conv,
    blocks: Vec<Rrdb>,
    trunk: Conv,
}

impl PointEncoder {
    pub fn new(num_fg_classes: usize, c: &PointEncoderConfig, p: &Params) -> Result<Self> {
        let blocks = (0..c.blocks)
            .map(|b| {
                let bp = p.pp(format!("rrdb{b}"));
                let dense = (0..c.dense_blocks)
                    .map(|d| DenseBlock::new(c, &bp.pp(format!("dense{d}"))))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Rrdb { dense })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            num_fg_classes,
            first: Conv::new(num_fg_classes + 1, c.features, 3, 1, &p.pp("first"))?,
            blocks,
            trunk: Conv::new(c.features, c.features, 3, 1, &p.pp("trunk"))?,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.trunk.out_channels()
    }

    /// One-hot encoding (B, K_fg + 1, H, W) of a batch of equally sized point maps.
    pub fn one_hot(&self, maps: &[&PointMap], dtype: DType, device: &Device) -> crate::Result<Tensor> {
        let Some(first) = maps.first() else {
            return Err(crate::Error::arg("empty point-map batch"));
        };
        let (h, w) = first.shape();
        let c = self.num_fg_classes + 1;
        let mut data = vec![0f32; maps.len() * c * h * w];
        for (b, m) in maps.iter().enumerate() {
            if m.shape() != (h, w) {
                return Err(crate::Error::arg(format!(
                    "point maps differ in shape: {:?} vs {:?}",
                    m.shape(),
                    (h, w)
                )));
            }
            for ((y, x), &k) in m.grid().indexed_iter() {
                if k as usize > self.num_fg_classes {
                    return Err(crate::Error::arg(format!(
                        "point class {k} at ({y}, {x}) outside 0..={}",
                        self.num_fg_classes
                    )));
                }
                data[((b * c + k as usize) * h + y) * w + x] = 1.0;
            }
        }
        Ok(Tensor::from_vec(data, (maps.len(), c, h, w), device)?.to_dtype(dtype)?)
    }

    pub fn forward(&self, one_hot: &Tensor) -> Result<Tensor> {
        let fea = self.first.forward(one_hot)?;
        let mut h = fea.clone();
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        fea + self.trunk.forward(&h)?
    }

    pub fn encode(&self, maps: &[&PointMap], dtype: DType, device: &Device) -> crate::Result<Tensor> {
        let x = self.one_hot(maps, dtype, device)?;
        Ok(self.forward(&x)?)
    }
}
