//! The joint denoising network.

pub mod conv;
pub mod layers;
pub mod norm;
pub mod params;
pub mod points;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::Linear;
use serde::{Deserialize, Serialize};

use crate::conditioning::{PointMap, TextCondition};
use crate::diffusion::NoisyState;
use crate::error::{Error, Result};
use conv::Conv;
use layers::{group_norm, linear, upsample2, ResBlock, TimeEmbedding};
use norm::GroupNorm;
pub use params::Params;
pub use points::{PointEncoder, PointEncoderConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Label classes including background.
    pub num_classes: usize,
    pub base_width: usize,
    pub width_mults: Vec<usize>,
    pub groups: usize,
    pub time_dim: usize,
    pub text_dim: usize,
    pub points: PointEncoderConfig,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            base_width: 32,
            width_mults: vec![1, 2, 2],
            groups: 8,
            time_dim: 128,
            text_dim: crate::conditioning::DEFAULT_EMBED_DIM,
            points: PointEncoderConfig::default(),
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::arg(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.num_classes > 256 {
            return bad(format!("num_classes {} exceeds 256", self.num_classes));
        }
        if self.width_mults.is_empty() || self.width_mults.contains(&0) {
            return bad("width_mults must be nonempty and positive".into());
        }
        if self.base_width == 0 || self.groups == 0 || self.time_dim == 0 || self.text_dim == 0 {
            return bad("widths and group count must be positive".into());
        }
        for w in self.widths() {
            if w % self.groups != 0 {
                return bad(format!("groups {} does not divide width {w}", self.groups));
            }
        }
        if self.base_width % 2 != 0 {
            return bad("base_width must be even".into());
        }
        let p = &self.points;
        if p.features == 0 || p.growth == 0 {
            return bad("point encoder widths must be positive".into());
        }
        Ok(())
    }

    pub fn widths(&self) -> Vec<usize> {
        self.width_mults.iter().map(|m| m * self.base_width).collect()
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.width_mults.len() - 1)
    }

    /// Field-by-field differences against another configuration.
    pub fn diff(&self, other: &Self) -> Vec<String> {
        let a = serde_json::to_value(self).unwrap_or_default();
        let b = serde_json::to_value(other).unwrap_or_default();
        let mut out = Vec::new();
        diff_values("", &a, &b, &mut out);
        out
    }
}

pub(crate) fn diff_values(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let keys: std::collections::BTreeSet<_> = x.keys().chain(y.keys()).collect();
            for k in keys {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                diff_values(&p, x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null), out);
            }
        }
        _ if a != b => out.push(format!("{path}: {a} != {b}")),
        _ => {}
    }
}

/// Predictions of the three heads, all (B, C, H, W).
#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    pub eps_image: Tensor,
    pub eps_distance: Tensor,
    pub label_logits: Tensor,
}

/// Batched network input. `label` holds class probabilities (B, K, H, W),
/// `text` is (B, text_dim) and `text_mask` (B, 1) is 1 where text is present.
#[derive(Debug, Clone)]
pub struct DenoiserInput<'a> {
    pub image: &'a Tensor,
    pub distance: &'a Tensor,
    pub label: &'a Tensor,
    pub steps: &'a [usize],
    pub point_features: &'a Tensor,
    pub text: &'a Tensor,
    pub text_mask: &'a Tensor,
}

#[derive(Debug, Clone)]
struct Level {
    block: ResBlock,
    down: Option<Conv>,
}

#[derive(Debug, Clone)]
struct UpLevel {
    block: ResBlock,
    up: Option<Conv>,
}

#[derive(Debug, Clone)]
pub struct JointDenoiser {
    config: DenoiserConfig,
    params: Params,
    time: TimeEmbedding,
    text_proj: Linear,
    null_text: Tensor,
    points: PointEncoder,
    conv_in: Conv,
    down: Vec<Level>,
    mid: ResBlock,
    up: Vec<UpLevel>,
    norm_out: GroupNorm,
    head_image: Conv,
    head_distance: Conv,
    head_label: Conv,
}

impl JointDenoiser {
    pub fn new(config: DenoiserConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        if !conv::supported(dtype) {
            return Err(Error::arg(format!("unsupported dtype {dtype:?}")));
        }
        let p = Params::new(seed, dtype, device);
        let c = &config;
        let widths = c.widths();
        let g = c.groups;
        let td = c.time_dim;
        let points = PointEncoder::new(c.num_classes - 1, &c.points, &p.pp("points"))?;
        let in_ch = 3 + 1 + c.num_classes + points.out_channels();
        let conv_in = Conv::new(in_ch, widths[0], 3, 1, &p.pp("conv_in"))?;

        let mut down = Vec::new();
        let mut ch = widths[0];
        for (i, &w) in widths.iter().enumerate() {
            let lp = p.pp(format!("down{i}"));
            let block = ResBlock::new(ch, w, td, g, &lp.pp("block"))?;
            let last = i + 1 == widths.len();
            let down_conv = if last { None } else { Some(Conv::new(w, w, 3, 2, &lp.pp("down"))?) };
            down.push(Level { block, down: down_conv });
            ch = w;
        }
        let mid = ResBlock::new(ch, ch, td, g, &p.pp("mid"))?;
        let mut up = Vec::new();
        for (i, &w) in widths.iter().enumerate().rev() {
            let lp = p.pp(format!("up{i}"));
            let block = ResBlock::new(ch + w, w, td, g, &lp.pp("block"))?;
            let up_conv = if i == 0 { None } else { Some(Conv::new(w, widths[i - 1], 3, 1, &lp.pp("up"))?) };
            up.push(UpLevel { block, up: up_conv });
            ch = if i == 0 { w } else { widths[i - 1] };
        }
        Ok(Self {
            time: TimeEmbedding::new(c.base_width, td, &p.pp("time"))?,
            text_proj: linear(c.text_dim, td, &p.pp("text_proj"))?,
            null_text: p.uniform("null_text", &[c.text_dim], 1.0 / (c.text_dim as f64).sqrt())?,
            points,
            conv_in,
            down,
            mid,
            up,
            norm_out: group_norm(g, widths[0], &p.pp("norm_out"))?,
            head_image: Conv::new(widths[0], 3, 3, 1, &p.pp("head_image"))?,
            head_distance: Conv::new(widths[0], 1, 3, 1, &p.pp("head_distance"))?,
            head_label: Conv::new(widths[0], c.num_classes, 3, 1, &p.pp("head_label"))?,
            config,
            params: p,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> Device {
        self.params.device()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn check_size(&self, h: usize, w: usize) -> Result<()> {
        let m = self.config.size_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::arg(format!(
                "spatial size {h}x{w} must be a positive multiple of {m}"
            )));
        }
        Ok(())
    }

    /// Point-encoder features for a batch of point maps; constant along a sampling trajectory.
    pub fn encode_points(&self, maps: &[&PointMap]) -> Result<Tensor> {
        self.points.encode(maps, self.dtype(), &self.device())
    }

    /// (B, text_dim) tensor of text embeddings.
    pub fn text_tensor(&self, texts: &[&TextCondition]) -> Result<Tensor> {
        let d = self.config.text_dim;
        let mut data = Vec::with_capacity(texts.len() * d);
        for t in texts {
            if t.embedding.len() != d {
                return Err(Error::arg(format!(
                    "text embedding has dimension {}, model expects {d}",
                    t.embedding.len()
                )));
            }
            data.extend_from_slice(&t.embedding);
        }
        Ok(Tensor::from_vec(data, (texts.len(), d), &self.device())?.to_dtype(self.dtype())?)
    }

    pub fn text_mask(&self, present: &[bool]) -> Result<Tensor> {
        let v: Vec<f32> = present.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect();
        Ok(Tensor::from_vec(v, (present.len(), 1), &self.device())?.to_dtype(self.dtype())?)
    }

    pub fn forward(&self, inp: &DenoiserInput) -> Result<DenoiserOutput> {
        let (b, ci, h, w) = inp.image.dims4()?;
        let k = self.config.num_classes;
        if ci != 3 {
            return Err(Error::arg(format!("image must have 3 channels, got {ci}")));
        }
        self.check_size(h, w)?;
        let expect = |t: &Tensor, c: usize, what: &str| -> Result<()> {
            if t.dims() != [b, c, h, w] {
                return Err(Error::arg(format!(
                    "{what} has shape {:?}, expected {:?}",
                    t.dims(),
                    [b, c, h, w]
                )));
            }
            Ok(())
        };
        expect(inp.distance, 1, "distance")?;
        expect(inp.label, k, "label")?;
        expect(inp.point_features, self.points.out_channels(), "point features")?;
        if inp.steps.len() != b {
            return Err(Error::arg(format!("{} steps for batch of {b}", inp.steps.len())));
        }
        if inp.text.dims() != [b, self.config.text_dim] || inp.text_mask.dims() != [b, 1] {
            return Err(Error::arg(format!(
                "text {:?} / mask {:?} do not match batch {b} and dimension {}",
                inp.text.dims(),
                inp.text_mask.dims(),
                self.config.text_dim
            )));
        }

        let dev = self.device();
        let steps: Vec<f32> = inp.steps.iter().map(|&t| t as f32).collect();
        let steps = Tensor::from_vec(steps, b, &dev)?.to_dtype(self.dtype())?;
        let null = self.null_text.unsqueeze(0)?;
        let keep = inp.text_mask;
        let text = (inp.text.broadcast_mul(keep)? + null.broadcast_mul(&(1.0 - keep)?)?)?;
        let emb = (self.time.forward(&steps)? + self.text_proj.forward(&text)?)?.silu()?;

        let x = Tensor::cat(&[inp.image, inp.distance, inp.label, inp.point_features], 1)?;
        let mut hcur = self.conv_in.forward(&x)?;
        let mut skips = Vec::new();
        for lvl in &self.down {
            hcur = lvl.block.forward(&hcur, &emb)?;
            skips.push(hcur.clone());
            if let Some(d) = &lvl.down {
                hcur = d.forward(&hcur)?;
            }
        }
        hcur = self.mid.forward(&hcur, &emb)?;
        for lvl in &self.up {
            let s = skips.pop().expect("one skip per level");
            hcur = lvl.block.forward(&Tensor::cat(&[&hcur, &s], 1)?, &emb)?;
            if let Some(u) = &lvl.up {
                hcur = u.forward(&upsample2(&hcur)?)?;
            }
        }
        let hcur = self.norm_out.forward(&hcur)?.silu()?;
        Ok(DenoiserOutput {
            eps_image: self.head_image.forward(&hcur)?,
            eps_distance: self.head_distance.forward(&hcur)?,
            label_logits: self.head_label.forward(&hcur)?,
        })
    }

    /// Single-sample prediction for a noisy state; heads are (1, C, H, W).
    pub fn denoise(
        &self,
        state: &NoisyState,
        pc: &PointMap,
        tc: &TextCondition,
        text_present: bool,
    ) -> Result<DenoiserOutput> {
        let (_, _, h, w) = state.image.dims4()?;
        if pc.shape() != (h, w) {
            return Err(Error::arg(format!(
                "point map {:?} does not match state {h}x{w}",
                pc.shape()
            )));
        }
        let pf = self.encode_points(&[pc])?;
        let text = self.text_tensor(&[tc])?;
        let mask = self.text_mask(&[text_present])?;
        let out = self.forward(&DenoiserInput {
            image: &state.image,
            distance: &state.distance,
            label: &state.label,
            steps: &[state.t],
            point_features: &pf,
            text: &text,
            text_mask: &mask,
        })?;
        check_finite(&out, state.t)?;
        Ok(out)
    }
}

/// Numeric error naming the step when any head is non-finite.
pub fn check_finite(out: &DenoiserOutput, step: usize) -> Result<()> {
    for (name, t) in [
        ("image", &out.eps_image),
        ("distance", &out.eps_distance),
        ("label", &out.label_logits),
    ] {
        let s = t.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !s.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite {name} prediction at step {step}"
            )));
        }
    }
    Ok(())
}
