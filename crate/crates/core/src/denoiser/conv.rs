//! Im2col + GEMM 2-D convolution with its own backward pass.
//!
//! Candle's CPU backward for `conv2d` goes through a direct transposed
//! convolution that dominates training time on small images. This op keeps
//! both passes on the same im2col buffers and hands all arithmetic to `gemm`.

use candle_core::{
    backend::BackendStorage, CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Module,
    Result, Shape, Tensor,
};
use gemm::Parallelism;

use super::params::Params;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    batch: usize,
    in_ch: usize,
    in_h: usize,
    in_w: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn new(x: &[usize], w: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (&[batch, in_ch, in_h, in_w], &[out_ch, w_in, kh, kw]) = (x, w) else {
            candle_core::bail!("conv2d expects rank-4 input and kernel, got {x:?} and {w:?}");
        };
        if w_in != in_ch {
            candle_core::bail!("conv2d channel mismatch: input {in_ch}, kernel {w_in}");
        }
        if in_h + 2 * padding < kh || in_w + 2 * padding < kw {
            candle_core::bail!("conv2d kernel {kh}x{kw} larger than padded input {in_h}x{in_w}");
        }
        Ok(Self {
            batch,
            in_ch,
            in_h,
            in_w,
            out_ch,
            kh,
            kw,
            stride,
            padding,
            out_h: (in_h + 2 * padding - kh) / stride + 1,
            out_w: (in_w + 2 * padding - kw) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    fn in_len(&self) -> usize {
        self.in_ch * self.in_h * self.in_w
    }

    fn out_len(&self) -> usize {
        self.out_ch * self.col_cols()
    }

    /// Walks every (column-row, output-row) pair and the matching input row segment.
    ///
    /// The callback receives the offset of the row in the column buffer, the
    /// offset of the input row, and the (first, count) output columns with
    /// valid input.
    fn for_each_segment(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let p = self.padding as isize;
        let s = self.stride as isize;
        for c in 0..self.in_ch {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    // Valid output columns satisfy 0 <= ox*s + kx - p < in_w.
                    let lo = ((p - kx as isize).max(0) + s - 1) / s;
                    let hi = ((self.in_w as isize - 1 + p - kx as isize).div_euclid(s) + 1)
                        .clamp(0, self.out_w as isize);
                    let (lo, hi) = (lo as usize, hi as usize);
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - p;
                        if iy < 0 || iy >= self.in_h as isize || lo >= hi {
                            continue;
                        }
                        let ix0 = (lo * self.stride + kx) as isize - p;
                        let col_off = row * self.col_cols() + oy * self.out_w;
                        let in_off = (c * self.in_h + iy as usize) * self.in_w + ix0 as usize;
                        f(col_off, in_off, lo, hi - lo);
                    }
                }
            }
        }
    }
}

trait Float: Copy + Default + std::ops::AddAssign + 'static {
    const ONE: Self;
    const ZERO: Self;
}

impl Float for f32 {
    const ONE: Self = 1.0;
    const ZERO: Self = 0.0;
}

impl Float for f64 {
    const ONE: Self = 1.0;
    const ZERO: Self = 0.0;
}

fn im2col<T: Float>(g: &Geometry, x: &[T], col: &mut [T]) {
    col.fill(T::ZERO);
    let stride = g.stride;
    g.for_each_segment(|col_off, in_off, lo, n| {
        let dst = &mut col[col_off + lo..col_off + lo + n];
        if stride == 1 {
            dst.copy_from_slice(&x[in_off..in_off + n]);
        } else {
            for (i, d) in dst.iter_mut().enumerate() {
                *d = x[in_off + i * stride];
            }
        }
    });
}

fn col2im_add<T: Float>(g: &Geometry, col: &[T], x: &mut [T]) {
    let stride = g.stride;
    g.for_each_segment(|col_off, in_off, lo, n| {
        let src = &col[col_off + lo..col_off + lo + n];
        for (i, &v) in src.iter().enumerate() {
            x[in_off + i * stride] += v;
        }
    });
}

/// Row-major matrix view: (pointer, column stride, row stride).
struct View<T> {
    ptr: *const T,
    cs: isize,
    rs: isize,
}

impl<T> View<T> {
    fn rows(ptr: *const T, cols: usize) -> Self {
        Self {
            ptr,
            cs: 1,
            rs: cols as isize,
        }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    fn transposed(ptr: *const T, cols: usize) -> Self {
        Self {
            ptr,
            cs: cols as isize,
            rs: 1,
        }
    }
}

/// dst (m x n, row-major) = [dst +] lhs (m x k) * rhs (k x n).
fn matmul<T: Float>(
    dst: &mut [T],
    accumulate: bool,
    (m, n, k): (usize, usize, usize),
    lhs: View<T>,
    rhs: View<T>,
) {
    debug_assert!(dst.len() >= m * n);
    // SAFETY: every view is built from a live slice covering the full m/n/k extent
    // and dst is exclusively borrowed for the call.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            lhs.ptr,
            lhs.cs,
            lhs.rs,
            rhs.ptr,
            rhs.cs,
            rhs.rs,
            T::ONE,
            T::ONE,
            false,
            false,
            false,
            Parallelism::None,
        )
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("conv2d op requires contiguous operands"),
    }
}

fn forward<T: Float>(g: &Geometry, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut out = vec![T::ZERO; g.batch * g.out_len()];
    if let Some(bias) = bias {
        for (row, v) in out.chunks_mut(cols).zip(bias.iter().cycle()) {
            row.fill(*v);
        }
    }
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::ZERO; rows * cols] };
    for b in 0..g.batch {
        let xb = &x[b * g.in_len()..(b + 1) * g.in_len()];
        let src = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut col);
            &col
        };
        matmul(
            &mut out[b * g.out_len()..(b + 1) * g.out_len()],
            bias.is_some(),
            (g.out_ch, cols, rows),
            View::rows(w.as_ptr(), rows),
            View::rows(src.as_ptr(), cols),
        );
    }
    out
}

fn input_grad<T: Float>(g: &Geometry, grad: &[T], w: &[T]) -> Vec<T> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut gx = vec![T::ZERO; g.batch * g.in_len()];
    let mut col = vec![T::ZERO; rows * cols];
    for b in 0..g.batch {
        let gb = &grad[b * g.out_len()..(b + 1) * g.out_len()];
        let gxb = &mut gx[b * g.in_len()..(b + 1) * g.in_len()];
        let dst: &mut [T] = if g.is_pointwise() { gxb } else { &mut col };
        matmul(
            dst,
            false,
            (rows, cols, g.out_ch),
            View::transposed(w.as_ptr(), rows),
            View::rows(gb.as_ptr(), cols),
        );
        if !g.is_pointwise() {
            col2im_add(g, &col, gxb);
        }
    }
    gx
}

fn kernel_grad<T: Float>(g: &Geometry, x: &[T], grad: &[T]) -> Vec<T> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut gw = vec![T::ZERO; g.out_ch * rows];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::ZERO; rows * cols] };
    for b in 0..g.batch {
        let xb = &x[b * g.in_len()..(b + 1) * g.in_len()];
        let src = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut col);
            &col
        };
        let gb = &grad[b * g.out_len()..(b + 1) * g.out_len()];
        matmul(
            &mut gw,
            b > 0,
            (g.out_ch, rows, cols),
            View::rows(gb.as_ptr(), cols),
            View::transposed(src.as_ptr(), cols),
        );
    }
    gw
}

#[derive(Debug, Clone, Copy)]
struct ConvOp {
    stride: usize,
    padding: usize,
}

impl CustomOp2 for ConvOp {
    fn name(&self) -> &'static str {
        "gemm-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let g = Geometry::new(l1.dims(), l2.dims(), self.stride, self.padding)?;
        let shape = Shape::from((g.batch, g.out_ch, g.out_h, g.out_w));
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(w)) => {
                CpuStorage::F32(forward(&g, contiguous(x, l1)?, contiguous(w, l2)?, None))
            }
            (CpuStorage::F64(x), CpuStorage::F64(w)) => {
                CpuStorage::F64(forward(&g, contiguous(x, l1)?, contiguous(w, l2)?, None))
            }
            _ => candle_core::bail!(
                "gemm-conv2d supports f32/f64 only, got {:?}/{:?}",
                s1.dtype(),
                s2.dtype()
            ),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let (gx, gw) = self.grads(x, w, &grad.contiguous()?)?;
        Ok((Some(gx), Some(gw)))
    }
}

impl ConvOp {
    fn grads(&self, x: &Tensor, w: &Tensor, grad: &Tensor) -> Result<(Tensor, Tensor)> {
        let gx = grad.apply_op2_no_bwd(
            w,
            &InputGradOp {
                op: *self,
                input_dims: x.dims4()?,
            },
        )?;
        let gw = x.apply_op2_no_bwd(
            grad,
            &KernelGradOp {
                op: *self,
                kernel_dims: w.dims4()?,
            },
        )?;
        Ok((gx, gw))
    }
}

/// Convolution plus per-channel bias in one op.
#[derive(Debug, Clone, Copy)]
struct BiasConvOp(ConvOp);

impl CustomOp3 for BiasConvOp {
    fn name(&self) -> &'static str {
        "gemm-conv2d-bias"
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
        let g = Geometry::new(l1.dims(), l2.dims(), self.0.stride, self.0.padding)?;
        if l3.dims() != [g.out_ch] {
            candle_core::bail!("conv2d bias shape {:?} for {} channels", l3.dims(), g.out_ch);
        }
        let shape = Shape::from((g.batch, g.out_ch, g.out_h, g.out_w));
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(w), CpuStorage::F32(b)) => CpuStorage::F32(forward(
                &g,
                contiguous(x, l1)?,
                contiguous(w, l2)?,
                Some(contiguous(b, l3)?),
            )),
            (CpuStorage::F64(x), CpuStorage::F64(w), CpuStorage::F64(b)) => CpuStorage::F64(forward(
                &g,
                contiguous(x, l1)?,
                contiguous(w, l2)?,
                Some(contiguous(b, l3)?),
            )),
            _ => candle_core::bail!("gemm-conv2d supports f32/f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let (gx, gw) = self.0.grads(x, w, &grad)?;
        let gb = grad.apply_op1_no_bwd(&ChannelSum)?;
        Ok((Some(gx), Some(gw), Some(gb)))
    }
}

/// Sum of a (B, C, H, W) tensor over everything but the channel axis.
pub(crate) struct ChannelSum;

pub(crate) fn channel_sum<T: Copy + Default + std::ops::AddAssign>(
    x: &[T],
    (b, c, hw): (usize, usize, usize),
) -> Vec<T> {
    let mut out = vec![T::default(); c];
    for (i, chunk) in x.chunks(hw).enumerate().take(b * c) {
        let mut s = T::default();
        for &v in chunk {
            s += v;
        }
        out[i % c] += s;
    }
    out
}

impl CustomOp1 for ChannelSum {
    fn name(&self) -> &'static str {
        "channel-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        let out = match s {
            CpuStorage::F32(x) => CpuStorage::F32(channel_sum(contiguous(x, l)?, (b, c, h * w))),
            CpuStorage::F64(x) => CpuStorage::F64(channel_sum(contiguous(x, l)?, (b, c, h * w))),
            _ => candle_core::bail!("channel-sum supports f32/f64 only"),
        };
        Ok((out, Shape::from(c)))
    }
}

struct InputGradOp {
    op: ConvOp,
    input_dims: (usize, usize, usize, usize),
}

impl CustomOp2 for InputGradOp {
    fn name(&self) -> &'static str {
        "gemm-conv2d-input-grad"
    }

    fn cpu_fwd(
        &self,
        grad: &CpuStorage,
        lg: &Layout,
        w: &CpuStorage,
        lw: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let (b, c, h, wd) = self.input_dims;
        let g = Geometry::new(&[b, c, h, wd], lw.dims(), self.op.stride, self.op.padding)?;
        let out = match (grad, w) {
            (CpuStorage::F32(gr), CpuStorage::F32(w)) => {
                CpuStorage::F32(input_grad(&g, contiguous(gr, lg)?, contiguous(w, lw)?))
            }
            (CpuStorage::F64(gr), CpuStorage::F64(w)) => {
                CpuStorage::F64(input_grad(&g, contiguous(gr, lg)?, contiguous(w, lw)?))
            }
            _ => candle_core::bail!("gemm-conv2d supports f32/f64 only"),
        };
        Ok((out, Shape::from(self.input_dims)))
    }
}

struct KernelGradOp {
    op: ConvOp,
    kernel_dims: (usize, usize, usize, usize),
}

impl CustomOp2 for KernelGradOp {
    fn name(&self) -> &'static str {
        "gemm-conv2d-kernel-grad"
    }

    fn cpu_fwd(
        &self,
        x: &CpuStorage,
        lx: &Layout,
        grad: &CpuStorage,
        lg: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let (o, c, kh, kw) = self.kernel_dims;
        let g = Geometry::new(lx.dims(), &[o, c, kh, kw], self.op.stride, self.op.padding)?;
        let out = match (x, grad) {
            (CpuStorage::F32(x), CpuStorage::F32(gr)) => {
                CpuStorage::F32(kernel_grad(&g, contiguous(x, lx)?, contiguous(gr, lg)?))
            }
            (CpuStorage::F64(x), CpuStorage::F64(gr)) => {
                CpuStorage::F64(kernel_grad(&g, contiguous(x, lx)?, contiguous(gr, lg)?))
            }
            _ => candle_core::bail!("gemm-conv2d supports f32/f64 only"),
        };
        Ok((out, Shape::from(self.kernel_dims)))
    }
}

/// Cross-correlation of `x` (B, C, H, W) with `kernel` (O, C, kh, kw).
pub fn conv2d(x: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    if stride == 0 {
        candle_core::bail!("conv2d stride must be positive");
    }
    x.contiguous()?
        .apply_op2(&kernel.contiguous()?, ConvOp { stride, padding })
}

/// [`conv2d`] followed by adding `bias` (O) to every output channel.
pub fn conv2d_bias(
    x: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    if stride == 0 {
        candle_core::bail!("conv2d stride must be positive");
    }
    x.contiguous()?.apply_op3(
        &kernel.contiguous()?,
        &bias.contiguous()?,
        BiasConvOp(ConvOp { stride, padding }),
    )
}

/// Convolution layer backed by [`conv2d_bias`].
#[derive(Debug, Clone)]
pub struct Conv {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv {
    /// Square kernel with "same" padding for odd sizes at stride 1.
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        p: &Params,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        let weight = p.uniform("weight", &[out_ch, in_ch, kernel, kernel], bound)?;
        let bias = p.uniform("bias", &[out_ch], bound)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(0).unwrap_or(0)
    }
}

impl Module for Conv {
    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        conv2d_bias(xs, &self.weight, &self.bias, self.stride, self.padding)
    }
}

/// Checks that the dtype is one the op supports.
pub fn supported(dtype: DType) -> bool {
    matches!(dtype, DType::F32 | DType::F64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn naive(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Vec<f64> {
        let (b, c, h, wd) = x.dims4().unwrap();
        let (o, _, kh, kw) = w.dims4().unwrap();
        let xs: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
        let ws: Vec<f64> = w.flatten_all().unwrap().to_vec1().unwrap();
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (wd + 2 * padding - kw) / stride + 1;
        let mut out = vec![0.0; b * o * oh * ow];
        for bi in 0..b {
            for oi in 0..o {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut s = 0.0;
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (y * stride + ky) as isize - padding as isize;
                                    let ix = (xx * stride + kx) as isize - padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    s += xs[((bi * c + ci) * h + iy as usize) * wd + ix as usize]
                                        * ws[((oi * c + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((bi * o + oi) * oh + y) * ow + xx] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_direct_loop() {
        let dev = Device::Cpu;
        for &(stride, k, h, w) in &[(1, 3, 5, 4), (2, 3, 8, 8), (2, 3, 7, 5), (1, 1, 4, 3), (1, 3, 1, 1)] {
            let x = Tensor::randn(0f64, 1.0, (2, 3, h, w), &dev).unwrap();
            let kern = Tensor::randn(0f64, 1.0, (4, 3, k, k), &dev).unwrap();
            let y = conv2d(&x, &kern, stride, k / 2).unwrap();
            let got: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
            let want = naive(&x, &kern, stride, k / 2);
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "stride {stride} k {k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_matches_candle_conv() {
        let dev = Device::Cpu;
        for &stride in &[1usize, 2] {
            let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 3, 6, 6), &dev).unwrap()).unwrap();
            let k = Var::from_tensor(&Tensor::randn(0f64, 1.0, (5, 3, 3, 3), &dev).unwrap()).unwrap();
            let probe = Tensor::randn(0f64, 1.0, (2, 5, 6 / stride, 6 / stride), &dev).unwrap();

            let ours = conv2d(&x, &k, stride, 1).unwrap();
            let g1 = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let reference = x.conv2d(&k, 1, stride, 1, 1).unwrap();
            let g2 = (reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();

            for v in [&x, &k] {
                let a: Vec<f64> = g1.get(v).unwrap().flatten_all().unwrap().to_vec1().unwrap();
                let b: Vec<f64> = g2.get(v).unwrap().flatten_all().unwrap().to_vec1().unwrap();
                for (a, b) in a.iter().zip(&b) {
                    assert!((a - b).abs() < 1e-10, "stride {stride}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn fused_bias_matches_broadcast_add() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 3, 5, 4), &dev).unwrap()).unwrap();
        let k = Var::from_tensor(&Tensor::randn(0f64, 1.0, (4, 3, 3, 3), &dev).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::randn(0f64, 1.0, 4, &dev).unwrap()).unwrap();
        let probe = Tensor::randn(0f64, 1.0, (2, 4, 5, 4), &dev).unwrap();
        let fused = conv2d_bias(&x, &k, &b, 1, 1).unwrap();
        let plain = conv2d(&x, &k, 1, 1)
            .unwrap()
            .broadcast_add(&b.reshape((1, 4, 1, 1)).unwrap())
            .unwrap();
        let g1 = (fused * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (plain * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &k, &b] {
            let a: Vec<f64> = g1.get(v).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let c: Vec<f64> = g2.get(v).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            for (a, c) in a.iter().zip(&c) {
                assert!((a - c).abs() < 1e-10, "{a} vs {c}");
            }
        }
    }

    #[test]
    fn pointwise_path_matches() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1.0, (3, 4, 2, 5), &dev).unwrap();
        let k = Tensor::randn(0f64, 1.0, (2, 4, 1, 1), &dev).unwrap();
        let got: Vec<f64> = conv2d(&x, &k, 1, 0).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let want = naive(&x, &k, 1, 0);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
