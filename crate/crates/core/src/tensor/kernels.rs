//! Forward and backward kernels on raw tensors, with no tape involvement.
//!
//! Convolution is im2col + GEMM per sample. Samples run in parallel; weight
//! gradients are reduced in sample order so results do not depend on the
//! thread count.

use rayon::prelude::*;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kw) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

pub fn conv_geom<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGeom> {
    let (_, cin, h, w) = input.dims4()?;
    let (cout, kcin, kh, kw) = kernel.dims4()?;
    if stride == 0 {
        return Err(Error::Contract("conv stride must be positive".into()));
    }
    if kcin != cin {
        return Err(Error::dim(format!(
            "conv input has {cin} channels, kernel expects {kcin}"
        )));
    }
    if bias.shape() != [cout] {
        return Err(Error::dim(format!(
            "conv bias shape {:?}, expected [{cout}]",
            bias.shape()
        )));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::dim(format!(
            "kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    Ok(ConvGeom {
        in_channels: cin,
        height: h,
        width: w,
        out_channels: cout,
        kh,
        kw,
        stride,
        padding,
    })
}

/// Output rows `[oy0, oy1)` of the im2col matrix, laid out `K x n` with
/// `n = (oy1 - oy0) * out_width`.
fn im2col<T: Real>(g: &ConvGeom, input: &[T], oy0: usize, oy1: usize, cols: &mut [T]) {
    let ow = g.out_width();
    let n = (oy1 - oy0) * ow;
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let src = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let line = &mut dst[(oy - oy0) * ow..(oy - oy0 + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    if g.stride == 1 {
                        let (lo, hi, from) = unit_stride_span(g, kj, ow);
                        line[..lo].fill(T::zero());
                        line[lo..hi].copy_from_slice(&src_row[from..from + hi - lo]);
                        line[hi..].fill(T::zero());
                        continue;
                    }
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        *out = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// For stride 1 and kernel column `kj`: output columns `[lo, hi)` read
/// inputs starting at column `from`; the rest fall into the padding.
fn unit_stride_span(g: &ConvGeom, kj: usize, ow: usize) -> (usize, usize, usize) {
    let lo = g.padding.saturating_sub(kj).min(ow);
    let hi = (g.width + g.padding).saturating_sub(kj).min(ow);
    if hi <= lo {
        return (lo, lo, 0);
    }
    (lo, hi, lo + kj - g.padding)
}

/// Adjoint of [`im2col`] for the same row range; accumulates into `out`.
fn col2im<T: Real>(g: &ConvGeom, cols: &[T], oy0: usize, oy1: usize, out: &mut [T]) {
    let ow = g.out_width();
    let n = (oy1 - oy0) * ow;
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let dst = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let line = &src[(oy - oy0) * ow..(oy - oy0 + 1) * ow];
                    if g.stride == 1 {
                        let (lo, hi, from) = unit_stride_span(g, kj, ow);
                        add_into(&mut dst_row[from..from + hi - lo], &line[lo..hi]);
                        continue;
                    }
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Target size in elements of one im2col tile; keeps tiles cache resident.
const TILE_ELEMS: usize = 1 << 16;

/// Output-row ranges whose im2col tiles stay near [`TILE_ELEMS`].
fn row_tiles(g: &ConvGeom) -> impl Iterator<Item = (usize, usize)> {
    let oh = g.out_height();
    let rows = (TILE_ELEMS / (g.patch_len() * g.out_width()).max(1)).clamp(1, oh);
    (0..oh).step_by(rows).map(move |y| (y, (y + rows).min(oh)))
}

pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = conv_geom(input, kernel, bias, stride, padding)?;
    let batch = input.shape()[0];
    let in_len = g.in_channels * g.height * g.width;
    let plane = g.out_plane();
    let ow = g.out_width();
    let k = g.patch_len();
    let mut out = vec![T::zero(); batch * g.out_channels * plane];
    out.par_chunks_mut(g.out_channels * plane)
        .enumerate()
        .for_each(|(b, dst)| {
            let src = &input.data()[b * in_len..(b + 1) * in_len];
            for (co, row) in dst.chunks_mut(plane).enumerate() {
                row.fill(bias.data()[co]);
            }
            if g.is_pointwise() {
                T::gemm(
                    g.out_channels,
                    k,
                    plane,
                    T::one(),
                    kernel.data(),
                    (k as isize, 1),
                    src,
                    (plane as isize, 1),
                    T::one(),
                    dst,
                    (plane as isize, 1),
                );
                return;
            }
            let mut cols = Vec::new();
            for (y0, y1) in row_tiles(&g) {
                let n = (y1 - y0) * ow;
                cols.resize(k * n, T::zero());
                im2col(&g, src, y0, y1, &mut cols);
                T::gemm(
                    g.out_channels,
                    k,
                    n,
                    T::one(),
                    kernel.data(),
                    (k as isize, 1),
                    &cols,
                    (n as isize, 1),
                    T::one(),
                    &mut dst[y0 * ow..],
                    (plane as isize, 1),
                );
            }
        });
    Tensor::new(&[batch, g.out_channels, g.out_height(), ow], out)
}

/// Gradients of a convolution; the input gradient is skipped when not needed.
pub struct ConvGrads<T: Real> {
    pub input: Option<Vec<T>>,
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
}

/// Kernel, bias and optional input gradient of one batch sample.
type SampleGrads<T> = (Vec<T>, Vec<T>, Option<Vec<T>>);

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    grad_out: &[T],
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let g = conv_geom(input, kernel, bias, stride, padding)?;
    let batch = input.shape()[0];
    let in_len = g.in_channels * g.height * g.width;
    let plane = g.out_plane();
    let ow = g.out_width();
    let k = g.patch_len();
    let out_len = g.out_channels * plane;
    // wide "same" stride-1 convolutions get their input gradient as a
    // forward convolution of grad_out with the flipped, transposed kernel
    let transposed = need_input
        && g.stride == 1
        && g.kh == g.kw
        && 2 * g.padding + 1 == g.kh
        && g.kh > 1
        && g.in_channels >= 8;
    let need_cols = need_input && !transposed;

    let per_sample: Vec<SampleGrads<T>> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let src = &input.data()[b * in_len..(b + 1) * in_len];
            let dout = &grad_out[b * out_len..(b + 1) * out_len];
            let db: Vec<T> = dout
                .chunks(plane)
                .map(|row| row.iter().copied().sum())
                .collect();
            let mut dk = vec![T::zero(); g.out_channels * k];
            let mut dx = need_cols.then(|| vec![T::zero(); in_len]);
            if g.is_pointwise() {
                T::gemm(
                    g.out_channels,
                    plane,
                    k,
                    T::one(),
                    dout,
                    (plane as isize, 1),
                    src,
                    (1, plane as isize),
                    T::zero(),
                    &mut dk,
                    (k as isize, 1),
                );
                if let Some(dx) = dx.as_mut() {
                    T::gemm(
                        k,
                        g.out_channels,
                        plane,
                        T::one(),
                        kernel.data(),
                        (1, k as isize),
                        dout,
                        (plane as isize, 1),
                        T::zero(),
                        dx,
                        (plane as isize, 1),
                    );
                }
                return (dk, db, dx);
            }
            let mut cols = Vec::new();
            let mut dcols = Vec::new();
            for (y0, y1) in row_tiles(&g) {
                let n = (y1 - y0) * ow;
                cols.resize(k * n, T::zero());
                im2col(&g, src, y0, y1, &mut cols);
                let dout_tile = &dout[y0 * ow..];
                T::gemm(
                    g.out_channels,
                    n,
                    k,
                    T::one(),
                    dout_tile,
                    (plane as isize, 1),
                    &cols,
                    (1, n as isize),
                    T::one(),
                    &mut dk,
                    (k as isize, 1),
                );
                if let Some(dx) = dx.as_mut() {
                    dcols.resize(k * n, T::zero());
                    T::gemm(
                        k,
                        g.out_channels,
                        n,
                        T::one(),
                        kernel.data(),
                        (1, k as isize),
                        dout_tile,
                        (plane as isize, 1),
                        T::zero(),
                        &mut dcols,
                        (n as isize, 1),
                    );
                    col2im(&g, &dcols, y0, y1, dx);
                }
            }
            (dk, db, dx)
        })
        .collect();

    let mut dkernel = vec![T::zero(); g.out_channels * k];
    let mut dbias = vec![T::zero(); g.out_channels];
    let mut dinput = need_cols.then(|| Vec::with_capacity(batch * in_len));
    for (dk, db, dx) in per_sample {
        add_into(&mut dkernel, &dk);
        add_into(&mut dbias, &db);
        if let (Some(acc), Some(dx)) = (dinput.as_mut(), dx) {
            acc.extend_from_slice(&dx);
        }
    }
    if transposed {
        let dout = Tensor::new(
            &[batch, g.out_channels, g.out_height(), ow],
            grad_out.to_vec(),
        )?;
        let flipped = flip_transpose(kernel)?;
        let zero = Tensor::zeros(&[g.in_channels]);
        dinput = Some(conv2d_forward(&dout, &flipped, &zero, 1, g.padding)?.into_data());
    }
    Ok(ConvGrads {
        input: dinput,
        kernel: dkernel,
        bias: dbias,
    })
}

/// `out x in x k x k` kernel to `in x out x k x k`, rotated by 180 degrees.
fn flip_transpose<T: Real>(kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let (co, ci, kh, kw) = kernel.dims4()?;
    let src = kernel.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..co {
        for i in 0..ci {
            for y in 0..kh {
                for x in 0..kw {
                    out[((i * co + o) * kh + (kh - 1 - y)) * kw + (kw - 1 - x)] =
                        src[((o * ci + i) * kh + y) * kw + x];
                }
            }
        }
    }
    Tensor::new(&[ci, co, kh, kw], out)
}

pub(crate) fn add_into<T: Real>(acc: &mut [T], src: &[T]) {
    for (a, s) in acc.iter_mut().zip(src) {
        *a += *s;
    }
}

fn linear_dims<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    let (b, n) = match *input.shape() {
        [b, n] => (b, n),
        _ => {
            return Err(Error::dim(format!(
                "linear input must be 2-D, got {:?}",
                input.shape()
            )))
        }
    };
    let (m, wn) = match *weight.shape() {
        [m, wn] => (m, wn),
        _ => {
            return Err(Error::dim(format!(
                "linear weight must be 2-D, got {:?}",
                weight.shape()
            )))
        }
    };
    if wn != n {
        return Err(Error::dim(format!(
            "linear input width {n}, weight expects {wn}"
        )));
    }
    if bias.shape() != [m] {
        return Err(Error::dim(format!(
            "linear bias shape {:?}, expected [{m}]",
            bias.shape()
        )));
    }
    Ok((b, n, m))
}

pub fn linear_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (b, n, m) = linear_dims(input, weight, bias)?;
    let mut out: Vec<T> = (0..b).flat_map(|_| bias.data().iter().copied()).collect();
    T::gemm(
        b,
        n,
        m,
        T::one(),
        input.data(),
        (n as isize, 1),
        weight.data(),
        (1, n as isize),
        T::one(),
        &mut out,
        (m as isize, 1),
    );
    Tensor::new(&[b, m], out)
}

pub struct LinearGrads<T: Real> {
    pub input: Vec<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn linear_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &[T],
) -> Result<LinearGrads<T>> {
    let (b, n, m) = linear_dims(input, weight, bias)?;
    let mut dinput = vec![T::zero(); b * n];
    T::gemm(
        b,
        m,
        n,
        T::one(),
        grad_out,
        (m as isize, 1),
        weight.data(),
        (n as isize, 1),
        T::zero(),
        &mut dinput,
        (n as isize, 1),
    );
    let mut dweight = vec![T::zero(); m * n];
    T::gemm(
        m,
        b,
        n,
        T::one(),
        grad_out,
        (1, m as isize),
        input.data(),
        (n as isize, 1),
        T::zero(),
        &mut dweight,
        (n as isize, 1),
    );
    let mut dbias = vec![T::zero(); m];
    for row in grad_out.chunks(m) {
        add_into(&mut dbias, row);
    }
    Ok(LinearGrads {
        input: dinput,
        weight: dweight,
        bias: dbias,
    })
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    map(x, |v| v.max(T::zero()))
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    map(x, |v| {
        // split on sign so exp never overflows
        if v >= T::zero() {
            T::one() / (T::one() + (-v).exp())
        } else {
            let e = v.exp();
            e / (T::one() + e)
        }
    })
}

fn map<T: Real>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::new(x.shape(), x.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

/// Nearest-neighbour 2x upsampling of a 4-D tensor.
pub fn upsample_nearest_2x<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); b * c * oh * ow];
    for (plane, dst) in x.data().chunks(h * w).zip(out.chunks_mut(oh * ow)) {
        for oy in 0..oh {
            let src_row = &plane[(oy / 2) * w..(oy / 2 + 1) * w];
            for (ox, v) in dst[oy * ow..(oy + 1) * ow].iter_mut().enumerate() {
                *v = src_row[ox / 2];
            }
        }
    }
    Tensor::new(&[b, c, oh, ow], out)
}

/// Adjoint of [`upsample_nearest_2x`]: sums each 2x2 block.
pub fn upsample_nearest_2x_backward<T: Real>(
    in_dims: (usize, usize, usize, usize),
    grad_out: &[T],
) -> Vec<T> {
    let (b, c, h, w) = in_dims;
    let ow = 2 * w;
    let mut dx = vec![T::zero(); b * c * h * w];
    for (dst, src) in dx.chunks_mut(h * w).zip(grad_out.chunks(4 * h * w)) {
        for y in 0..h {
            for x in 0..w {
                let top = 2 * y * ow + 2 * x;
                dst[y * w + x] = src[top] + src[top + 1] + src[top + ow] + src[top + ow + 1];
            }
        }
    }
    dx
}

/// 2x2 average pooling (stride 2) of a 4-D tensor with even spatial dims.
pub fn avg_pool_2x<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(format!(
            "avg_pool_2x needs even dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = vec![T::zero(); b * c * oh * ow];
    for (src, dst) in x.data().chunks(h * w).zip(out.chunks_mut(oh * ow)) {
        for y in 0..oh {
            for xx in 0..ow {
                let top = 2 * y * w + 2 * xx;
                dst[y * ow + xx] =
                    (src[top] + src[top + 1] + src[top + w] + src[top + w + 1]) * quarter;
            }
        }
    }
    Tensor::new(&[b, c, oh, ow], out)
}

/// Concatenates two 4-D tensors along the channel axis.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ba, ca, ha, wa) = a.dims4()?;
    let (bb, cb, hb, wb) = b.dims4()?;
    if (ba, ha, wa) != (bb, hb, wb) {
        return Err(Error::dim(format!(
            "concat needs matching batch/spatial dims: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (la, lb) = (ca * ha * wa, cb * hb * wb);
    let mut out = Vec::with_capacity(ba * (la + lb));
    for i in 0..ba {
        out.extend_from_slice(&a.data()[i * la..(i + 1) * la]);
        out.extend_from_slice(&b.data()[i * lb..(i + 1) * lb]);
    }
    Tensor::new(&[ba, ca + cb, ha, wa], out)
}

/// Splits a channel-concat gradient back into its two operands.
pub fn concat_channels_backward<T: Real>(
    batch: usize,
    len_a: usize,
    len_b: usize,
    grad_out: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut ga = Vec::with_capacity(batch * len_a);
    let mut gb = Vec::with_capacity(batch * len_b);
    for chunk in grad_out.chunks(len_a + len_b) {
        ga.extend_from_slice(&chunk[..len_a]);
        gb.extend_from_slice(&chunk[len_a..]);
    }
    (ga, gb)
}

/// Mean squared error over all elements.
pub fn mse<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(Error::dim(format!(
            "mse shape mismatch {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let sum: T = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum();
    Ok(sum / T::from_usize(pred.numel()).expect("count"))
}

/// Row-wise softmax of a `B x K` tensor, stabilised by max subtraction.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let k = match *logits.shape() {
        [_, k] => k,
        _ => {
            return Err(Error::dim(format!(
                "softmax expects B x K, got {:?}",
                logits.shape()
            )))
        }
    };
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    Tensor::new(logits.shape(), out)
}

/// Mean cross-entropy of softmax(logits) against integer labels; returns the
/// loss and the softmax probabilities.
pub fn softmax_cross_entropy<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let (b, k) = match *logits.shape() {
        [b, k] => (b, k),
        _ => {
            return Err(Error::dim(format!(
                "cross-entropy expects B x K, got {:?}",
                logits.shape()
            )))
        }
    };
    if labels.len() != b {
        return Err(Error::dim(format!(
            "{} labels for batch of {b}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Index(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let mut loss = T::zero();
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let log_sum = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        loss += log_sum - (row[label] - max);
    }
    let probs = softmax_rows(logits)?;
    Ok((loss / T::from_usize(b).expect("batch"), probs))
}

/// Reflect-pads the spatial dims of a 4-D tensor at the bottom/right edge.
pub fn reflect_pad<T: Real>(
    x: &Tensor<T>,
    pad_bottom: usize,
    pad_right: usize,
) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    if pad_bottom >= h || pad_right >= w {
        return Err(Error::Size(format!(
            "reflect pad {pad_bottom}/{pad_right} too large for {h}x{w}"
        )));
    }
    let (oh, ow) = (h + pad_bottom, w + pad_right);
    let reflect = |i: usize, n: usize| if i < n { i } else { 2 * n - 2 - i };
    let mut out = vec![T::zero(); b * c * oh * ow];
    for (src, dst) in x.data().chunks(h * w).zip(out.chunks_mut(oh * ow)) {
        for y in 0..oh {
            let sy = reflect(y, h);
            for xx in 0..ow {
                dst[y * ow + xx] = src[sy * w + reflect(xx, w)];
            }
        }
    }
    Tensor::new(&[b, c, oh, ow], out)
}

/// Keeps the top-left `h x w` window of a 4-D tensor.
pub fn crop<T: Real>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (b, c, ih, iw) = x.dims4()?;
    if h > ih || w > iw {
        return Err(Error::Size(format!("crop {h}x{w} larger than {ih}x{iw}")));
    }
    let mut out = Vec::with_capacity(b * c * h * w);
    for plane in x.data().chunks(ih * iw) {
        for y in 0..h {
            out.extend_from_slice(&plane[y * iw..y * iw + w]);
        }
    }
    Tensor::new(&[b, c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_all_ones() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 2, 2], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = conv2d_forward(&x, &k, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn conv_zero_kernel_gives_bias() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 7, 5], |i| (i as f64).sin());
        let k = Tensor::zeros(&[4, 3, 3, 3]);
        let b = Tensor::new(&[4], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let y = conv2d_forward(&x, &k, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 4, 4, 3]);
        for (i, plane) in y.data().chunks(12).enumerate() {
            assert!(plane.iter().all(|&v| v == b.data()[i % 4]));
        }
    }

    #[test]
    fn conv_output_size_formula() {
        let x = Tensor::<f32>::zeros(&[1, 2, 9, 8]);
        let k = Tensor::zeros(&[3, 2, 3, 3]);
        let b = Tensor::zeros(&[3]);
        for (stride, padding) in [(1, 0), (1, 1), (2, 1), (3, 2)] {
            let y = conv2d_forward(&x, &k, &b, stride, padding).unwrap();
            let oh = (9 + 2 * padding - 3) / stride + 1;
            let ow = (8 + 2 * padding - 3) / stride + 1;
            assert_eq!(y.shape(), &[1, 3, oh, ow]);
        }
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        let b = Tensor::zeros(&[1]);
        assert!(matches!(
            conv2d_forward(&x, &k, &b, 1, 1),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn conv_matches_direct_loop() {
        let x = Tensor::<f64>::from_fn(&[2, 2, 6, 5], |i| ((i * 37) % 11) as f64 - 5.0);
        let k = Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 13) % 7) as f64 * 0.1);
        let b = Tensor::new(&[3], vec![0.1, 0.2, 0.3]).unwrap();
        let (stride, pad) = (2, 1);
        let y = conv2d_forward(&x, &k, &b, stride, pad).unwrap();
        let (_, _, oh, ow) = y.dims4().unwrap();
        for n in 0..2 {
            for co in 0..3 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = b.data()[co];
                        for ci in 0..2 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if (0..6).contains(&iy) && (0..5).contains(&ix) {
                                        s += x.data()
                                            [((n * 2 + ci) * 6 + iy as usize) * 5 + ix as usize]
                                            * k.data()[((co * 2 + ci) * 3 + ki) * 3 + kj];
                                    }
                                }
                            }
                        }
                        let got = y.data()[((n * 3 + co) * oh + oy) * ow + ox];
                        assert!((got - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn linear_identity_and_bias() {
        let x = Tensor::<f64>::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let y = linear_forward(&x, &eye, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y.data(), x.data());
        let zero = Tensor::<f64>::zeros(&[2, 3]);
        let y = linear_forward(&zero, &eye, &Tensor::full(&[3], 2.5)).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.5));
        let bad = Tensor::<f64>::zeros(&[4, 2]);
        assert!(linear_forward(&x, &bad, &Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn activations() {
        let x = Tensor::<f64>::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let s = sigmoid(&Tensor::<f64>::scalar(0.0));
        assert_eq!(s.data(), &[0.5]);
        let extreme = sigmoid(&Tensor::<f64>::new(&[2], vec![-1000.0, 1000.0]).unwrap());
        assert!(extreme.is_finite());
    }

    #[test]
    fn upsample_single_pixel() {
        let x = Tensor::<f32>::full(&[1, 1, 1, 1], 7.0);
        let y = upsample_nearest_2x(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn concat_spatial_mismatch() {
        let a = Tensor::<f32>::zeros(&[1, 1, 4, 4]);
        let b = Tensor::zeros(&[1, 2, 4, 2]);
        assert!(matches!(concat_channels(&a, &b), Err(Error::Dimension(_))));
        let c = Tensor::zeros(&[1, 2, 4, 4]);
        assert_eq!(concat_channels(&a, &c).unwrap().shape(), &[1, 3, 4, 4]);
    }

    #[test]
    fn softmax_ce_values() {
        let uniform = Tensor::<f64>::new(&[1, 2], vec![0.0, 0.0]).unwrap();
        let (l, _) = softmax_cross_entropy(&uniform, &[0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let confident = Tensor::<f64>::new(&[1, 2], vec![1000.0, -1000.0]).unwrap();
        let (l, p) = softmax_cross_entropy(&confident, &[0]).unwrap();
        assert!(l.abs() < 1e-12 && p.is_finite());
        assert!(matches!(
            softmax_cross_entropy(&uniform, &[2]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn reflect_pad_then_crop() {
        let x = Tensor::<f32>::from_fn(&[1, 1, 3, 3], |i| i as f32);
        let p = reflect_pad(&x, 1, 2).unwrap();
        assert_eq!(p.shape(), &[1, 1, 4, 5]);
        // row 3 mirrors row 1, column 3 mirrors column 1
        assert_eq!(p.data()[3 * 5], x.data()[3]);
        assert_eq!(p.data()[3], x.data()[1]);
        assert_eq!(crop(&p, 3, 3).unwrap(), x);
    }
}
