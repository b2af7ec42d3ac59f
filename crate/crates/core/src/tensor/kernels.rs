//! Raw numeric kernels on `Tensor` buffers. Nothing here records graph nodes.
//!
//! Convolutions are lowered to a single batched im2col matrix of shape
//! `[c_in * k_h * k_w, n * h_out * w_out]` followed by one gemm.

use super::{Real, Tensor};
use crate::error::{DfgError, Result};

/// Geometry of a 2-D convolution over NCHW tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    /// Geometry of `conv2d(x, w)` for input `[n, c_in, h, w]`, weight `[c_out, c_in, kh, kw]`.
    pub fn forward(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(DfgError::shape(format!(
                "conv2d expects rank-4 input and weight, got {x:?} and {w:?}"
            )));
        }
        if x[1] != w[1] {
            return Err(DfgError::shape(format!(
                "conv2d channel mismatch: input has {} channels, weight expects {}",
                x[1], w[1]
            )));
        }
        if stride == 0 {
            return Err(DfgError::invalid("conv stride must be positive"));
        }
        let ho = conv_out_extent(x[2], w[2], stride, pad)?;
        let wo = conv_out_extent(x[3], w[3], stride, pad)?;
        Ok(ConvGeometry {
            n: x[0],
            c_in: x[1],
            h: x[2],
            w: x[3],
            c_out: w[0],
            kh: w[2],
            kw: w[3],
            stride,
            pad,
            ho,
            wo,
        })
    }

    /// Geometry of the convolution whose input-gradient maps `y: [n, c_out, ho, wo]`
    /// to an output of spatial size `(h, w)`.
    pub fn transposed(
        y: &[usize],
        weight: &[usize],
        stride: usize,
        pad: usize,
        out_hw: (usize, usize),
    ) -> Result<Self> {
        if y.len() != 4 || weight.len() != 4 {
            return Err(DfgError::shape(format!(
                "transposed conv expects rank-4 input and weight, got {y:?} and {weight:?}"
            )));
        }
        if y[1] != weight[0] {
            return Err(DfgError::shape(format!(
                "transposed conv channel mismatch: input has {} channels, weight expects {}",
                y[1], weight[0]
            )));
        }
        let g = Self::forward(&[y[0], weight[1], out_hw.0, out_hw.1], weight, stride, pad)?;
        if g.ho != y[2] || g.wo != y[3] {
            return Err(DfgError::shape(format!(
                "transposed conv output {out_hw:?} inconsistent with input extent {:?}",
                &y[2..]
            )));
        }
        Ok(g)
    }

    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.n, self.c_in, self.h, self.w]
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.n, self.c_out, self.ho, self.wo]
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.kh, self.kw]
    }
}

pub fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return Err(DfgError::shape(format!(
            "kernel {k} larger than padded extent {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Output extent of a transposed convolution: `(in - 1) * stride + k - 2 * pad`.
pub fn transposed_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let full = (input - 1) * stride + k;
    if full <= 2 * pad {
        return Err(DfgError::shape(format!(
            "transposed conv padding {pad} consumes the whole output"
        )));
    }
    Ok(full - 2 * pad)
}

/// Output columns `lo..hi` whose input column `ow * stride + kj - pad` lies
/// inside `0..extent`.
fn valid_range(extent: usize, out: usize, kj: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > kj { (pad - kj).div_ceil(stride) } else { 0 };
    let hi = if extent + pad > kj {
        (extent + pad - kj).div_ceil(stride).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: Real>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let (k, p) = (g.k(), g.p());
    let np = g.n * p;
    let mut cols = vec![T::zero(); k * np];
    for ci in 0..g.c_in {
        for ki in 0..g.kh {
            let (oh_lo, oh_hi) = valid_range(g.h, g.ho, ki, g.stride, g.pad);
            for kj in 0..g.kw {
                let (ow_lo, ow_hi) = valid_range(g.w, g.wo, kj, g.stride, g.pad);
                if ow_lo >= ow_hi {
                    continue;
                }
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * np..(row + 1) * np];
                for n in 0..g.n {
                    let plane = &x[(n * g.c_in + ci) * g.h * g.w..][..g.h * g.w];
                    for oh in oh_lo..oh_hi {
                        let ih = oh * g.stride + ki - g.pad;
                        let src = &plane[ih * g.w + ow_lo * g.stride + kj - g.pad..(ih + 1) * g.w];
                        let out = &mut dst[n * p + oh * g.wo + ow_lo..n * p + oh * g.wo + ow_hi];
                        if g.stride == 1 {
                            out.copy_from_slice(&src[..out.len()]);
                        } else {
                            for (slot, &v) in out.iter_mut().zip(src.iter().step_by(g.stride)) {
                                *slot = v;
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let (p, np) = (g.p(), g.n * g.p());
    let mut x = vec![T::zero(); g.n * g.c_in * g.h * g.w];
    for ci in 0..g.c_in {
        for ki in 0..g.kh {
            let (oh_lo, oh_hi) = valid_range(g.h, g.ho, ki, g.stride, g.pad);
            for kj in 0..g.kw {
                let (ow_lo, ow_hi) = valid_range(g.w, g.wo, kj, g.stride, g.pad);
                if ow_lo >= ow_hi {
                    continue;
                }
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * np..(row + 1) * np];
                for n in 0..g.n {
                    let plane = &mut x[(n * g.c_in + ci) * g.h * g.w..][..g.h * g.w];
                    for oh in oh_lo..oh_hi {
                        let ih = oh * g.stride + ki - g.pad;
                        let dst = &mut plane[ih * g.w + ow_lo * g.stride + kj - g.pad..(ih + 1) * g.w];
                        let inp = &src[n * p + oh * g.wo + ow_lo..n * p + oh * g.wo + ow_hi];
                        for (slot, &v) in dst.iter_mut().step_by(g.stride).zip(inp) {
                            *slot = *slot + v;
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[n, c, p]` -> `[c, n * p]`
fn nchw_to_cm<T: Real>(y: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(y.len());
    for ci in 0..c {
        for ni in 0..n {
            out.extend_from_slice(&y[(ni * c + ci) * p..][..p]);
        }
    }
    out
}

/// `[c, n * p]` -> `[n, c, p]`
fn cm_to_nchw<T: Real>(m: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(m.len());
    for ni in 0..n {
        for ci in 0..c {
            out.extend_from_slice(&m[ci * n * p + ni * p..][..p]);
        }
    }
    out
}

/// Freshly allocated `op(a) @ op(b)`.
fn gemm_new<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
) -> Vec<T> {
    if k == 0 {
        return vec![T::zero(); m * n];
    }
    let mut c: Vec<T> = Vec::with_capacity(m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: with beta = 0 the kernel never reads `c` and writes every one
    // of its m * n elements, so the length can be set afterwards.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            T::zero(),
            c.as_mut_ptr(),
            n as isize,
            1,
        );
        c.set_len(m * n);
    }
    c
}

/// Matrix product of rank-2 tensors with optional transposition of either side.
pub fn matmul<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    trans_a: bool,
    trans_b: bool,
) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(DfgError::shape(format!(
            "matmul expects rank-2 operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, ka) = if trans_a {
        (a.shape()[1], a.shape()[0])
    } else {
        (a.shape()[0], a.shape()[1])
    };
    let (kb, n) = if trans_b {
        (b.shape()[1], b.shape()[0])
    } else {
        (b.shape()[0], b.shape()[1])
    };
    if ka != kb {
        return Err(DfgError::shape(format!(
            "matmul inner extent mismatch: {:?}{} x {:?}{}",
            a.shape(),
            if trans_a { "^T" } else { "" },
            b.shape(),
            if trans_b { "^T" } else { "" }
        )));
    }
    let c = gemm_new(m, ka, n, a.data(), trans_a, b.data(), trans_b);
    Tensor::new(&[m, n], c)
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::forward(x.shape(), w.shape(), stride, pad)?;
    let cols = im2col(x.data(), &g);
    let np = g.n * g.p();
    let out = gemm_new(g.c_out, g.k(), np, w.data(), false, &cols, false);
    Tensor::new(&g.output_shape(), cm_to_nchw(&out, g.n, g.c_out, g.p()))
}

/// Gradient of `conv2d` with respect to its input; equivalently a transposed
/// convolution of `dy` by `w`.
pub fn conv2d_input_grad<T: Real>(
    dy: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    out_hw: (usize, usize),
) -> Result<Tensor<T>> {
    let g = ConvGeometry::transposed(dy.shape(), w.shape(), stride, pad, out_hw)?;
    let np = g.n * g.p();
    let dy_cm = nchw_to_cm(dy.data(), g.n, g.c_out, g.p());
    let dcols = gemm_new(g.k(), g.c_out, np, w.data(), true, &dy_cm, false);
    Tensor::new(&g.input_shape(), col2im(&dcols, &g))
}

/// Gradient of `conv2d` with respect to its weight.
pub fn conv2d_weight_grad<T: Real>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    kernel: (usize, usize),
) -> Result<Tensor<T>> {
    if x.rank() != 4 || dy.rank() != 4 || x.shape()[0] != dy.shape()[0] {
        return Err(DfgError::shape(format!(
            "conv weight grad expects matching rank-4 batches, got {:?} and {:?}",
            x.shape(),
            dy.shape()
        )));
    }
    let wshape = [dy.shape()[1], x.shape()[1], kernel.0, kernel.1];
    let g = ConvGeometry::forward(x.shape(), &wshape, stride, pad)?;
    if g.ho != dy.shape()[2] || g.wo != dy.shape()[3] {
        return Err(DfgError::shape(format!(
            "conv weight grad: output gradient {:?} does not match geometry {:?}",
            dy.shape(),
            g.output_shape()
        )));
    }
    let np = g.n * g.p();
    let cols = im2col(x.data(), &g);
    let dy_cm = nchw_to_cm(dy.data(), g.n, g.c_out, g.p());
    let dw = gemm_new(g.c_out, np, g.k(), &dy_cm, false, &cols, true);
    Tensor::new(&wshape, dw)
}

/// Flat input index of the maximum of every pooling window (first index on ties).
pub fn maxpool_argmax<T: Real>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
) -> Result<(Vec<usize>, [usize; 4])> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(DfgError::shape(format!("maxpool expects NCHW, got {s:?}")));
    }
    if k == 0 || stride == 0 {
        return Err(DfgError::invalid("pool window and stride must be positive"));
    }
    if k > s[2] || k > s[3] {
        return Err(DfgError::shape(format!(
            "pool window {k} exceeds spatial extent {:?}",
            &s[2..]
        )));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let ho = (h - k) / stride + 1;
    let wo = (w - k) / stride + 1;
    let data = x.data();
    let mut idx = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = base + oh * stride * w + ow * stride;
                for i in 0..k {
                    for j in 0..k {
                        let at = base + (oh * stride + i) * w + ow * stride + j;
                        if data[at] > data[best] {
                            best = at;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    Ok((idx, [n, c, ho, wo]))
}

/// PyTorch-style adaptive average pooling bins: `[floor(i*in/out), ceil((i+1)*in/out))`.
pub fn adaptive_bins(input: usize, output: usize) -> Vec<(usize, usize)> {
    (0..output)
        .map(|i| {
            let start = i * input / output;
            let end = ((i + 1) * input).div_ceil(output);
            (start, end)
        })
        .collect()
}

pub fn adaptive_avg_pool<T: Real>(x: &Tensor<T>, out_hw: (usize, usize)) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(DfgError::shape(format!("adaptive pool expects NCHW, got {s:?}")));
    }
    let (h, w) = (s[2], s[3]);
    let rows = adaptive_bins(h, out_hw.0);
    let cols = adaptive_bins(w, out_hw.1);
    let mut out = Vec::with_capacity(s[0] * s[1] * out_hw.0 * out_hw.1);
    for plane in x.data().chunks(h * w) {
        for &(r0, r1) in &rows {
            for &(c0, c1) in &cols {
                let mut acc = T::zero();
                for r in r0..r1 {
                    for c in c0..c1 {
                        acc = acc + plane[r * w + c];
                    }
                }
                out.push(acc / T::lit(((r1 - r0) * (c1 - c0)) as f64));
            }
        }
    }
    Tensor::new(&[s[0], s[1], out_hw.0, out_hw.1], out)
}

pub fn adaptive_avg_pool_backward<T: Real>(
    g: &Tensor<T>,
    in_shape: &[usize],
) -> Result<Tensor<T>> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (oh, ow) = (g.shape()[2], g.shape()[3]);
    let rows = adaptive_bins(h, oh);
    let cols = adaptive_bins(w, ow);
    let mut dx = vec![T::zero(); in_shape.iter().product()];
    for (plane, gp) in dx.chunks_mut(h * w).zip(g.data().chunks(oh * ow)) {
        for (i, &(r0, r1)) in rows.iter().enumerate() {
            for (j, &(c0, c1)) in cols.iter().enumerate() {
                let share = gp[i * ow + j] / T::lit(((r1 - r0) * (c1 - c0)) as f64);
                for r in r0..r1 {
                    for c in c0..c1 {
                        plane[r * w + c] = plane[r * w + c] + share;
                    }
                }
            }
        }
    }
    Tensor::new(in_shape, dx)
}

/// Row-wise softmax of a `[rows, cols]` tensor (numerically stabilised).
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(DfgError::shape(format!(
            "softmax expects [rows, cols], got {:?}",
            x.shape()
        )));
    }
    let cols = x.shape()[1];
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let z: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    Tensor::new(x.shape(), out)
}

/// Per-row cross-entropy `logsumexp(row) - row[label]`.
pub fn cross_entropy_rows<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<Vec<T>> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(DfgError::shape(format!(
            "cross entropy expects [{}, classes] logits, got {:?}",
            labels.len(),
            logits.shape()
        )));
    }
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .map(|(row, &y)| {
            if y >= k {
                return Err(DfgError::invalid(format!(
                    "label {y} out of range for {k} classes"
                )));
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            Ok(lse - row[y])
        })
        .collect()
}

/// Per-channel statistics over (N, H, W) of an NCHW (or `[N, C]`) tensor.
pub fn channel_moments<T: Real>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let s = x.shape();
    let (n, c) = (s[0], s[1]);
    let p: usize = s[2..].iter().product();
    let count = T::lit((n * p) as f64);
    let data = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ci in 0..c {
        let mut acc = T::zero();
        for ni in 0..n {
            for &v in &data[(ni * c + ci) * p..][..p] {
                acc = acc + v;
            }
        }
        let m = acc / count;
        let mut sq = T::zero();
        for ni in 0..n {
            for &v in &data[(ni * c + ci) * p..][..p] {
                sq = sq + (v - m) * (v - m);
            }
        }
        mean[ci] = m;
        var[ci] = sq / count;
    }
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * co * ho * wo];
        for b in 0..n {
            for o in 0..co {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for a in 0..kh {
                                for d in 0..kw {
                                    let r = (i * stride + a) as isize - pad as isize;
                                    let q = (j * stride + d) as isize - pad as isize;
                                    if r >= 0 && q >= 0 && (r as usize) < h && (q as usize) < wd {
                                        acc += x.data()[((b * ci + c) * h + r as usize) * wd + q as usize]
                                            * w.data()[((o * ci + c) * kh + a) * kw + d];
                                    }
                                }
                            }
                        }
                        out[((b * co + o) * ho + i) * wo + j] = acc;
                    }
                }
            }
        }
        Tensor::new(&[n, co, ho, wo], out).unwrap()
    }

    fn seq(shape: &[usize], scale: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|i| ((i * 37 % 23) as f64 - 11.0) * scale).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn conv_matches_nested_loops_with_stride_and_padding() {
        let x = seq(&[2, 3, 7, 6], 0.1);
        let w = seq(&[4, 3, 3, 3], 0.05);
        for (stride, pad) in [(1, 0), (2, 1), (2, 2), (3, 1)] {
            let fast = conv2d_forward(&x, &w, stride, pad).unwrap();
            let slow = naive_conv(&x, &w, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12, "stride {stride} pad {pad}");
        }
    }

    #[test]
    fn transposed_extent_formula() {
        assert_eq!(transposed_out_extent(4, 3, 2, 0).unwrap(), 9);
        assert_eq!(transposed_out_extent(9, 3, 1, 0).unwrap(), 11);
        assert_eq!(transposed_out_extent(11, 4, 1, 0).unwrap(), 14);
    }

    #[test]
    fn adaptive_bins_cover_input() {
        assert_eq!(adaptive_bins(4, 2), vec![(0, 2), (2, 4)]);
        assert_eq!(adaptive_bins(5, 3), vec![(0, 2), (1, 4), (3, 5)]);
        assert_eq!(adaptive_bins(1, 3), vec![(0, 1), (0, 1), (0, 1)]);
    }

    #[test]
    fn maxpool_first_index_on_ties() {
        let x = Tensor::<f64>::ones(&[1, 1, 2, 2]);
        let (idx, shape) = maxpool_argmax(&x, 2, 2).unwrap();
        assert_eq!(idx, vec![0]);
        assert_eq!(shape, [1, 1, 1, 1]);
        assert!(maxpool_argmax(&x, 3, 1).is_err());
    }
}
