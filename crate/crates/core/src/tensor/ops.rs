//! Differentiable operations on [`Var`].
//!
//! Every backward rule that is marked twice-differentiable is written in terms
//! of other ops in this module, so gradient graphs close over the same set.
//! The convolution family (`conv2d`, `conv_transpose2d`, `conv2d_weight_grad`)
//! is closed under differentiation: each one's adjoints are the other two.

use super::autograd::Backward;
use super::kernels::{self, ConvGeometry};
use super::{Real, Tensor, Var};
use crate::error::{DfgError, Result};

fn lit<T: Real>(v: f64) -> T {
    T::lit(v)
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

struct AddOp;
impl<T: Real> Backward<T> for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        Ok(vec![Some(g.clone()), Some(g.clone())])
    }
}

pub fn add<T: Real>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let v = a.value().zip_map(b.value(), |x, y| x + y)?;
    Ok(Var::from_op(v, AddOp, vec![a.clone(), b.clone()]))
}

struct SubOp;
impl<T: Real> Backward<T> for SubOp {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>, needs: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        let gb = if needs[1] { Some(neg(g)) } else { None };
        Ok(vec![Some(g.clone()), gb])
    }
}

pub fn sub<T: Real>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let v = a.value().zip_map(b.value(), |x, y| x - y)?;
    Ok(Var::from_op(v, SubOp, vec![a.clone(), b.clone()]))
}

struct MulOp;
impl<T: Real> Backward<T> for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, inputs: &[Var<T>], _: &Var<T>, g: &Var<T>, needs: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        let ga = if needs[0] { Some(mul(g, &inputs[1])?) } else { None };
        let gb = if needs[1] { Some(mul(g, &inputs[0])?) } else { None };
        Ok(vec![ga, gb])
    }
}

pub fn mul<T: Real>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let v = a.value().zip_map(b.value(), |x, y| x * y)?;
    Ok(Var::from_op(v, MulOp, vec![a.clone(), b.clone()]))
}

pub fn square<T: Real>(a: &Var<T>) -> Result<Var<T>> {
    mul(a, a)
}

struct ScaleOp(f64);
impl<T: Real> Backward<T> for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        Ok(vec![Some(scale(g, self.0))])
    }
}

/// `a * c` for a constant `c`.
pub fn scale<T: Real>(a: &Var<T>, c: f64) -> Var<T> {
    let k = lit::<T>(c);
    Var::from_op(a.value().map(|x| x * k), ScaleOp(c), vec![a.clone()])
}

pub fn neg<T: Real>(a: &Var<T>) -> Var<T> {
    scale(a, -1.0)
}

struct AddScalarOp;
impl<T: Real> Backward<T> for AddScalarOp {
    fn name(&self) -> &'static str {
        "add_scalar"
    }
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        Ok(vec![Some(g.clone())])
    }
}

/// `a + c` for a constant `c`.
pub fn add_scalar<T: Real>(a: &Var<T>, c: f64) -> Var<T> {
    let k = lit::<T>(c);
    Var::from_op(a.value().map(|x| x + k), AddScalarOp, vec![a.clone()])
}

struct MulConstOp<T>(Tensor<T>);
impl<T: Real> Backward<T> for MulConstOp<T> {
    fn name(&self) -> &'static str {
        "mul_const"
    }
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        Ok(vec![Some(mul_const(g, &self.0)?)])
    }
}

/// Elementwise product with a tensor that is not differentiated.
pub fn mul_const<T: Real>(a: &Var<T>, c: &Tensor<T>) -> Result<Var<T>> {
    let v = a.value().zip_map(c, |x, y| x * y)?;
    Ok(Var::from_op(v, MulConstOp(c.clone()), vec![a.clone()]))
}

// ---------------------------------------------------------------------------
// Nonlinearities

struct TanhOp;
impl<T: Real> Backward<T> for TanhOp {
    fn name(&self) -> &'static str {
        "tanh"
    }
    fn backward(&self, _: &[Var<T>], out: &Var<T>, g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        // d tanh = 1 - y^2
        let slope = add_scalar(&neg(&square(out)?), 1.0);
        Ok(vec![Some(mul(g, &slope)?)])
    }
}

pub fn tanh<T: Real>(a: &Var<T>) -> Var<T> {
    Var::from_op(a.value().map(T::tanh), TanhOp, vec![a.clone()])
}

struct LeakyReluOp {
    slope: f64,
}
impl<T: Real> Backward<T> for LeakyReluOp {
    fn name(&self) -> &'static str {
        if self.slope == 0.0 {
            "relu"
        } else {
            "leaky_relu"
        }
    }
    fn backward(&self, inputs: &[Var<T>], _: &Var<T>, g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        // Piecewise-linear: the mask is constant, so the second derivative is 0
        // everywhere (including the kink).
        let s = lit::<T>(self.slope);
        let mask = inputs[0]
            .value()
            .map(|x| if x > T::zero() { T::one() } else { s });
        Ok(vec![Some(mul_const(g, &mask)?)])
    }
}

pub fn leaky_relu<T: Real>(a: &Var<T>, slope: f64) -> Var<T> {
    let s = lit::<T>(slope);
    let v = a.value().map(|x| if x > T::zero() { x } else { x * s });
    Var::from_op(v, LeakyReluOp { slope }, vec![a.clone()])
}

pub fn relu<T: Real>(a: &Var<T>) -> Var<T> {
    leaky_relu(a, 0.0)
}

struct SqrtOp;
impl<T: Real> Backward<T> for SqrtOp {
    fn name(&self) -> &'static str {
        "sqrt"
    }
    fn backward(&self, _: &[Var<T>], out: &Var<T>, g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        Ok(vec![Some(mul(g, &scale(&recip(out), 0.5))?)])
    }
}

pub fn sqrt<T: Real>(a: &Var<T>) -> Var<T> {
    Var::from_op(a.value().map(T::sqrt), SqrtOp, vec![a.clone()])
}

struct RecipOp;
impl<T: Real> Backward<T> for RecipOp {
    fn name(&self) -> &'static str {
        "recip"
    }
    fn backward(&self, _: &[Var<T>], out: &Var<T>, g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        Ok(vec![Some(mul(g, &neg(&square(out)?))?)])
    }
}

pub fn recip<T: Real>(a: &Var<T>) -> Var<T> {
    Var::from_op(a.value().map(T::recip), RecipOp, vec![a.clone()])
}

// ---------------------------------------------------------------------------
// Reductions and broadcasts

struct SumOp {
    shape: Vec<usize>,
}
impl<T: Real> Backward<T> for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        Ok(vec![Some(expand(g, &self.shape)?)])
    }
}

/// Sum of all elements, as a `[1]` tensor.
pub fn sum<T: Real>(a: &Var<T>) -> Var<T> {
    Var::from_op(
        Tensor::scalar(a.value().sum()),
        SumOp {
            shape: a.shape().to_vec(),
        },
        vec![a.clone()],
    )
}

pub fn mean<T: Real>(a: &Var<T>) -> Var<T> {
    let n = a.value().numel() as f64;
    scale(&sum(a), 1.0 / n)
}

struct ExpandOp;
impl<T: Real> Backward<T> for ExpandOp {
    fn name(&self) -> &'static str {
        "expand"
    }
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        Ok(vec![Some(sum(g))])
    }
}

/// Broadcasts a single-element tensor to `shape`.
pub fn expand<T: Real>(a: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
    if a.value().numel() != 1 {
        return Err(DfgError::shape(format!(
            "expand needs a single element, got {:?}",
            a.shape()
        )));
    }
    Ok(Var::from_op(
        Tensor::full(shape, a.item()),
        ExpandOp,
        vec![a.clone()],
    ))
}

struct SumPerSampleOp {
    shape: Vec<usize>,
}
impl<T: Real> Backward<T> for SumPerSampleOp {
    fn name(&self) -> &'static str {
        "sum_per_sample"
    }
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        Ok(vec![Some(expand_per_sample(g, &self.shape)?)])
    }
}

/// Reduces every axis but the first: `[n, ...] -> [n]`.
pub fn sum_per_sample<T: Real>(a: &Var<T>) -> Var<T> {
    let s = a.value().sample_len();
    let v: Vec<T> = a.value().data().chunks(s).map(|c| c.iter().copied().sum()).collect();
    let n = v.len();
    Var::from_op(
        Tensor::new(&[n], v).expect("non-empty batch"),
        SumPerSampleOp {
            shape: a.shape().to_vec(),
        },
        vec![a.clone()],
    )
}

struct ExpandPerSampleOp;
impl<T: Real> Backward<T> for ExpandPerSampleOp {
    fn name(&self) -> &'static str {
        "expand_per_sample"
    }
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        Ok(vec![Some(sum_per_sample(g))])
    }
}

/// Broadcasts `[n]` to `[n, ...shape[1..]]`.
pub fn expand_per_sample<T: Real>(a: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
    if a.value().rank() != 1 || a.shape()[0] != shape[0] {
        return Err(DfgError::shape(format!(
            "expand_per_sample from {:?} to {shape:?}",
            a.shape()
        )));
    }
    let s: usize = shape[1..].iter().product();
    let mut v = Vec::with_capacity(shape[0] * s);
    for &x in a.value().data() {
        v.extend(std::iter::repeat_n(x, s));
    }
    Ok(Var::from_op(Tensor::new(shape, v)?, ExpandPerSampleOp, vec![a.clone()]))
}

struct ChannelSumOp {
    shape: Vec<usize>,
}
impl<T: Real> Backward<T> for ChannelSumOp {
    fn name(&self) -> &'static str {
        "channel_sum"
    }
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        Ok(vec![Some(channel_broadcast(g, &self.shape)?)])
    }
}

/// Sums an `[n, c, ...]` tensor over every axis except the channel axis.
pub fn channel_sum<T: Real>(a: &Var<T>) -> Result<Var<T>> {
    let s = a.shape();
    if s.len() < 2 {
        return Err(DfgError::shape(format!("channel_sum needs rank >= 2, got {s:?}")));
    }
    let (n, c) = (s[0], s[1]);
    let p: usize = s[2..].iter().product();
    let data = a.value().data();
    let mut out = vec![T::zero(); c];
    for ni in 0..n {
        for (ci, slot) in out.iter_mut().enumerate() {
            for &v in &data[(ni * c + ci) * p..][..p] {
                *slot = *slot + v;
            }
        }
    }
    Ok(Var::from_op(
        Tensor::new(&[c], out)?,
        ChannelSumOp { shape: s.to_vec() },
        vec![a.clone()],
    ))
}

struct ChannelBroadcastOp;
impl<T: Real> Backward<T> for ChannelBroadcastOp {
    fn name(&self) -> &'static str {
        "channel_broadcast"
    }
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        Ok(vec![Some(channel_sum(g)?)])
    }
}

/// Broadcasts a per-channel vector `[c]` to `[n, c, ...]`.
pub fn channel_broadcast<T: Real>(b: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
    if b.value().rank() != 1 || shape.len() < 2 || shape[1] != b.shape()[0] {
        return Err(DfgError::shape(format!(
            "channel_broadcast from {:?} to {shape:?}",
            b.shape()
        )));
    }
    let (n, c) = (shape[0], shape[1]);
    let p: usize = shape[2..].iter().product();
    let mut v = Vec::with_capacity(n * c * p);
    for _ in 0..n {
        for &x in b.value().data() {
            v.extend(std::iter::repeat_n(x, p));
        }
    }
    debug_assert_eq!(v.len(), n * c * p);
    Ok(Var::from_op(Tensor::new(shape, v)?, ChannelBroadcastOp, vec![b.clone()]))
}

/// `x + b` with `b` broadcast along the channel axis.
pub fn bias_add<T: Real>(x: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    add(x, &channel_broadcast(b, x.shape())?)
}

// ---------------------------------------------------------------------------
// Shape manipulation

struct ReshapeOp {
    shape: Vec<usize>,
}
impl<T: Real> Backward<T> for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        Ok(vec![Some(reshape(g, &self.shape)?)])
    }
}

pub fn reshape<T: Real>(a: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
    let v = a.value().reshape(shape)?;
    Ok(Var::from_op(
        v,
        ReshapeOp {
            shape: a.shape().to_vec(),
        },
        vec![a.clone()],
    ))
}

/// `[n, ...] -> [n, prod(...)]`
pub fn flatten<T: Real>(a: &Var<T>) -> Result<Var<T>> {
    let n = a.shape()[0];
    reshape(a, &[n, a.value().sample_len()])
}

struct ConcatBatchOp {
    first: usize,
}
impl<T: Real> Backward<T> for ConcatBatchOp {
    fn name(&self) -> &'static str {
        "concat_batch"
    }
    fn backward(&self, inputs: &[Var<T>], _: &Var<T>, g: &Var<T>, needs: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        let second = inputs[1].shape()[0];
        let ga = if needs[0] { Some(slice_batch(g, 0, self.first)?) } else { None };
        let gb = if needs[1] {
            Some(slice_batch(g, self.first, second)?)
        } else {
            None
        };
        Ok(vec![ga, gb])
    }
}

/// Concatenation along the leading (sample) axis, `a` first.
pub fn concat_batch<T: Real>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let v = Tensor::concat_batch(&[a.value(), b.value()])?;
    Ok(Var::from_op(
        v,
        ConcatBatchOp { first: a.shape()[0] },
        vec![a.clone(), b.clone()],
    ))
}

struct SliceBatchOp {
    start: usize,
    total: usize,
}
impl<T: Real> Backward<T> for SliceBatchOp {
    fn name(&self) -> &'static str {
        "slice_batch"
    }
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        Ok(vec![Some(embed_batch(g, self.start, self.total)?)])
    }
}

pub fn slice_batch<T: Real>(a: &Var<T>, start: usize, len: usize) -> Result<Var<T>> {
    let v = a.value().slice_batch(start, len)?;
    Ok(Var::from_op(
        v,
        SliceBatchOp {
            start,
            total: a.shape()[0],
        },
        vec![a.clone()],
    ))
}

struct EmbedBatchOp {
    start: usize,
}
impl<T: Real> Backward<T> for EmbedBatchOp {
    fn name(&self) -> &'static str {
        "embed_batch"
    }
    fn backward(&self, inputs: &[Var<T>], _: &Var<T>, g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        Ok(vec![Some(slice_batch(g, self.start, inputs[0].shape()[0])?)])
    }
}

/// Places `a` at samples `[start, start + n)` of a zero tensor with `total` samples.
pub fn embed_batch<T: Real>(a: &Var<T>, start: usize, total: usize) -> Result<Var<T>> {
    let n = a.shape()[0];
    if start + n > total {
        return Err(DfgError::shape("embed_batch out of range"));
    }
    let s = a.value().sample_len();
    let mut shape = a.shape().to_vec();
    shape[0] = total;
    let mut v = vec![T::zero(); total * s];
    v[start * s..(start + n) * s].copy_from_slice(a.value().data());
    Ok(Var::from_op(Tensor::new(&shape, v)?, EmbedBatchOp { start }, vec![a.clone()]))
}

struct GatherOp {
    indices: std::rc::Rc<Vec<usize>>,
    in_shape: Vec<usize>,
}
impl<T: Real> Backward<T> for GatherOp {
    fn name(&self) -> &'static str {
        "gather"
    }
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        Ok(vec![Some(scatter_add(g, &self.indices, &self.in_shape)?)])
    }
}

fn gather<T: Real>(a: &Var<T>, indices: std::rc::Rc<Vec<usize>>, out_shape: &[usize]) -> Result<Var<T>> {
    let src = a.value().data();
    let v: Vec<T> = indices.iter().map(|&i| src[i]).collect();
    Ok(Var::from_op(
        Tensor::new(out_shape, v)?,
        GatherOp {
            indices,
            in_shape: a.shape().to_vec(),
        },
        vec![a.clone()],
    ))
}

struct ScatterAddOp {
    indices: std::rc::Rc<Vec<usize>>,
}
impl<T: Real> Backward<T> for ScatterAddOp {
    fn name(&self) -> &'static str {
        "scatter_add"
    }
    fn backward(&self, inputs: &[Var<T>], _: &Var<T>, g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        Ok(vec![Some(gather(g, self.indices.clone(), inputs[0].shape())?)])
    }
}

fn scatter_add<T: Real>(a: &Var<T>, indices: &std::rc::Rc<Vec<usize>>, out_shape: &[usize]) -> Result<Var<T>> {
    let mut v = vec![T::zero(); out_shape.iter().product()];
    for (&i, &x) in indices.iter().zip(a.value().data()) {
        v[i] = v[i] + x;
    }
    Ok(Var::from_op(
        Tensor::new(out_shape, v)?,
        ScatterAddOp {
            indices: indices.clone(),
        },
        vec![a.clone()],
    ))
}

/// Max pooling over `k x k` windows; gradient flows to the first maximal
/// element of each window.
pub fn maxpool2d<T: Real>(a: &Var<T>, k: usize, stride: usize) -> Result<Var<T>> {
    let (idx, shape) = kernels::maxpool_argmax(a.value(), k, stride)?;
    gather(a, std::rc::Rc::new(idx), &shape)
}

// ---------------------------------------------------------------------------
// Linear algebra and convolution

struct MatMulOp {
    ta: bool,
    tb: bool,
}
impl<T: Real> Backward<T> for MatMulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, inputs: &[Var<T>], _: &Var<T>, g: &Var<T>, needs: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        let ga = if !needs[0] {
            None
        } else {
            Some(match (self.ta, self.tb) {
                (false, false) => matmul(g, b, false, true)?,
                (false, true) => matmul(g, b, false, false)?,
                (true, false) => matmul(b, g, false, true)?,
                (true, true) => matmul(b, g, true, true)?,
            })
        };
        let gb = if !needs[1] {
            None
        } else {
            Some(match (self.ta, self.tb) {
                (false, false) => matmul(a, g, true, false)?,
                (false, true) => matmul(g, a, true, false)?,
                (true, false) => matmul(a, g, false, false)?,
                (true, true) => matmul(g, a, true, true)?,
            })
        };
        Ok(vec![ga, gb])
    }
}

/// `op(a) @ op(b)` where `op` transposes when the corresponding flag is set.
pub fn matmul<T: Real>(a: &Var<T>, b: &Var<T>, trans_a: bool, trans_b: bool) -> Result<Var<T>> {
    let v = kernels::matmul(a.value(), b.value(), trans_a, trans_b)?;
    Ok(Var::from_op(
        v,
        MatMulOp {
            ta: trans_a,
            tb: trans_b,
        },
        vec![a.clone(), b.clone()],
    ))
}

/// Dense layer: `x @ w^T + b` with `w: [out, in]`, `b: [out]`.
pub fn linear<T: Real>(x: &Var<T>, w: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    bias_add(&matmul(x, w, false, true)?, b)
}

struct Conv2dOp {
    stride: usize,
    pad: usize,
}
impl<T: Real> Backward<T> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn backward(&self, inputs: &[Var<T>], _: &Var<T>, g: &Var<T>, needs: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        let (x, w) = (&inputs[0], &inputs[1]);
        let gx = if needs[0] {
            let hw = (x.shape()[2], x.shape()[3]);
            Some(conv_transpose2d_to(g, w, self.stride, self.pad, hw)?)
        } else {
            None
        };
        let gw = if needs[1] {
            let k = (w.shape()[2], w.shape()[3]);
            Some(conv2d_weight_grad(x, g, self.stride, self.pad, k)?)
        } else {
            None
        };
        Ok(vec![gx, gw])
    }
}

/// 2-D cross-correlation of NCHW `x` with `w: [c_out, c_in, kh, kw]`.
pub fn conv2d<T: Real>(x: &Var<T>, w: &Var<T>, stride: usize, pad: usize) -> Result<Var<T>> {
    let v = kernels::conv2d_forward(x.value(), w.value(), stride, pad)?;
    Ok(Var::from_op(v, Conv2dOp { stride, pad }, vec![x.clone(), w.clone()]))
}

struct ConvTransposeOp {
    stride: usize,
    pad: usize,
}
impl<T: Real> Backward<T> for ConvTransposeOp {
    fn name(&self) -> &'static str {
        "conv_transpose2d"
    }
    fn backward(&self, inputs: &[Var<T>], _: &Var<T>, g: &Var<T>, needs: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        let (y, w) = (&inputs[0], &inputs[1]);
        let gy = if needs[0] {
            Some(conv2d(g, w, self.stride, self.pad)?)
        } else {
            None
        };
        let gw = if needs[1] {
            let k = (w.shape()[2], w.shape()[3]);
            Some(conv2d_weight_grad(g, y, self.stride, self.pad, k)?)
        } else {
            None
        };
        Ok(vec![gy, gw])
    }
}

/// Adjoint of [`conv2d`] with an explicit output extent.
///
/// `w` has the convolution layout `[c_out, c_in, kh, kw]` of the forward conv
/// it transposes; as a layer this is `[in_channels, out_channels, kh, kw]`.
pub fn conv_transpose2d_to<T: Real>(
    y: &Var<T>,
    w: &Var<T>,
    stride: usize,
    pad: usize,
    out_hw: (usize, usize),
) -> Result<Var<T>> {
    let v = kernels::conv2d_input_grad(y.value(), w.value(), stride, pad, out_hw)?;
    Ok(Var::from_op(
        v,
        ConvTransposeOp { stride, pad },
        vec![y.clone(), w.clone()],
    ))
}

/// Transposed convolution with output extent `(in - 1) * stride + k - 2 * pad`.
pub fn conv_transpose2d<T: Real>(y: &Var<T>, w: &Var<T>, stride: usize, pad: usize) -> Result<Var<T>> {
    if y.value().rank() != 4 || w.value().rank() != 4 {
        return Err(DfgError::shape(format!(
            "transposed conv expects rank-4 input and weight, got {:?} and {:?}",
            y.shape(),
            w.shape()
        )));
    }
    let h = kernels::transposed_out_extent(y.shape()[2], w.shape()[2], stride, pad)?;
    let wd = kernels::transposed_out_extent(y.shape()[3], w.shape()[3], stride, pad)?;
    conv_transpose2d_to(y, w, stride, pad, (h, wd))
}

struct ConvWeightGradOp {
    stride: usize,
    pad: usize,
}
impl<T: Real> Backward<T> for ConvWeightGradOp {
    fn name(&self) -> &'static str {
        "conv2d_weight_grad"
    }
    fn backward(&self, inputs: &[Var<T>], _: &Var<T>, g: &Var<T>, needs: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        let (x, dy) = (&inputs[0], &inputs[1]);
        let gx = if needs[0] {
            let hw = (x.shape()[2], x.shape()[3]);
            Some(conv_transpose2d_to(dy, g, self.stride, self.pad, hw)?)
        } else {
            None
        };
        let gdy = if needs[1] {
            Some(conv2d(x, g, self.stride, self.pad)?)
        } else {
            None
        };
        Ok(vec![gx, gdy])
    }
}

/// Weight gradient of [`conv2d`], bilinear in `x` and `dy`.
pub fn conv2d_weight_grad<T: Real>(
    x: &Var<T>,
    dy: &Var<T>,
    stride: usize,
    pad: usize,
    kernel: (usize, usize),
) -> Result<Var<T>> {
    let v = kernels::conv2d_weight_grad(x.value(), dy.value(), stride, pad, kernel)?;
    Ok(Var::from_op(
        v,
        ConvWeightGradOp { stride, pad },
        vec![x.clone(), dy.clone()],
    ))
}

/// Shape check used by layers before building a convolution.
pub fn conv_output_shape(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<[usize; 4]> {
    Ok(ConvGeometry::forward(x, w, stride, pad)?.output_shape())
}

// ---------------------------------------------------------------------------
// First-order-only fused ops

/// Statistics source for batch normalization.
#[derive(Clone, Debug)]
pub enum NormStats<T> {
    /// Normalize with statistics of the current batch.
    Batch,
    /// Normalize with fixed (running) statistics.
    Fixed { mean: Vec<T>, var: Vec<T> },
}

struct BatchNormOp<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}
impl<T: Real> Backward<T> for BatchNormOp<T> {
    fn name(&self) -> &'static str {
        "batch_norm"
    }
    fn twice_differentiable(&self) -> bool {
        false
    }
    fn backward(&self, inputs: &[Var<T>], _: &Var<T>, g: &Var<T>, needs: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        let s = g.shape();
        let (n, c) = (s[0], s[1]);
        let p: usize = s[2..].iter().product();
        let m = T::lit((n * p) as f64);
        let gd = g.value().data();
        let xh = self.xhat.data();
        let gamma = inputs[1].value().data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * p;
                for i in off..off + p {
                    dbeta[ci] = dbeta[ci] + gd[i];
                    dgamma[ci] = dgamma[ci] + gd[i] * xh[i];
                }
            }
        }
        let gx = if needs[0] {
            let mut dx = vec![T::zero(); gd.len()];
            for ni in 0..n {
                for ci in 0..c {
                    let off = (ni * c + ci) * p;
                    let k = gamma[ci] * self.inv_std[ci];
                    for i in off..off + p {
                        dx[i] = if self.batch_stats {
                            k * (gd[i] - dbeta[ci] / m - xh[i] * dgamma[ci] / m)
                        } else {
                            k * gd[i]
                        };
                    }
                }
            }
            Some(Var::constant(Tensor::new(s, dx)?))
        } else {
            None
        };
        let gg = needs[1].then(|| Var::constant(Tensor::new(&[c], dgamma).expect("c > 0")));
        let gb = needs[2].then(|| Var::constant(Tensor::new(&[c], dbeta).expect("c > 0")));
        Ok(vec![gx, gg, gb])
    }
}

/// Output of [`batch_norm`]: the normalized tensor and the batch statistics
/// (biased variance) used, for running-average updates.
pub struct BatchNormOutput<T: Real> {
    pub output: Var<T>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// Per-channel normalization over (N, H, W) followed by `gamma * xhat + beta`.
pub fn batch_norm<T: Real>(
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    stats: &NormStats<T>,
    eps: f64,
) -> Result<BatchNormOutput<T>> {
    let s = x.shape().to_vec();
    if s.len() < 2 || gamma.shape() != [s[1]] || beta.shape() != [s[1]] {
        return Err(DfgError::shape(format!(
            "batch_norm input {s:?} with affine params {:?}/{:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let (n, c) = (s[0], s[1]);
    let p: usize = s[2..].iter().product();
    let (mean, var, batch_stats) = match stats {
        NormStats::Batch => {
            let (m, v) = kernels::channel_moments(x.value());
            (m, v, true)
        }
        NormStats::Fixed { mean, var } => {
            if mean.len() != c || var.len() != c {
                return Err(DfgError::shape("running statistics length mismatch"));
            }
            (mean.clone(), var.clone(), false)
        }
    };
    let e = T::lit(eps);
    let inv_std: Vec<T> = var.iter().map(|&v| (v + e).sqrt().recip()).collect();
    let xd = x.value().data();
    let (gd, bd) = (gamma.value().data(), beta.value().data());
    let mut xhat = vec![T::zero(); xd.len()];
    let mut y = vec![T::zero(); xd.len()];
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * p;
            for i in off..off + p {
                xhat[i] = (xd[i] - mean[ci]) * inv_std[ci];
                y[i] = gd[ci] * xhat[i] + bd[ci];
            }
        }
    }
    let op = BatchNormOp {
        xhat: Tensor::new(&s, xhat)?,
        inv_std,
        batch_stats,
    };
    Ok(BatchNormOutput {
        output: Var::from_op(
            Tensor::new(&s, y)?,
            op,
            vec![x.clone(), gamma.clone(), beta.clone()],
        ),
        batch_mean: mean,
        batch_var: var,
    })
}

struct CrossEntropyOp<T> {
    probs: Tensor<T>,
    labels: Vec<usize>,
}
impl<T: Real> Backward<T> for CrossEntropyOp<T> {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }
    fn twice_differentiable(&self) -> bool {
        false
    }
    fn backward(&self, _: &[Var<T>], _: &Var<T>, g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        let k = self.probs.shape()[1];
        let n = self.labels.len();
        let scale = g.item() / T::lit(n as f64);
        let mut d = self.probs.data().to_vec();
        for (row, &y) in d.chunks_mut(k).zip(&self.labels) {
            row[y] = row[y] - T::one();
            for v in row.iter_mut() {
                *v = *v * scale;
            }
        }
        Ok(vec![Some(Var::constant(Tensor::new(self.probs.shape(), d)?))])
    }
}

/// Mean softmax cross-entropy of `[n, k]` logits against integer labels.
pub fn cross_entropy<T: Real>(logits: &Var<T>, labels: &[usize]) -> Result<Var<T>> {
    let rows = kernels::cross_entropy_rows(logits.value(), labels)?;
    let n = T::lit(labels.len() as f64);
    let loss = rows.into_iter().sum::<T>() / n;
    let probs = kernels::softmax_rows(logits.value())?;
    Ok(Var::from_op(
        Tensor::scalar(loss),
        CrossEntropyOp {
            probs,
            labels: labels.to_vec(),
        },
        vec![logits.clone()],
    ))
}

struct AdaptiveAvgPoolOp;
impl<T: Real> Backward<T> for AdaptiveAvgPoolOp {
    fn name(&self) -> &'static str {
        "adaptive_avg_pool2d"
    }
    fn twice_differentiable(&self) -> bool {
        false
    }
    fn backward(&self, inputs: &[Var<T>], _: &Var<T>, g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        let dx = kernels::adaptive_avg_pool_backward(g.value(), inputs[0].shape())?;
        Ok(vec![Some(Var::constant(dx))])
    }
}

pub fn adaptive_avg_pool2d<T: Real>(x: &Var<T>, out_hw: (usize, usize)) -> Result<Var<T>> {
    let v = kernels::adaptive_avg_pool(x.value(), out_hw)?;
    Ok(Var::from_op(v, AdaptiveAvgPoolOp, vec![x.clone()]))
}

struct SoftmaxOp;
impl<T: Real> Backward<T> for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn twice_differentiable(&self) -> bool {
        false
    }
    fn backward(&self, _: &[Var<T>], out: &Var<T>, g: &Var<T>, _: &[bool]) -> Result<Vec<Option<Var<T>>>> {
        let p = out.value();
        let k = p.shape()[1];
        let mut d = Vec::with_capacity(p.numel());
        for (pr, gr) in p.data().chunks(k).zip(g.value().data().chunks(k)) {
            let dot: T = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
            d.extend(pr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
        }
        Ok(vec![Some(Var::constant(Tensor::new(p.shape(), d)?))])
    }
}

/// Row-wise softmax of `[n, k]` logits.
pub fn softmax<T: Real>(x: &Var<T>) -> Result<Var<T>> {
    Ok(Var::from_op(kernels::softmax_rows(x.value())?, SoftmaxOp, vec![x.clone()]))
}
