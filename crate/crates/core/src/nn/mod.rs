//! Layer primitives over [`Var`] and parameter initialisation.

mod init;

use serde::{Deserialize, Serialize};

pub use init::{init_parameters, init_tensor, InitScheme};

use crate::error::{DfgError, Result};
use crate::tensor::ops::{self, NormStats};
use crate::tensor::{Real, Tensor, Var};

/// Leaky-rectifier slope used by the generator and critic.
pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "fn", rename_all = "snake_case", deny_unknown_fields)]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f64 },
    Tanh,
    /// Softmax over the class axis of a `[n, k]` tensor.
    Softmax,
}

impl Activation {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "relu" => Ok(Activation::Relu),
            "leaky_relu" | "lrelu" => Ok(Activation::LeakyRelu { slope: LEAKY_SLOPE }),
            "tanh" => Ok(Activation::Tanh),
            "softmax" => Ok(Activation::Softmax),
            other => Err(DfgError::invalid(format!("unknown activation `{other}`"))),
        }
    }
}

pub fn activation<T: Real>(x: &Var<T>, kind: Activation) -> Result<Var<T>> {
    Ok(match kind {
        Activation::Relu => ops::relu(x),
        Activation::LeakyRelu { slope } => ops::leaky_relu(x, slope),
        Activation::Tanh => ops::tanh(x),
        Activation::Softmax => {
            if x.value().rank() != 2 {
                return Err(DfgError::shape(format!(
                    "softmax expects [n, classes], got {:?}",
                    x.shape()
                )));
            }
            ops::softmax(x)?
        }
    })
}

pub struct Conv2dParams<T: Real> {
    /// `[c_out, c_in, k_h, k_w]`
    pub weight: Var<T>,
    /// `[c_out]`
    pub bias: Var<T>,
    pub stride: usize,
    pub padding: usize,
}

pub fn conv2d_forward<T: Real>(input: &Var<T>, p: &Conv2dParams<T>) -> Result<Var<T>> {
    if p.weight.value().rank() != 4 || p.bias.shape() != [p.weight.shape()[0]] {
        return Err(DfgError::shape(format!(
            "conv params weight {:?} bias {:?}",
            p.weight.shape(),
            p.bias.shape()
        )));
    }
    ops::bias_add(&ops::conv2d(input, &p.weight, p.stride, p.padding)?, &p.bias)
}

pub struct TransposedConv2dParams<T: Real> {
    /// `[c_in, c_out, k_h, k_w]`
    pub weight: Var<T>,
    /// `[c_out]`
    pub bias: Var<T>,
    pub stride: usize,
    pub padding: usize,
}

pub fn transposed_conv2d_forward<T: Real>(
    input: &Var<T>,
    p: &TransposedConv2dParams<T>,
) -> Result<Var<T>> {
    if p.weight.value().rank() != 4 || p.bias.shape() != [p.weight.shape()[1]] {
        return Err(DfgError::shape(format!(
            "transposed conv params weight {:?} bias {:?}",
            p.weight.shape(),
            p.bias.shape()
        )));
    }
    ops::bias_add(
        &ops::conv_transpose2d(input, &p.weight, p.stride, p.padding)?,
        &p.bias,
    )
}

pub struct DenseParams<T: Real> {
    /// `[out, in]`
    pub weight: Var<T>,
    /// `[out]`
    pub bias: Var<T>,
}

pub fn dense_forward<T: Real>(input: &Var<T>, p: &DenseParams<T>) -> Result<Var<T>> {
    let x = if input.value().rank() == 2 {
        input.clone()
    } else {
        ops::flatten(input)?
    };
    ops::linear(&x, &p.weight, &p.bias)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel batch-norm state. `scale`/`shift` are the affine parameters.
pub struct BatchNormState<'a, T: Real> {
    pub scale: Var<T>,
    pub shift: Var<T>,
    pub running_mean: &'a mut [T],
    pub running_var: &'a mut [T],
    pub momentum: f64,
    pub eps: f64,
    pub mode: Mode,
}

/// Train mode normalizes with batch statistics and folds them into the
/// running averages (unbiased variance); eval mode uses the running values.
pub fn batchnorm_forward<T: Real>(input: &Var<T>, s: &mut BatchNormState<'_, T>) -> Result<Var<T>> {
    let c = s.running_mean.len();
    if input.value().rank() < 2 || input.shape()[1] != c || s.running_var.len() != c {
        return Err(DfgError::shape(format!(
            "batch norm over {c} channels applied to {:?}",
            input.shape()
        )));
    }
    match s.mode {
        Mode::Train => {
            let out = ops::batch_norm(input, &s.scale, &s.shift, &NormStats::Batch, s.eps)?;
            let count = input.value().numel() / c;
            let unbias = if count > 1 {
                count as f64 / (count - 1) as f64
            } else {
                1.0
            };
            let mom = T::lit(s.momentum);
            let keep = T::one() - mom;
            for ci in 0..c {
                s.running_mean[ci] = keep * s.running_mean[ci] + mom * out.batch_mean[ci];
                s.running_var[ci] =
                    keep * s.running_var[ci] + mom * out.batch_var[ci] * T::lit(unbias);
            }
            Ok(out.output)
        }
        Mode::Eval => {
            let stats = NormStats::Fixed {
                mean: s.running_mean.to_vec(),
                var: s.running_var.to_vec(),
            };
            Ok(ops::batch_norm(input, &s.scale, &s.shift, &stats, s.eps)?.output)
        }
    }
}

pub fn maxpool2d<T: Real>(input: &Var<T>, k: usize, stride: usize) -> Result<Var<T>> {
    ops::maxpool2d(input, k, stride)
}

/// Multiplies channel `j` of sample `i` by `weights[labels[i], j]`.
///
/// `weights` is a constant `[n_classes, channels]` matrix; no gradient flows
/// into it, and masked (zero) entries block gradient to the channel.
pub fn apply_class_weights<T: Real>(
    x: &Var<T>,
    weights: &Tensor<T>,
    labels: &[usize],
) -> Result<Var<T>> {
    let s = x.shape();
    if s.len() < 2 || weights.rank() != 2 || weights.shape()[1] != s[1] {
        return Err(DfgError::shape(format!(
            "class weights {:?} do not match features {s:?}",
            weights.shape()
        )));
    }
    if labels.len() != s[0] {
        return Err(DfgError::shape(format!(
            "{} labels for a batch of {}",
            labels.len(),
            s[0]
        )));
    }
    let (n_l, c) = (weights.shape()[0], s[1]);
    let p: usize = s[2..].iter().product();
    let mut mask = Vec::with_capacity(x.value().numel());
    for &y in labels {
        if y >= n_l {
            return Err(DfgError::invalid(format!(
                "label {y} out of range for {n_l} classes"
            )));
        }
        for j in 0..c {
            mask.extend(std::iter::repeat_n(weights.data()[y * c + j], p));
        }
    }
    ops::mul_const(x, &Tensor::new(s, mask)?)
}

/// One-hot rows `[n, n_classes]`.
pub fn one_hot<T: Real>(labels: &[usize], n_classes: usize) -> Result<Tensor<T>> {
    let mut v = vec![T::zero(); labels.len() * n_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= n_classes {
            return Err(DfgError::invalid(format!(
                "label {y} out of range for {n_classes} classes"
            )));
        }
        v[i * n_classes + y] = T::one();
    }
    Tensor::new(&[labels.len(), n_classes], v)
}

#[cfg(test)]
mod tests;
