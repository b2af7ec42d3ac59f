use std::ops::Range;

use super::spec::{LayerSpec, NetworkSpec, ParamSlot};
use crate::error::{DfgError, Result};
use crate::nn::{self, BatchNormState, InitScheme, Mode, BN_EPS, BN_MOMENTUM};
use crate::tensor::{ops, Gradients, Real, Tensor, Var};

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Per-call inputs that are not tensors flowing through the layers.
#[derive(Clone, Copy)]
pub struct ForwardCtx<'a, T> {
    pub mode: Mode,
    /// Sample labels, required by `ConcatLabel` and `ClassWeight` layers.
    pub labels: Option<&'a [usize]>,
    /// `[n_classes, channels]` multipliers for `ClassWeight`; identity when absent.
    pub class_weights: Option<&'a Tensor<T>>,
}

impl<'a, T> ForwardCtx<'a, T> {
    pub fn train() -> Self {
        ForwardCtx {
            mode: Mode::Train,
            labels: None,
            class_weights: None,
        }
    }

    pub fn eval() -> Self {
        ForwardCtx {
            mode: Mode::Eval,
            labels: None,
            class_weights: None,
        }
    }

    pub fn with_labels(mut self, labels: &'a [usize]) -> Self {
        self.labels = Some(labels);
        self
    }

    pub fn with_class_weights(mut self, weights: Option<&'a Tensor<T>>) -> Self {
        self.class_weights = weights;
        self
    }
}

/// Parameters of a network lifted into graph leaves for one forward pass.
pub struct BoundParams<T: Real> {
    pub vars: Vec<Var<T>>,
}

impl<T: Real> BoundParams<T> {
    /// Gradient tensors in slot order (zeros for unreached parameters).
    pub fn grads(&self, g: &Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|v| g.get_or_zeros(v)).collect()
    }
}

/// A sequential network: spec, parameters and batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct Network<T: Real> {
    spec: NetworkSpec,
    slots: Vec<ParamSlot>,
    params: Vec<Tensor<T>>,
    layer_params: Vec<Range<usize>>,
    running: Vec<Option<RunningStats<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Network<T> {
    pub fn new(spec: NetworkSpec, scheme: InitScheme, seed: u64) -> Result<Self> {
        let params = nn::init_parameters(&spec, scheme, seed)?;
        Self::from_params(spec, params)
    }

    pub fn from_params(spec: NetworkSpec, params: Vec<Tensor<T>>) -> Result<Self> {
        spec.validate()?;
        let slots = spec.param_slots()?;
        if slots.len() != params.len() {
            return Err(DfgError::shape(format!(
                "{}: expected {} parameter tensors, got {}",
                spec.name,
                slots.len(),
                params.len()
            )));
        }
        for (slot, p) in slots.iter().zip(&params) {
            if slot.shape != p.shape() {
                return Err(DfgError::shape(format!(
                    "{}: parameter {} has shape {:?}, expected {:?}",
                    spec.name,
                    slot.name,
                    p.shape(),
                    slot.shape
                )));
            }
        }
        let shapes = spec.layer_shapes()?;
        let mut layer_params = Vec::with_capacity(spec.layers.len());
        let mut running = Vec::with_capacity(spec.layers.len());
        let mut cursor = 0;
        for (i, layer) in spec.layers.iter().enumerate() {
            let count = slots[cursor..].iter().take_while(|s| s.layer == i).count();
            layer_params.push(cursor..cursor + count);
            cursor += count;
            running.push(match layer {
                LayerSpec::BatchNorm { .. } => {
                    let c = shapes[i][0];
                    Some(RunningStats {
                        mean: vec![T::zero(); c],
                        var: vec![T::one(); c],
                    })
                }
                _ => None,
            });
        }
        Ok(Network {
            spec,
            slots,
            params,
            layer_params,
            running,
            shapes,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    /// Parameter tensors owned by layer `layer`.
    pub fn layer_param_range(&self, layer: usize) -> Range<usize> {
        self.layer_params[layer].clone()
    }

    pub fn running_stats(&self) -> impl Iterator<Item = (usize, &RunningStats<T>)> {
        self.running
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.as_ref().map(|r| (i, r)))
    }

    pub fn running_stats_mut(&mut self, layer: usize) -> Option<&mut RunningStats<T>> {
        self.running.get_mut(layer).and_then(Option::as_mut)
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes
            .last()
            .map(Vec::as_slice)
            .unwrap_or(&self.spec.input_shape)
    }

    /// Output shape of layer `i` (per sample).
    pub fn layer_output_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn num_layers(&self) -> usize {
        self.spec.layers.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Lifts parameters into graph leaves; `trainable` decides whether they
    /// receive gradients.
    pub fn bind(&self, trainable: bool) -> BoundParams<T> {
        BoundParams {
            vars: self
                .params
                .iter()
                .map(|p| Var::leaf(p.clone(), trainable))
                .collect(),
        }
    }

    pub fn forward(&mut self, x: &Var<T>, params: &BoundParams<T>, ctx: &ForwardCtx<'_, T>) -> Result<Var<T>> {
        if x.value().rank() < 1 || x.shape()[1..] != self.spec.input_shape[..] {
            return Err(DfgError::shape(format!(
                "{}: input {:?} does not match [n, {:?}]",
                self.spec.name,
                x.shape(),
                self.spec.input_shape
            )));
        }
        self.forward_layers(x, params, ctx, 0..self.num_layers())
    }

    /// Runs layers `range` only; `x` must have that range's input shape.
    pub fn forward_layers(
        &mut self,
        x: &Var<T>,
        params: &BoundParams<T>,
        ctx: &ForwardCtx<'_, T>,
        range: Range<usize>,
    ) -> Result<Var<T>> {
        if params.vars.len() != self.params.len() {
            return Err(DfgError::shape(format!(
                "{}: bound {} parameters, network has {}",
                self.spec.name,
                params.vars.len(),
                self.params.len()
            )));
        }
        let mut h = x.clone();
        for i in range {
            h = self.layer_forward(i, &h, &params.vars[self.layer_params[i].clone()], ctx)?;
        }
        Ok(h)
    }

    fn layer_forward(
        &mut self,
        i: usize,
        x: &Var<T>,
        p: &[Var<T>],
        ctx: &ForwardCtx<'_, T>,
    ) -> Result<Var<T>> {
        let n = x.shape()[0];
        match &self.spec.layers[i] {
            LayerSpec::Conv {
                stride, padding, ..
            } => nn::conv2d_forward(
                x,
                &nn::Conv2dParams {
                    weight: p[0].clone(),
                    bias: p[1].clone(),
                    stride: *stride,
                    padding: *padding,
                },
            ),
            LayerSpec::Deconv {
                stride, padding, ..
            } => nn::transposed_conv2d_forward(
                x,
                &nn::TransposedConv2dParams {
                    weight: p[0].clone(),
                    bias: p[1].clone(),
                    stride: *stride,
                    padding: *padding,
                },
            ),
            LayerSpec::Dense { .. } => nn::dense_forward(
                x,
                &nn::DenseParams {
                    weight: p[0].clone(),
                    bias: p[1].clone(),
                },
            ),
            LayerSpec::BatchNorm { affine } => {
                let c = x.shape()[1];
                let (scale, shift) = if *affine {
                    (p[0].clone(), p[1].clone())
                } else {
                    (
                        Var::constant(Tensor::ones(&[c])),
                        Var::constant(Tensor::zeros(&[c])),
                    )
                };
                let stats = self.running[i].as_mut().expect("batch norm layer has stats");
                let mut state = BatchNormState {
                    scale,
                    shift,
                    running_mean: &mut stats.mean,
                    running_var: &mut stats.var,
                    momentum: BN_MOMENTUM,
                    eps: BN_EPS,
                    mode: ctx.mode,
                };
                nn::batchnorm_forward(x, &mut state)
            }
            LayerSpec::MaxPool { kernel, stride } => nn::maxpool2d(x, *kernel, *stride),
            LayerSpec::AdaptiveAvgPool { out_h, out_w } => {
                ops::adaptive_avg_pool2d(x, (*out_h, *out_w))
            }
            LayerSpec::Activation { activation } => nn::activation(x, *activation),
            LayerSpec::Flatten => ops::flatten(x),
            LayerSpec::Reshape { shape } => {
                let mut full = vec![n];
                full.extend_from_slice(shape);
                ops::reshape(x, &full)
            }
            LayerSpec::ConcatLabel { n_classes } => {
                let labels = ctx
                    .labels
                    .ok_or_else(|| DfgError::invalid("label concatenation needs labels"))?;
                concat_one_hot(x, labels, *n_classes)
            }
            LayerSpec::ClassWeight => match ctx.class_weights {
                Some(w) => {
                    let labels = ctx
                        .labels
                        .ok_or_else(|| DfgError::invalid("class weighting needs labels"))?;
                    nn::apply_class_weights(x, w, labels)
                }
                None => Ok(x.clone()),
            },
        }
    }

    /// Copies parameters and running statistics from `other` (same spec).
    pub fn copy_from(&mut self, other: &Network<T>) -> Result<()> {
        if self.spec != other.spec {
            return Err(DfgError::shape(format!(
                "cannot copy {} into {}",
                other.spec.name, self.spec.name
            )));
        }
        self.params = other.params.clone();
        self.running = other.running.clone();
        Ok(())
    }
}

/// `[x | onehot(labels)]` for flat `x: [n, f]`.
fn concat_one_hot<T: Real>(x: &Var<T>, labels: &[usize], n_classes: usize) -> Result<Var<T>> {
    if x.value().rank() != 2 || labels.len() != x.shape()[0] {
        return Err(DfgError::shape(format!(
            "label concatenation on {:?} with {} labels",
            x.shape(),
            labels.len()
        )));
    }
    let (n, f) = (x.shape()[0], x.shape()[1]);
    let width = f + n_classes;
    // x @ [I | 0] places x in the first f columns; the one-hot block is constant.
    let mut select = vec![T::zero(); f * width];
    for j in 0..f {
        select[j * width + j] = T::one();
    }
    let placed = ops::matmul(x, &Var::constant(Tensor::new(&[f, width], select)?), false, false)?;
    let mut tail = vec![T::zero(); n * width];
    for (i, &y) in labels.iter().enumerate() {
        if y >= n_classes {
            return Err(DfgError::invalid(format!(
                "label {y} out of range for {n_classes} classes"
            )));
        }
        tail[i * width + f + y] = T::one();
    }
    ops::add(&placed, &Var::constant(Tensor::new(&[n, width], tail)?))
}
