use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DfgError, Result};
use crate::nn::Activation;
use crate::tensor::kernels::{conv_out_extent, transposed_out_extent};

fn default_true() -> bool {
    true
}

/// One layer of a sequential network. Shapes are per sample (no batch axis).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Deconv {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Dense {
        out_features: usize,
    },
    BatchNorm {
        #[serde(default = "default_true")]
        affine: bool,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    AdaptiveAvgPool {
        out_h: usize,
        out_w: usize,
    },
    Activation {
        activation: Activation,
    },
    Flatten,
    Reshape {
        shape: Vec<usize>,
    },
    /// Appends a one-hot encoding of the sample labels to a flat input.
    ConcatLabel {
        n_classes: usize,
    },
    /// Multiplies each channel by the class-wise filter weight of the sample's label.
    ClassWeight,
}

fn one() -> usize {
    1
}

impl LayerSpec {
    pub fn conv(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv {
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn deconv(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Deconv {
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn dense(out_features: usize) -> Self {
        LayerSpec::Dense { out_features }
    }

    pub fn act(activation: Activation) -> Self {
        LayerSpec::Activation { activation }
    }

    pub fn batch_norm() -> Self {
        LayerSpec::BatchNorm { affine: true }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. })
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let spatial = |what: &str| -> Result<(usize, usize, usize)> {
            if input.len() != 3 {
                return Err(DfgError::shape(format!(
                    "{what} expects a [c, h, w] input, got {input:?}"
                )));
            }
            Ok((input[0], input[1], input[2]))
        };
        Ok(match self {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let (_, h, w) = spatial("conv")?;
                if *stride == 0 {
                    return Err(DfgError::invalid("stride must be positive"));
                }
                vec![
                    *out_channels,
                    conv_out_extent(h, *kernel, *stride, *padding)?,
                    conv_out_extent(w, *kernel, *stride, *padding)?,
                ]
            }
            LayerSpec::Deconv {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let (_, h, w) = spatial("deconv")?;
                if *stride == 0 {
                    return Err(DfgError::invalid("stride must be positive"));
                }
                vec![
                    *out_channels,
                    transposed_out_extent(h, *kernel, *stride, *padding)?,
                    transposed_out_extent(w, *kernel, *stride, *padding)?,
                ]
            }
            LayerSpec::Dense { out_features } => vec![*out_features],
            LayerSpec::BatchNorm { .. } | LayerSpec::Activation { .. } | LayerSpec::ClassWeight => {
                input.to_vec()
            }
            LayerSpec::MaxPool { kernel, stride } => {
                let (c, h, w) = spatial("max pool")?;
                if *kernel > h || *kernel > w || *stride == 0 || *kernel == 0 {
                    return Err(DfgError::shape(format!(
                        "pool window {kernel} (stride {stride}) does not fit {input:?}"
                    )));
                }
                vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1]
            }
            LayerSpec::AdaptiveAvgPool { out_h, out_w } => {
                let (c, _, _) = spatial("adaptive pool")?;
                if *out_h == 0 || *out_w == 0 {
                    return Err(DfgError::invalid("adaptive pool output must be non-empty"));
                }
                vec![c, *out_h, *out_w]
            }
            LayerSpec::Flatten => vec![input.iter().product()],
            LayerSpec::Reshape { shape } => {
                if shape.iter().product::<usize>() != input.iter().product::<usize>() {
                    return Err(DfgError::shape(format!(
                        "cannot reshape {input:?} to {shape:?}"
                    )));
                }
                shape.clone()
            }
            LayerSpec::ConcatLabel { n_classes } => {
                if input.len() != 1 {
                    return Err(DfgError::shape(format!(
                        "label concatenation expects a flat input, got {input:?}"
                    )));
                }
                vec![input[0] + n_classes]
            }
        })
    }

    /// Parameter tensors of this layer given its input shape.
    pub fn params(&self, input: &[usize]) -> Vec<ParamInfo> {
        match self {
            LayerSpec::Conv {
                out_channels,
                kernel,
                ..
            } => {
                let c_in = input[0];
                vec![
                    ParamInfo::weight(
                        "weight",
                        vec![*out_channels, c_in, *kernel, *kernel],
                        c_in * kernel * kernel,
                        out_channels * kernel * kernel,
                    ),
                    ParamInfo::zeros("bias", vec![*out_channels]),
                ]
            }
            LayerSpec::Deconv {
                out_channels,
                kernel,
                ..
            } => {
                let c_in = input[0];
                vec![
                    // fan computed from axis 1, as for any [a, b, kh, kw] weight
                    ParamInfo::weight(
                        "weight",
                        vec![c_in, *out_channels, *kernel, *kernel],
                        out_channels * kernel * kernel,
                        c_in * kernel * kernel,
                    ),
                    ParamInfo::zeros("bias", vec![*out_channels]),
                ]
            }
            LayerSpec::Dense { out_features } => {
                let fan_in: usize = input.iter().product();
                vec![
                    ParamInfo::weight("weight", vec![*out_features, fan_in], fan_in, *out_features),
                    ParamInfo::zeros("bias", vec![*out_features]),
                ]
            }
            LayerSpec::BatchNorm { affine: true } => vec![
                ParamInfo {
                    name: "scale",
                    shape: vec![input[0]],
                    init: ParamInit::Ones,
                },
                ParamInfo::zeros("shift", vec![input[0]]),
            ],
            _ => Vec::new(),
        }
    }

    fn label(&self) -> String {
        match self {
            LayerSpec::Conv {
                kernel, stride, ..
            } => format!("Conv {kernel}x{kernel}, st = {stride}"),
            LayerSpec::Deconv {
                kernel, stride, ..
            } => format!("DeConv {kernel}x{kernel}, st = {stride}"),
            LayerSpec::Dense { .. } => "FC".into(),
            LayerSpec::BatchNorm { .. } => "BatchNorm".into(),
            LayerSpec::MaxPool { kernel, .. } => format!("Max Pooling {kernel}x{kernel}"),
            LayerSpec::AdaptiveAvgPool { .. } => "Adaptive Avg Pooling".into(),
            LayerSpec::Activation { activation } => format!("{activation:?}"),
            LayerSpec::Flatten => "Flatten".into(),
            LayerSpec::Reshape { .. } => "Reshape".into(),
            LayerSpec::ConcatLabel { .. } => "Concat label".into(),
            LayerSpec::ClassWeight => "Class weight".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamInit {
    /// Drawn from the initialisation scheme with the given fans.
    Scheme { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub init: ParamInit,
}

impl ParamInfo {
    fn weight(name: &'static str, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Self {
        ParamInfo {
            name,
            shape,
            init: ParamInit::Scheme { fan_in, fan_out },
        }
    }

    fn zeros(name: &'static str, shape: Vec<usize>) -> Self {
        ParamInfo {
            name,
            shape,
            init: ParamInit::Zeros,
        }
    }
}

/// Declarative sequential network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub name: String,
    /// Per-sample input shape, e.g. `[1, 32, 32]` or `[100]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    /// Declared output shape; checked against the computed one when present.
    #[serde(default)]
    pub output_shape: Option<Vec<usize>>,
}

/// Named parameter with its owning layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSlot {
    pub layer: usize,
    pub name: String,
    pub shape: Vec<usize>,
    pub init: ParamInit,
}

impl NetworkSpec {
    pub fn new(name: impl Into<String>, input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Self {
        NetworkSpec {
            name: name.into(),
            input_shape,
            layers,
            output_shape: None,
        }
    }

    /// Shape after each layer (`result[i]` is the output of layer `i`).
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(DfgError::shape(format!(
                "{}: invalid input shape {:?}",
                self.name, self.input_shape
            )));
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer.output_shape(&cur).map_err(|e| {
                DfgError::shape(format!("{} layer {i} ({}): {e}", self.name, layer.label()))
            })?;
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    /// Input shape of layer `i`.
    pub fn layer_input_shape(&self, i: usize) -> Result<Vec<usize>> {
        if i == 0 {
            return Ok(self.input_shape.clone());
        }
        Ok(self.layer_shapes()?.swap_remove(i - 1))
    }

    pub fn computed_output_shape(&self) -> Result<Vec<usize>> {
        Ok(self
            .layer_shapes()?
            .pop()
            .unwrap_or_else(|| self.input_shape.clone()))
    }

    /// Validates layer chaining and the declared output shape.
    pub fn validate(&self) -> Result<Vec<usize>> {
        let out = self.computed_output_shape()?;
        if let Some(declared) = &self.output_shape {
            if declared != &out {
                return Err(DfgError::shape(format!(
                    "{}: declared output {declared:?} but layers produce {out:?}",
                    self.name
                )));
            }
        }
        Ok(out)
    }

    pub fn param_slots(&self) -> Result<Vec<ParamSlot>> {
        let shapes = self.layer_shapes()?;
        let mut slots = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let input = if i == 0 { &self.input_shape } else { &shapes[i - 1] };
            for p in layer.params(input) {
                slots.push(ParamSlot {
                    layer: i,
                    name: format!("layer{i}.{}", p.name),
                    shape: p.shape,
                    init: p.init,
                });
            }
        }
        Ok(slots)
    }

    /// Index of the last convolution layer.
    pub fn last_conv_layer(&self) -> Option<usize> {
        self.layers.iter().rposition(LayerSpec::is_conv)
    }

    /// Human-readable layer table: `(label, output shape)` rows.
    pub fn describe(&self) -> Result<Vec<(String, Vec<usize>)>> {
        Ok(self
            .layers
            .iter()
            .zip(self.layer_shapes()?)
            .map(|(l, s)| (l.label(), s))
            .collect())
    }

    /// Stable digest of the architecture, used to validate checkpoints.
    pub fn digest(&self) -> [u8; 32] {
        let canonical = serde_json::to_vec(self).expect("spec serializes");
        Sha256::digest(&canonical).into()
    }
}

/// Combined digest of several specs, truncated to 64 bits.
pub fn specs_hash(specs: &[&NetworkSpec]) -> u64 {
    let mut h = Sha256::new();
    for s in specs {
        h.update(s.digest());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}
