use super::network::{BoundParams, ForwardCtx, Network};
use super::spec::{LayerSpec, NetworkSpec};
use crate::error::{DfgError, Result};
use crate::nn::{Activation, InitScheme, Mode, LEAKY_SLOPE};
use crate::tensor::{no_grad, ops, Real, Tensor, Var};

fn lrelu() -> LayerSpec {
    LayerSpec::act(Activation::LeakyRelu { slope: LEAKY_SLOPE })
}

/// LeNet-5 feature extractor: conv 5x5 (6) + relu + 2x2 max pool.
pub fn lenet_extractor_spec(in_channels: usize) -> NetworkSpec {
    let mut spec = NetworkSpec::new(
        "extractor",
        vec![in_channels, 32, 32],
        vec![
            LayerSpec::conv(6, 5, 1, 0),
            LayerSpec::act(Activation::Relu),
            LayerSpec::MaxPool { kernel: 2, stride: 2 },
        ],
    );
    spec.output_shape = Some(vec![6, 14, 14]);
    spec
}

/// LeNet-5 classifier head on `[6, 14, 14]` features, ending in softmax.
pub fn lenet_classifier_spec(n_classes: usize) -> NetworkSpec {
    let mut spec = NetworkSpec::new(
        "classifier",
        vec![6, 14, 14],
        vec![
            LayerSpec::conv(16, 5, 1, 0),
            LayerSpec::act(Activation::Relu),
            LayerSpec::MaxPool { kernel: 2, stride: 2 },
            LayerSpec::Flatten,
            LayerSpec::dense(120),
            LayerSpec::act(Activation::Relu),
            LayerSpec::dense(84),
            LayerSpec::act(Activation::Relu),
            LayerSpec::dense(n_classes),
            LayerSpec::act(Activation::Softmax),
        ],
    );
    spec.output_shape = Some(vec![n_classes]);
    spec
}

/// Extractor and classifier sharing a feature shape.
#[derive(Clone, Debug)]
pub struct SplitModel<T: Real> {
    pub extractor: Network<T>,
    pub classifier: Network<T>,
}

impl<T: Real> SplitModel<T> {
    pub fn new(extractor: Network<T>, classifier: Network<T>) -> Result<Self> {
        if extractor.output_shape() != classifier.spec().input_shape.as_slice() {
            return Err(DfgError::shape(format!(
                "extractor emits {:?} but classifier expects {:?}",
                extractor.output_shape(),
                classifier.spec().input_shape
            )));
        }
        Ok(SplitModel {
            extractor,
            classifier,
        })
    }

    pub fn from_specs(
        extractor: NetworkSpec,
        classifier: NetworkSpec,
        scheme: InitScheme,
        seed: u64,
    ) -> Result<Self> {
        Self::new(
            Network::new(extractor, scheme, seed)?,
            Network::new(classifier, scheme, seed)?,
        )
    }

    pub fn feature_shape(&self) -> &[usize] {
        self.extractor.output_shape()
    }

    pub fn n_classes(&self) -> usize {
        self.classifier.output_shape()[0]
    }

    /// Layer count of the classifier without a trailing softmax.
    pub fn logit_layers(&self) -> usize {
        let n = self.classifier.num_layers();
        match self.classifier.spec().layers.last() {
            Some(LayerSpec::Activation {
                activation: Activation::Softmax,
            }) => n - 1,
            _ => n,
        }
    }

    /// Classifier logits for features `f`.
    pub fn classify(
        &mut self,
        f: &Var<T>,
        params: &BoundParams<T>,
        mode: Mode,
    ) -> Result<Var<T>> {
        let end = self.logit_layers();
        let ctx = ForwardCtx {
            mode,
            labels: None,
            class_weights: None,
        };
        self.classifier.forward_layers(f, params, &ctx, 0..end)
    }

    pub fn extract(&mut self, x: &Var<T>, params: &BoundParams<T>, mode: Mode) -> Result<Var<T>> {
        let ctx = ForwardCtx {
            mode,
            labels: None,
            class_weights: None,
        };
        self.extractor.forward(x, params, &ctx)
    }

    /// Class logits for a batch of images, without recording a graph.
    pub fn logits(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let _guard = no_grad();
        let pe = self.extractor.bind(false);
        let pc = self.classifier.bind(false);
        let f = self.extract(&Var::constant(x.clone()), &pe, mode)?;
        Ok(self.classify(&f, &pc, mode)?.value().clone())
    }

    /// Class probabilities (full forward including softmax).
    pub fn predict_proba(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let logits = self.logits(x, mode)?;
        let _guard = no_grad();
        Ok(ops::softmax(&Var::constant(logits))?.value().clone())
    }
}

/// Randomly initialised LeNet split (He initialisation).
pub fn build_lenet_split<T: Real>(in_channels: usize, n_classes: usize, seed: u64) -> Result<SplitModel<T>> {
    SplitModel::from_specs(
        lenet_extractor_spec(in_channels),
        lenet_classifier_spec(n_classes),
        InitScheme::He,
        seed,
    )
}

/// Conditional feature generator and critic for a given feature shape.
///
/// Supported shapes are `[6, 14, 14]` (LeNet split) and `[64, 16, 16]`
/// (VGG split). Other architectures are declared directly in the run config.
pub fn build_dcgan_pair(
    feature_shape: &[usize],
    n_classes: usize,
    z_dim: usize,
) -> Result<(NetworkSpec, NetworkSpec)> {
    let bn = LayerSpec::batch_norm;
    let head = vec![
        LayerSpec::ConcatLabel { n_classes },
        LayerSpec::dense(4 * 4 * 128),
        LayerSpec::Reshape {
            shape: vec![128, 4, 4],
        },
        bn(),
    ];
    let body = match feature_shape {
        [6, 14, 14] => vec![
            LayerSpec::deconv(48, 3, 2, 0),
            lrelu(),
            bn(),
            LayerSpec::deconv(12, 3, 1, 0),
            lrelu(),
            bn(),
            LayerSpec::deconv(6, 4, 1, 0),
        ],
        [64, 16, 16] => vec![
            LayerSpec::deconv(128, 4, 2, 1),
            lrelu(),
            bn(),
            LayerSpec::deconv(128, 4, 2, 1),
            lrelu(),
            bn(),
            LayerSpec::deconv(64, 4, 1, 1),
            lrelu(),
            bn(),
            // 17 -> 16 needs a shrinking layer: ordinary 4x4 conv, padding 1.
            LayerSpec::conv(64, 4, 1, 1),
        ],
        other => {
            return Err(DfgError::shape(format!(
                "no reference generator for feature shape {other:?}"
            )))
        }
    };
    let tail = vec![
        LayerSpec::act(Activation::Tanh),
        LayerSpec::ClassWeight,
        bn(),
    ];
    let mut generator = NetworkSpec::new(
        "generator",
        vec![z_dim],
        head.into_iter().chain(body).chain(tail).collect(),
    );
    generator.output_shape = Some(feature_shape.to_vec());

    let mut critic = NetworkSpec::new(
        "critic",
        feature_shape.to_vec(),
        vec![
            LayerSpec::conv(32, 5, 2, 2),
            lrelu(),
            LayerSpec::conv(64, 5, 2, 2),
            lrelu(),
            LayerSpec::conv(128, 5, 2, 2),
            lrelu(),
            LayerSpec::Flatten,
            LayerSpec::dense(512),
            LayerSpec::dense(1),
        ],
    );
    critic.output_shape = Some(vec![1]);
    generator.validate()?;
    critic.validate()?;
    Ok((generator, critic))
}
