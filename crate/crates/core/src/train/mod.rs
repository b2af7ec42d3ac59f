//! Optimizers, source pretraining, baselines and the DFG training loop.

mod baseline;
mod config;
mod dfg;
mod log;
mod optim;

pub use baseline::{baseline_train, BaselineOutcome};
pub use config::{TrainConfig, TrainMode};
pub use dfg::{dfg_train, DfgOutcome, DfgTrainer, GanSpecs, UpdateCounts};
pub use log::{read_log, write_log, LogRow, LogWriter};
pub use optim::{adam_step, sgd_momentum_step, AdamConfig, Optimizer, OptimizerKind, OptimizerState};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::arch::SplitModel;
use crate::data::{BatchSampler, TensorDataset};
use crate::error::{DfgError, Result};
use crate::nn::Mode;
use crate::rng::Rng;
use crate::tensor::{backward, ops, Real, Tensor, Var};

/// `z ~ U[-1, 1]^(m x z_dim)` and labels uniform over `n_classes`.
pub fn sample_noise_and_labels<T: Real>(
    m: usize,
    z_dim: usize,
    n_classes: usize,
    rng: &mut Rng,
) -> Result<(Tensor<T>, Vec<usize>)> {
    if m == 0 || n_classes == 0 {
        return Err(DfgError::invalid("noise batch needs m >= 1 and at least one class"));
    }
    let z = (0..m * z_dim)
        .map(|_| T::lit(rng.random_range(-1.0..=1.0)))
        .collect();
    let y = (0..m).map(|_| rng.random_range(0..n_classes)).collect();
    Ok((Tensor::new(&[m, z_dim], z)?, y))
}

/// `kappa * sum ||theta - theta_source||^2` over matching parameter lists.
pub fn startpoint_regularizer<T: Real>(
    params: &[Var<T>],
    source: &[Tensor<T>],
    kappa: f64,
) -> Result<Var<T>> {
    if params.len() != source.len() {
        return Err(DfgError::shape(format!(
            "{} parameters against {} source tensors",
            params.len(),
            source.len()
        )));
    }
    let mut total: Option<Var<T>> = None;
    for (p, s) in params.iter().zip(source) {
        p.value().expect_same_shape(s)?;
        let d = ops::sum(&ops::square(&ops::sub(p, &Var::constant(s.clone()))?)?);
        total = Some(match total {
            Some(t) => ops::add(&t, &d)?,
            None => d,
        });
    }
    let total = total.unwrap_or_else(|| Var::constant(Tensor::scalar(T::zero())));
    Ok(ops::scale(&total, kappa))
}

/// Anchor for the start-point regularizer.
pub struct Anchor<'a, T: Real> {
    pub params: &'a [Tensor<T>],
    pub kappa: f64,
}

/// One cross-entropy step on `(x, y)`. The extractor is updated only when
/// `opt_extractor` is given. An anchor regularizes the extractor when its
/// flag is set, the classifier otherwise.
pub(crate) fn supervised_step<T: Real>(
    model: &mut SplitModel<T>,
    x: &Tensor<T>,
    y: &[usize],
    opt_extractor: Option<&mut Optimizer<T>>,
    opt_classifier: &mut Optimizer<T>,
    anchor: Option<(&Anchor<'_, T>, bool)>,
) -> Result<f64> {
    let train_e = opt_extractor.is_some();
    let pe = model.extractor.bind(train_e);
    let pc = model.classifier.bind(true);
    let f = model.extract(&Var::constant(x.clone()), &pe, Mode::Train)?;
    let logits = model.classify(&f, &pc, Mode::Train)?;
    let ce = ops::cross_entropy(&logits, y)?;
    let value = ce.item().as_f64();
    if !value.is_finite() {
        return Err(DfgError::non_finite("cross-entropy"));
    }
    let loss = match anchor {
        Some((a, on_extractor)) if a.kappa > 0.0 => {
            let vars = if on_extractor { &pe.vars } else { &pc.vars };
            ops::add(&ce, &startpoint_regularizer(vars, a.params, a.kappa)?)?
        }
        _ => ce,
    };
    let g = backward(&loss)?;
    if let Some(opt) = opt_extractor {
        opt.step(model.extractor.params_mut(), &pe.grads(&g))?;
    }
    opt_classifier.step(model.classifier.params_mut(), &pc.grads(&g))?;
    Ok(value)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 5,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: usize,
    pub steps: usize,
    /// Training-set accuracy after the last epoch (eval mode).
    pub train_accuracy: f64,
    pub final_loss: Option<f64>,
}

/// Supervised cross-entropy training of both halves with Adam
/// (`beta1 = 0.9`, `beta2 = 0.999`).
pub fn pretrain_source<T: Real>(
    model: &mut SplitModel<T>,
    data: &TensorDataset<T>,
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    if data.n_classes > model.n_classes() {
        return Err(DfgError::shape(format!(
            "source data has {} classes, classifier head {}",
            data.n_classes,
            model.n_classes()
        )));
    }
    let adam = AdamConfig {
        lr: cfg.lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    let mut opt_e = Optimizer::adam(model.extractor.params(), adam);
    let mut opt_c = Optimizer::adam(model.classifier.params(), adam);
    let mut steps = 0;
    let mut last = None;
    if cfg.epochs > 0 {
        let mut sampler = BatchSampler::new(data.len(), cfg.batch_size.min(data.len()), true, cfg.seed)?;
        let total = cfg.epochs * sampler.batches_per_epoch();
        for k in 0..total {
            let (x, y) = data.gather(&sampler.batch(k))?;
            last = Some(supervised_step(model, &x, &y, Some(&mut opt_e), &mut opt_c, None)?);
            steps += 1;
        }
    }
    Ok(PretrainReport {
        epochs: cfg.epochs,
        steps,
        train_accuracy: accuracy(model, data)?,
        final_loss: last,
    })
}

/// Eval-mode top-1 accuracy.
pub fn accuracy<T: Real>(model: &mut SplitModel<T>, data: &TensorDataset<T>) -> Result<f64> {
    let pred = predict(model, &data.images)?;
    let hits = pred.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.len().max(1) as f64)
}

/// Eval-mode argmax predictions, in chunks.
pub fn predict<T: Real>(model: &mut SplitModel<T>, x: &Tensor<T>) -> Result<Vec<usize>> {
    const CHUNK: usize = 256;
    let n = x.batch();
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let len = CHUNK.min(n - start);
        let logits = model.logits(&x.slice_batch(start, len)?, Mode::Eval)?;
        let k = logits.shape()[1];
        for row in logits.data().chunks(k) {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            out.push(best);
        }
        start += len;
    }
    Ok(out)
}
