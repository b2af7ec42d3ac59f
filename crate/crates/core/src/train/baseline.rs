use super::config::{TrainConfig, TrainMode};
use super::log::LogRow;
use super::optim::{Optimizer, OptimizerKind};
use super::{supervised_step, Anchor};
use crate::arch::SplitModel;
use crate::data::{BatchSampler, TensorDataset};
use crate::error::{DfgError, Result};
use crate::nn::InitScheme;

pub struct BaselineOutcome<T: crate::tensor::Real> {
    pub model: SplitModel<T>,
    pub log: Vec<LogRow>,
}

/// Cross-entropy training without feature generation.
///
/// `original` re-initialises `template`'s architecture (He) from the run
/// seed and trains both halves; any `source` is ignored. `finetune` starts
/// from `source`, freezes the extractor and trains the classifier, anchored
/// to the source classifier when `kappa_sp > 0`.
pub fn baseline_train<T: crate::tensor::Real>(
    cfg: &TrainConfig,
    data: &TensorDataset<T>,
    template: &SplitModel<T>,
    source: Option<&SplitModel<T>>,
) -> Result<BaselineOutcome<T>> {
    cfg.validate()?;
    let mut model = match cfg.mode {
        TrainMode::Original => {
            if source.is_some() {
                log::warn!("original mode ignores the source checkpoint");
            }
            SplitModel::from_specs(
                template.extractor.spec().clone(),
                template.classifier.spec().clone(),
                InitScheme::He,
                cfg.seed,
            )?
        }
        TrainMode::Finetune => source
            .ok_or_else(|| DfgError::Config("finetune mode needs a source checkpoint".into()))?
            .clone(),
        TrainMode::Dfg => {
            return Err(DfgError::Config("baseline training runs original or finetune mode".into()))
        }
    };
    if data.n_classes > model.n_classes() {
        return Err(DfgError::shape(format!(
            "data has {} classes, classifier head {}",
            data.n_classes,
            model.n_classes()
        )));
    }
    let make = |params: &[crate::tensor::Tensor<T>], lr: f64| match cfg.ec_optimizer {
        OptimizerKind::Adam => Optimizer::adam(params, cfg.adam(lr)),
        OptimizerKind::Sgd => Optimizer::sgd(params, lr, cfg.sgd_momentum),
    };
    let mut opt_e = make(model.extractor.params(), cfg.lr_extractor);
    let mut opt_c = make(model.classifier.params(), cfg.lr_classifier);
    let anchor_params = model.classifier.params().to_vec();
    let anchor = Anchor {
        params: &anchor_params,
        kappa: cfg.kappa_sp,
    };
    let finetune = cfg.mode == TrainMode::Finetune;
    let mut sampler = BatchSampler::new(data.len(), cfg.batch_size, true, cfg.seed)?;
    let mut log = Vec::with_capacity(cfg.iterations);
    for k in 0..cfg.iterations {
        let (x, y) = data.gather(&sampler.batch(k))?;
        let loss = if finetune {
            supervised_step(&mut model, &x, &y, None, &mut opt_c, Some((&anchor, false)))?
        } else {
            supervised_step(&mut model, &x, &y, Some(&mut opt_e), &mut opt_c, None)?
        };
        log.push(LogRow {
            iteration: k + 1,
            classifier_real: Some(loss),
            ..LogRow::default()
        });
    }
    Ok(BaselineOutcome { model, log })
}
