use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::log::LogRow;
use super::optim::{Optimizer, OptimizerKind};
use super::{sample_noise_and_labels, startpoint_regularizer};
use crate::arch::{
    build_dcgan_pair, specs_hash, BoundParams, Checkpoint, ForwardCtx, Network, NetworkSpec, SplitModel,
};
use crate::attention::{
    calibration_indices, model_weights, refresh_weights, threshold_mask, FilterWeights, MaskedWeights, Refresh,
    WeightOrigin,
};
use crate::data::{BatchSampler, TensorDataset};
use crate::error::{DfgError, Result};
use crate::losses::{self, ClassifierInputs};
use crate::nn::{InitScheme, Mode};
use crate::rng::{self, purpose};
use crate::tensor::{backward, no_grad, ops, Real, Tensor, Var};

/// Generator and critic architectures with their initialisation.
#[derive(Clone, Debug, PartialEq)]
pub struct GanSpecs {
    pub generator: NetworkSpec,
    pub critic: NetworkSpec,
    pub init: InitScheme,
}

impl GanSpecs {
    /// DCGAN-style pair sized for `model`'s features, Xavier-initialised.
    pub fn for_model<T: Real>(model: &SplitModel<T>, z_dim: usize) -> Result<Self> {
        let (generator, critic) = build_dcgan_pair(model.feature_shape(), model.n_classes(), z_dim)?;
        Ok(GanSpecs {
            generator,
            critic,
            init: InitScheme::Xavier,
        })
    }
}

/// How many times each update of the schedule has run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateCounts {
    pub critic: usize,
    /// Adversarial generator updates.
    pub generator_adv: usize,
    /// Generator updates on the concatenated-batch classification loss.
    pub generator_concat: usize,
    pub extractor: usize,
    /// Classifier updates on real features only.
    pub classifier_real: usize,
    /// Classifier updates on the full composite objective.
    pub classifier_full: usize,
    pub refresh: usize,
}

impl UpdateCounts {
    const LEN: usize = 7;

    fn to_vec(self) -> Vec<f64> {
        [
            self.critic,
            self.generator_adv,
            self.generator_concat,
            self.extractor,
            self.classifier_real,
            self.classifier_full,
            self.refresh,
        ]
        .iter()
        .map(|&c| c as f64)
        .collect()
    }

    fn from_slice(v: &[f64]) -> Self {
        let c = |i: usize| v[i] as usize;
        UpdateCounts {
            critic: c(0),
            generator_adv: c(1),
            generator_concat: c(2),
            extractor: c(3),
            classifier_real: c(4),
            classifier_full: c(5),
            refresh: c(6),
        }
    }
}

fn weights_tensor<T: Real>(values: &[f64], n_classes: usize, n_filters: usize) -> Tensor<T> {
    Tensor::new(&[n_classes, n_filters], values.iter().map(|&v| T::lit(v)).collect()).expect("matrix extents")
}

/// Rounds weights to the checkpoint's element type, so a restored run
/// continues from exactly the values it saved.
fn round_to<T: Real>(values: &mut [f64]) {
    for v in values {
        *v = T::lit(*v).as_f64();
    }
}

fn tensor_values<T: Real>(t: &Tensor<T>) -> Vec<f64> {
    t.to_f64_vec()
}

fn finite(v: f64, what: &str, iteration: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(DfgError::non_finite(format!("{what} at iteration {iteration}")))
    }
}

/// State of a DFG run. Each call to [`DfgTrainer::step`] executes one outer
/// iteration of the schedule.
///
/// Every random draw is keyed by `(seed, purpose, iteration, sub-step)`, so
/// a run restored from a checkpoint continues exactly as if uninterrupted.
pub struct DfgTrainer<'a, T: Real> {
    cfg: TrainConfig,
    data: &'a TensorDataset<T>,
    pub model: SplitModel<T>,
    pub generator: Network<T>,
    pub critic: Network<T>,
    opt_extractor: Optimizer<T>,
    opt_classifier: Optimizer<T>,
    opt_generator: Optimizer<T>,
    opt_critic: Optimizer<T>,
    anchor: Vec<Tensor<T>>,
    pub source_weights: FilterWeights,
    pub masked: MaskedWeights,
    pub last_refresh: Option<Refresh>,
    class_weights: Tensor<T>,
    calibration: (Tensor<T>, Vec<usize>),
    sampler: BatchSampler,
    /// Completed iterations.
    pub iteration: usize,
    pub counts: UpdateCounts,
}

impl<'a, T: Real> DfgTrainer<'a, T> {
    /// Starts from the pretrained `source` model. Source filter weights are
    /// measured on a stratified calibration subset of `data`.
    pub fn new(cfg: &TrainConfig, data: &'a TensorDataset<T>, source: &SplitModel<T>, gan: GanSpecs) -> Result<Self> {
        cfg.validate()?;
        let model = source.clone();
        if data.n_classes > model.n_classes() {
            return Err(DfgError::shape(format!(
                "target data has {} classes, classifier head {}",
                data.n_classes,
                model.n_classes()
            )));
        }
        let generator = Network::new(gan.generator, gan.init, cfg.seed)?;
        let critic = Network::new(gan.critic, gan.init, cfg.seed)?;
        if generator.output_shape() != model.feature_shape() {
            return Err(DfgError::shape(format!(
                "generator emits {:?}, extractor {:?}",
                generator.output_shape(),
                model.feature_shape()
            )));
        }
        if critic.spec().input_shape != model.feature_shape() || critic.output_shape() != [1] {
            return Err(DfgError::shape(format!(
                "critic maps {:?} -> {:?}; expected {:?} -> [1]",
                critic.spec().input_shape,
                critic.output_shape(),
                model.feature_shape()
            )));
        }
        let z_in = generator.spec().input_shape.clone();
        if z_in != [cfg.z_dim] {
            return Err(DfgError::Config(format!(
                "generator takes {z_in:?} but z_dim is {}",
                cfg.z_dim
            )));
        }

        let n_classes = model.n_classes();
        let idx = calibration_indices(&data.labels, n_classes, cfg.calibration_size, cfg.seed);
        let calibration = data.gather(&idx)?;
        let mut source_model = model.clone();
        let mut source_weights =
            model_weights(&mut source_model, &calibration.0, &calibration.1, WeightOrigin::Source)?;
        round_to::<T>(&mut source_weights.values);
        let masked = threshold_mask(&source_weights, cfg.delta);
        let class_weights = masked.to_tensor();

        let ec = |params: &[Tensor<T>], lr: f64| match cfg.ec_optimizer {
            OptimizerKind::Adam => Optimizer::adam(params, cfg.adam(lr)),
            OptimizerKind::Sgd => Optimizer::sgd(params, lr, cfg.sgd_momentum),
        };
        let opt_extractor = ec(model.extractor.params(), cfg.lr_extractor);
        let opt_classifier = ec(model.classifier.params(), cfg.lr_classifier);
        let opt_generator = Optimizer::adam(generator.params(), cfg.adam(cfg.lr_generator));
        let opt_critic = Optimizer::adam(critic.params(), cfg.adam(cfg.lr_critic));
        let sampler = BatchSampler::new(data.len(), cfg.batch_size, true, cfg.seed)?;

        let mut t = DfgTrainer {
            cfg: cfg.clone(),
            data,
            anchor: model.extractor.params().to_vec(),
            model,
            generator,
            critic,
            opt_extractor,
            opt_classifier,
            opt_generator,
            opt_critic,
            source_weights,
            masked,
            last_refresh: None,
            class_weights,
            calibration,
            sampler,
            iteration: 0,
            counts: UpdateCounts::default(),
        };
        t.dry_run()?;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Builds one gradient-penalty graph through the critic and
    /// differentiates it, so an op without a second-order rule fails here
    /// rather than mid-run. Parameters and running statistics are untouched.
    pub fn dry_run(&mut self) -> Result<()> {
        let m = self.cfg.batch_size.min(2).min(self.data.len());
        let (x, _) = self.data.gather(&(0..m).collect::<Vec<_>>())?;
        let real = {
            let _g = no_grad();
            let pe = self.model.extractor.bind(false);
            self.model.extract(&Var::constant(x), &pe, Mode::Eval)?.value().clone()
        };
        let fake = real.map(|v| -v);
        let mut critic = self.critic.clone();
        let pd = critic.bind(true);
        let ctx = ForwardCtx::train();
        let mut f = |v: &Var<T>| critic.forward(v, &pd, &ctx);
        let mut r = rng::stream(self.cfg.seed, &[purpose::PENALTY, u64::MAX]);
        let gp = losses::gradient_penalty(&mut f, &real, &fake, self.cfg.lambda, &mut r)?;
        backward(&gp)?;
        Ok(())
    }

    fn batch_index(&self, step: usize, sub: usize) -> usize {
        (step - 1) * (self.cfg.n_critic + 1) + sub
    }

    fn real_batch(&mut self, step: usize, sub: usize) -> Result<(Tensor<T>, Vec<usize>)> {
        let k = self.batch_index(step, sub);
        let idx = self.sampler.batch(k);
        self.data.gather(&idx)
    }

    fn noise(&self, step: usize, sub: usize) -> Result<(Tensor<T>, Vec<usize>)> {
        let mut r = rng::stream(self.cfg.seed, &[purpose::NOISE, step as u64, sub as u64]);
        sample_noise_and_labels(self.cfg.batch_size, self.cfg.z_dim, self.model.n_classes(), &mut r)
    }

    /// `E(x)` as a constant.
    fn features(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let _g = no_grad();
        let pe = self.model.extractor.bind(false);
        Ok(self.model.extract(&Var::constant(x.clone()), &pe, Mode::Train)?.value().clone())
    }

    fn generate(&mut self, z: &Tensor<T>, labels: &[usize], params: &BoundParams<T>) -> Result<Var<T>> {
        let ctx = ForwardCtx::train()
            .with_labels(labels)
            .with_class_weights(Some(&self.class_weights));
        self.generator.forward(&Var::constant(z.clone()), params, &ctx)
    }

    fn generate_constant(&mut self, z: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
        let _g = no_grad();
        let pg = self.generator.bind(false);
        Ok(self.generate(z, labels, &pg)?.value().clone())
    }

    fn critic_update(&mut self, step: usize, sub: usize, row: &mut LogRow) -> Result<()> {
        let (x, _) = self.real_batch(step, sub)?;
        let real = self.features(&x)?;
        let (z, labels) = self.noise(step, sub)?;
        let fake = self.generate_constant(&z, &labels)?;
        let pd = self.critic.bind(true);
        let ctx = ForwardCtx::train();
        let mut r = rng::stream(self.cfg.seed, &[purpose::PENALTY, step as u64, sub as u64]);
        let loss = {
            let critic = &mut self.critic;
            let mut f = |v: &Var<T>| critic.forward(v, &pd, &ctx);
            losses::critic_loss(&mut f, &real, &fake, self.cfg.lambda, &mut r)?
        };
        row.critic = Some(finite(loss.total.item().as_f64(), "critic loss", step)?);
        row.penalty = Some(loss.penalty.item().as_f64());
        row.wasserstein = Some(loss.wasserstein);
        let g = backward(&loss.total)?;
        self.opt_critic.step(self.critic.params_mut(), &pd.grads(&g))?;
        self.counts.critic += 1;
        Ok(())
    }

    fn generator_update(&mut self, step: usize, z: &Tensor<T>, labels: &[usize], row: &mut LogRow) -> Result<()> {
        let pg = self.generator.bind(true);
        let fake = self.generate(z, labels, &pg)?;
        let pd = self.critic.bind(false);
        let scores = self.critic.forward(&fake, &pd, &ForwardCtx::train())?;
        let loss = losses::generator_adv_loss(&scores);
        row.generator = Some(finite(loss.item().as_f64(), "generator loss", step)?);
        let g = backward(&loss)?;
        self.opt_generator.step(self.generator.params_mut(), &pg.grads(&g))?;
        self.counts.generator_adv += 1;
        Ok(())
    }

    /// Generator step on the classification loss of `E(x) ++ G(z, y_hat)`.
    fn generator_concat_update(
        &mut self,
        step: usize,
        real: &Tensor<T>,
        y: &[usize],
        z: &Tensor<T>,
        labels: &[usize],
        row: &mut LogRow,
    ) -> Result<()> {
        let pg = self.generator.bind(true);
        let fake = self.generate(z, labels, &pg)?;
        let (xt, yt) = losses::concat_features(&Var::constant(real.clone()), y, Some((&fake, labels)))?;
        let pc = self.model.classifier.bind(false);
        let logits = self.model.classify(&xt, &pc, Mode::Train)?;
        let loss = ops::cross_entropy(&logits, &yt)?;
        row.classifier_concat = Some(finite(loss.item().as_f64(), "concatenated classifier loss", step)?);
        let g = backward(&loss)?;
        self.opt_generator.step(self.generator.params_mut(), &pg.grads(&g))?;
        self.counts.generator_concat += 1;
        Ok(())
    }

    fn extractor_update(&mut self, step: usize, x: &Tensor<T>, y: &[usize], row: &mut LogRow) -> Result<()> {
        let pe = self.model.extractor.bind(true);
        let pc = self.model.classifier.bind(false);
        let f = self.model.extract(&Var::constant(x.clone()), &pe, Mode::Train)?;
        let logits = self.model.classify(&f, &pc, Mode::Train)?;
        let ce = losses::extractor_ce_loss(&logits, y)?;
        row.extractor = Some(finite(ce.item().as_f64(), "extractor loss", step)?);
        let loss = if self.cfg.kappa_sp > 0.0 {
            ops::add(&ce, &startpoint_regularizer(&pe.vars, &self.anchor, self.cfg.kappa_sp)?)?
        } else {
            ce
        };
        let g = backward(&loss)?;
        self.opt_extractor.step(self.model.extractor.params_mut(), &pe.grads(&g))?;
        self.counts.extractor += 1;
        Ok(())
    }

    fn classifier_real_update(&mut self, step: usize, x: &Tensor<T>, y: &[usize], row: &mut LogRow) -> Result<()> {
        let f = self.features(x)?;
        let pc = self.model.classifier.bind(true);
        let logits = self.model.classify(&Var::constant(f), &pc, Mode::Train)?;
        let loss = ops::cross_entropy(&logits, y)?;
        row.classifier_real = Some(finite(loss.item().as_f64(), "classifier loss", step)?);
        let g = backward(&loss)?;
        self.opt_classifier.step(self.model.classifier.params_mut(), &pc.grads(&g))?;
        self.counts.classifier_real += 1;
        Ok(())
    }

    fn classifier_full_update(
        &mut self,
        step: usize,
        x: &Tensor<T>,
        y: &[usize],
        z: &Tensor<T>,
        labels: &[usize],
        row: &mut LogRow,
    ) -> Result<()> {
        let real = Var::constant(self.features(x)?);
        let fake = Var::constant(self.generate_constant(z, labels)?);
        let (xt, yt) = losses::concat_features(&real, y, Some((&fake, labels)))?;
        let pc = self.model.classifier.bind(true);
        let lr = self.model.classify(&real, &pc, Mode::Train)?;
        let lg = self.model.classify(&fake, &pc, Mode::Train)?;
        let lc = self.model.classify(&xt, &pc, Mode::Train)?;
        let loss = losses::classifier_composite_loss(
            &ClassifierInputs {
                real: (&lr, y),
                generated: (&lg, labels),
                concatenated: (&lc, &yt),
            },
            &self.cfg.loss_weights(),
        )?;
        finite(loss.total.item().as_f64(), "composite classifier loss", step)?;
        row.classifier_real = Some(loss.real.item().as_f64());
        row.classifier_generated = Some(loss.generated.item().as_f64());
        row.classifier_concat = Some(loss.concatenated.item().as_f64());
        let g = backward(&loss.total)?;
        self.opt_classifier.step(self.model.classifier.params_mut(), &pc.grads(&g))?;
        self.counts.classifier_full += 1;
        Ok(())
    }

    /// Recomputes target filter weights, blends and masks them.
    pub fn refresh(&mut self) -> Result<()> {
        let (x, y) = &self.calibration;
        let mut r = refresh_weights(&mut self.model, x, y, &self.source_weights, self.cfg.rho, self.cfg.delta)?;
        round_to::<T>(&mut r.target.values);
        round_to::<T>(&mut r.blended.values);
        r.masked = threshold_mask(&r.blended, self.cfg.delta);
        self.class_weights = r.masked.to_tensor();
        self.masked = r.masked.clone();
        self.last_refresh = Some(r);
        self.counts.refresh += 1;
        Ok(())
    }

    /// Runs iteration `self.iteration + 1`.
    pub fn step(&mut self) -> Result<LogRow> {
        let step = self.iteration + 1;
        let mut row = LogRow {
            iteration: step,
            ..LogRow::default()
        };
        for sub in 0..self.cfg.n_critic {
            self.critic_update(step, sub, &mut row)?;
        }
        let sub = self.cfg.n_critic;
        let (z, labels) = self.noise(step, sub)?;
        let (x, y) = self.real_batch(step, sub)?;
        self.generator_update(step, &z, &labels, &mut row)?;
        if step % self.cfg.n_c1 == 0 {
            let real = self.features(&x)?;
            self.generator_concat_update(step, &real, &y, &z, &labels, &mut row)?;
            self.extractor_update(step, &x, &y, &mut row)?;
            self.classifier_real_update(step, &x, &y, &mut row)?;
        }
        if step % self.cfg.n_c2 == 0 {
            self.classifier_full_update(step, &x, &y, &z, &labels, &mut row)?;
        }
        if step % self.cfg.n_w == 0 {
            self.refresh()?;
        }
        self.iteration = step;
        Ok(row)
    }

    /// Steps until `self.cfg.iterations`, calling `on_row` after each.
    pub fn run(&mut self, mut on_row: impl FnMut(&mut Self, &LogRow) -> Result<()>) -> Result<()> {
        while self.iteration < self.cfg.iterations {
            let row = self.step()?;
            on_row(self, &row)?;
        }
        Ok(())
    }

    pub fn spec_hash(&self) -> u64 {
        specs_hash(&[
            self.model.extractor.spec(),
            self.model.classifier.spec(),
            self.generator.spec(),
            self.critic.spec(),
        ])
    }

    /// Everything needed to resume: networks, optimizer moments, filter
    /// weights and counters.
    pub fn checkpoint(&self) -> Checkpoint<T> {
        let mut ck = Checkpoint::new(self.spec_hash(), self.cfg.seed, self.iteration as u64);
        ck.insert_network("extractor", &self.model.extractor);
        ck.insert_network("classifier", &self.model.classifier);
        ck.insert_network("generator", &self.generator);
        ck.insert_network("critic", &self.critic);
        self.opt_extractor.state.save(&mut ck, "opt.extractor");
        self.opt_classifier.state.save(&mut ck, "opt.classifier");
        self.opt_generator.state.save(&mut ck, "opt.generator");
        self.opt_critic.state.save(&mut ck, "opt.critic");
        for (i, a) in self.anchor.iter().enumerate() {
            ck.insert(format!("anchor.{i}"), a.clone());
        }
        let (nl, nf) = (self.masked.n_classes(), self.masked.n_filters());
        ck.insert("weights.source", weights_tensor(&self.source_weights.values, nl, nf));
        ck.insert("weights.masked", weights_tensor(&self.masked.values, nl, nf));
        ck.insert("weights.unmasked", weights_tensor(&self.masked.unmasked.values, nl, nf));
        if let Some(r) = &self.last_refresh {
            ck.insert("weights.target", weights_tensor(&r.target.values, nl, nf));
        }
        let counts: Vec<T> = self.counts.to_vec().into_iter().map(T::lit).collect();
        ck.insert("counts", Tensor::new(&[UpdateCounts::LEN], counts).expect("counter length"));
        ck
    }

    /// Restores a state written by [`DfgTrainer::checkpoint`].
    pub fn restore(&mut self, ck: &Checkpoint<T>) -> Result<()> {
        if ck.spec_hash != self.spec_hash() {
            return Err(DfgError::Checkpoint(format!(
                "architecture mismatch: checkpoint hash {:016x}, run {:016x}",
                ck.spec_hash,
                self.spec_hash()
            )));
        }
        ck.restore_network("extractor", &mut self.model.extractor)?;
        ck.restore_network("classifier", &mut self.model.classifier)?;
        ck.restore_network("generator", &mut self.generator)?;
        ck.restore_network("critic", &mut self.critic)?;
        self.opt_extractor.state.restore(ck, "opt.extractor")?;
        self.opt_classifier.state.restore(ck, "opt.classifier")?;
        self.opt_generator.state.restore(ck, "opt.generator")?;
        self.opt_critic.state.restore(ck, "opt.critic")?;
        for (i, a) in self.anchor.iter_mut().enumerate() {
            *a = ck.get(&format!("anchor.{i}"))?.clone();
        }
        let (nl, nf) = (self.masked.n_classes(), self.masked.n_filters());
        let load = |name: &str, origin: WeightOrigin| -> Result<FilterWeights> {
            let t = ck.get(name)?;
            if t.shape() != [nl, nf] {
                return Err(DfgError::Checkpoint(format!("{name} has shape {:?}", t.shape())));
            }
            Ok(FilterWeights {
                values: tensor_values(t),
                n_classes: nl,
                n_filters: nf,
                origin,
                empty_classes: Vec::new(),
            })
        };
        self.source_weights = load("weights.source", WeightOrigin::Source)?;
        let unmasked = load("weights.unmasked", WeightOrigin::Blended)?;
        let mut masked = threshold_mask(&unmasked, self.cfg.delta);
        masked.values = load("weights.masked", WeightOrigin::Blended)?.values;
        self.last_refresh = match ck.get("weights.target") {
            Ok(_) => Some(Refresh {
                target: load("weights.target", WeightOrigin::Target)?,
                blended: unmasked,
                masked: masked.clone(),
            }),
            Err(_) => None,
        };
        self.class_weights = masked.to_tensor();
        self.masked = masked;
        let counts = tensor_values(ck.get("counts")?);
        if counts.len() != UpdateCounts::LEN {
            return Err(DfgError::Checkpoint("counter block has the wrong length".into()));
        }
        self.counts = UpdateCounts::from_slice(&counts);
        self.iteration = ck.iteration as usize;
        Ok(())
    }
}

/// Products of a finished DFG run.
pub struct DfgOutcome<T: Real> {
    pub model: SplitModel<T>,
    pub generator: Network<T>,
    pub critic: Network<T>,
    pub log: Vec<LogRow>,
    pub counts: UpdateCounts,
    pub source_weights: FilterWeights,
    pub masked: MaskedWeights,
    pub last_refresh: Option<Refresh>,
}

/// Runs the whole schedule in memory.
pub fn dfg_train<T: Real>(
    cfg: &TrainConfig,
    data: &TensorDataset<T>,
    source: &SplitModel<T>,
    gan: GanSpecs,
) -> Result<DfgOutcome<T>> {
    let mut t = DfgTrainer::new(cfg, data, source, gan)?;
    let mut log = Vec::with_capacity(cfg.iterations);
    t.run(|_, row| {
        log.push(row.clone());
        Ok(())
    })?;
    Ok(DfgOutcome {
        model: t.model,
        generator: t.generator,
        critic: t.critic,
        log,
        counts: t.counts,
        source_weights: t.source_weights,
        masked: t.masked,
        last_refresh: t.last_refresh,
    })
}
