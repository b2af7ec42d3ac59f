//! Finite-difference checks of every layer kind and every training loss at
//! 64-bit precision, on the LeNet-scale networks themselves.

use rand::seq::index::sample;
use rand::Rng as _;

use dfg_core::arch::{build_dcgan_pair, build_lenet_split, ForwardCtx, Network, SplitModel};
use dfg_core::losses::{self, ClassifierInputs, LossWeights};
use dfg_core::nn::{InitScheme, Mode};
use dfg_core::rng;
use dfg_core::tensor::{backward, no_grad, ops};
use dfg_core::train::startpoint_regularizer;
use dfg_core::{Result, Tensor, Var};

use crate::Check;

const FIRST_ORDER_TOL: f64 = 1e-6;
const SECOND_ORDER_TOL: f64 = 1e-4;
const STEP: f64 = 1e-6;
/// Coordinates probed per tensor.
const PROBES: usize = 6;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng::stream(seed, &[0xacc]);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Reverse-mode gradient of `f` at `x` against central differences on a
/// random subset of coordinates; returns the worst
/// `|analytic - numeric| / max(1, |analytic|)`.
fn check(f: impl Fn(&Var<f64>) -> Result<Var<f64>>, x: &Tensor<f64>, seed: u64) -> Result<f64> {
    let leaf = Var::parameter(x.clone());
    let grads = backward(&f(&leaf)?)?;
    let analytic = grads.get_or_zeros(&leaf);
    // Recording stays on: the penalty needs an inner gradient to evaluate.
    let eval = |t: &Tensor<f64>| -> Result<f64> { Ok(f(&Var::constant(t.clone()))?.item()) };
    let mut r = rng::stream(seed, &[0xfd]);
    let coords = sample(&mut r, x.numel(), PROBES.min(x.numel()));
    let mut worst: f64 = 0.0;
    for i in coords {
        let mut probe = x.clone();
        probe.data_mut()[i] += STEP;
        let up = eval(&probe)?;
        probe.data_mut()[i] -= 2.0 * STEP;
        let down = eval(&probe)?;
        let numeric = (up - down) / (2.0 * STEP);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

/// Forward pass with parameter `k` replaced by `v`.
fn forward_with(
    net: &mut Network<f64>,
    k: Option<usize>,
    v: &Var<f64>,
    x: &Var<f64>,
    ctx: &ForwardCtx<'_, f64>,
) -> Result<Var<f64>> {
    let mut p = net.bind(false);
    if let Some(k) = k {
        p.vars[k] = v.clone();
    }
    net.forward(x, &p, ctx)
}

fn project(out: &Var<f64>, seed: u64) -> Result<Var<f64>> {
    let r = random(out.shape(), seed);
    Ok(ops::sum(&ops::mul_const(out, &r)?))
}

struct Tally {
    first: f64,
    second: f64,
    checks: usize,
    failures: Vec<String>,
}

impl Tally {
    fn record(&mut self, what: String, err: f64, second_order: bool) {
        self.checks += 1;
        let tol = if second_order {
            self.second = self.second.max(err);
            SECOND_ORDER_TOL
        } else {
            self.first = self.first.max(err);
            FIRST_ORDER_TOL
        };
        if !(err < tol) {
            self.failures.push(format!("{what}: {err:.2e}"));
        }
    }
}

/// Input and every parameter tensor of `net`, through `sum(out * R)`.
fn check_network(
    tally: &mut Tally,
    net: &Network<f64>,
    x: &Tensor<f64>,
    ctx: &ForwardCtx<'_, f64>,
) -> Result<()> {
    let name = net.spec().name.clone();
    let mut seed = 0;
    let mut targets: Vec<(String, Option<usize>, Tensor<f64>)> = vec![("input".into(), None, x.clone())];
    for (k, slot) in net.slots().iter().enumerate() {
        targets.push((
            format!("layer {} {}", slot.layer, slot.name),
            Some(k),
            net.params()[k].clone(),
        ));
    }
    for (what, k, at) in targets {
        seed += 1;
        let f = |v: &Var<f64>| {
            let mut net = net.clone();
            let input = if k.is_none() { v.clone() } else { Var::constant(x.clone()) };
            let out = forward_with(&mut net, k, v, &input, ctx)?;
            project(&out, 7)
        };
        let err = check(f, &at, seed)?;
        tally.record(format!("{name} {what}"), err, false);
    }
    Ok(())
}

pub fn run() -> Check {
    let mut tally = Tally {
        first: 0.0,
        second: 0.0,
        checks: 0,
        failures: Vec::new(),
    };
    let batch = 3;
    let labels = [1usize, 4, 7];
    let model: SplitModel<f64> = build_lenet_split(1, 10, 11)?;
    let (gen_spec, critic_spec) = build_dcgan_pair(model.feature_shape(), 10, 100)?;
    let generator = Network::<f64>::new(gen_spec, InitScheme::Xavier, 12)?;
    let critic = Network::<f64>::new(critic_spec, InitScheme::Xavier, 13)?;

    let images = random(&[batch, 1, 32, 32], 1);
    let z = random(&[batch, 100], 2);
    // Class weights with masked (zero) entries, as after a refresh.
    let mut w = random(&[10, 6], 3).map(|v| v + 1.0);
    for c in 0..10 {
        w.data_mut()[c * 6 + c % 6] = 0.0;
    }
    let gen_ctx = ForwardCtx::train().with_labels(&labels).with_class_weights(Some(&w));
    let plain = ForwardCtx::train();

    // Layers, one network at a time.
    check_network(&mut tally, &model.extractor, &images, &plain)?;
    let features = {
        let _g = no_grad();
        let mut e = model.extractor.clone();
        let p = e.bind(false);
        e.forward(&Var::constant(images.clone()), &p, &plain)?.value().clone()
    };
    check_network(&mut tally, &model.classifier, &features, &plain)?;
    check_network(&mut tally, &generator, &z, &gen_ctx)?;
    check_network(&mut tally, &critic, &features, &plain)?;

    let fake = {
        let _g = no_grad();
        let mut g = generator.clone();
        let p = g.bind(false);
        g.forward(&Var::constant(z.clone()), &p, &gen_ctx)?.value().clone()
    };

    // Critic objective (adversarial terms plus penalty) and the penalty on
    // its own, with respect to every critic parameter. Second order.
    for k in 0..critic.params().len() {
        let total = |v: &Var<f64>| {
            let mut net = critic.clone();
            let mut d = |x: &Var<f64>| forward_with(&mut net, Some(k), v, x, &plain);
            let mut r = rng::stream(5, &[k as u64]);
            Ok(losses::critic_loss(&mut d, &features, &fake, 10.0, &mut r)?.total)
        };
        let err = check(total, &critic.params()[k], 100 + k as u64)?;
        tally.record(format!("critic loss wrt critic param {k}"), err, true);
        let gp = |v: &Var<f64>| {
            let mut net = critic.clone();
            let mut d = |x: &Var<f64>| forward_with(&mut net, Some(k), v, x, &plain);
            let mut r = rng::stream(6, &[k as u64]);
            losses::gradient_penalty(&mut d, &features, &fake, 10.0, &mut r)
        };
        let err = check(gp, &critic.params()[k], 200 + k as u64)?;
        tally.record(format!("penalty wrt critic param {k}"), err, true);
    }

    // Generator objectives, with respect to every generator parameter.
    for k in 0..generator.params().len() {
        let adv = |v: &Var<f64>| {
            let mut g = generator.clone();
            let mut d = critic.clone();
            let out = forward_with(&mut g, Some(k), v, &Var::constant(z.clone()), &gen_ctx)?;
            let pd = d.bind(false);
            Ok(losses::generator_adv_loss(&d.forward(&out, &pd, &plain)?))
        };
        let err = check(adv, &generator.params()[k], 300 + k as u64)?;
        tally.record(format!("adversarial generator loss wrt param {k}"), err, false);

        let concat = |v: &Var<f64>| {
            let mut g = generator.clone();
            let mut m = model.clone();
            let out = forward_with(&mut g, Some(k), v, &Var::constant(z.clone()), &gen_ctx)?;
            let (x, y) = losses::concat_features(&Var::constant(features.clone()), &labels, Some((&out, &labels)))?;
            let pc = m.classifier.bind(false);
            let logits = m.classify(&x, &pc, Mode::Train)?;
            losses::extractor_ce_loss(&logits, &y)
        };
        let err = check(concat, &generator.params()[k], 400 + k as u64)?;
        tally.record(format!("concatenated generator loss wrt param {k}"), err, false);
    }

    // Extractor cross-entropy and start-point regularizer.
    let source: Vec<Tensor<f64>> = model.extractor.params().iter().map(|p| p.map(|v| v * 0.9 + 0.01)).collect();
    for k in 0..model.extractor.params().len() {
        let ce = |v: &Var<f64>| {
            let mut m = model.clone();
            let f = forward_with(&mut m.extractor, Some(k), v, &Var::constant(images.clone()), &plain)?;
            let pc = m.classifier.bind(false);
            let logits = m.classify(&f, &pc, Mode::Train)?;
            let mut vars = m.extractor.bind(false).vars;
            vars[k] = v.clone();
            ops::add(
                &losses::extractor_ce_loss(&logits, &labels)?,
                &startpoint_regularizer(&vars, &source, 0.3)?,
            )
        };
        let err = check(ce, &model.extractor.params()[k], 500 + k as u64)?;
        tally.record(format!("extractor loss wrt param {k}"), err, false);
    }

    // Composite classifier objective, with respect to every classifier parameter.
    let fake_labels = [0usize, 2, 9];
    let weights = LossWeights {
        alpha: 0.5,
        beta: 0.2,
        gamma: 0.3,
    };
    for k in 0..model.classifier.params().len() {
        let composite = |v: &Var<f64>| {
            let mut m = model.clone();
            let mut p = m.classifier.bind(false);
            p.vars[k] = v.clone();
            let real = m.classify(&Var::constant(features.clone()), &p, Mode::Train)?;
            let generated = m.classify(&Var::constant(fake.clone()), &p, Mode::Train)?;
            let (x, y) = losses::concat_features(
                &Var::constant(features.clone()),
                &labels,
                Some((&Var::constant(fake.clone()), &fake_labels)),
            )?;
            let concatenated = m.classify(&x, &p, Mode::Train)?;
            let inputs = ClassifierInputs {
                real: (&real, &labels),
                generated: (&generated, &fake_labels),
                concatenated: (&concatenated, &y),
            };
            Ok(losses::classifier_composite_loss(&inputs, &weights)?.total)
        };
        let err = check(composite, &model.classifier.params()[k], 600 + k as u64)?;
        tally.record(format!("classifier loss wrt param {k}"), err, false);
    }

    // Start-point regularizer on its own, every classifier tensor at once.
    let anchor: Vec<Tensor<f64>> = model.classifier.params().iter().map(|p| p.map(|v| v - 0.05)).collect();
    for k in 0..anchor.len() {
        let sp = |v: &Var<f64>| {
            let mut vars: Vec<Var<f64>> = model.classifier.params().iter().map(|p| Var::constant(p.clone())).collect();
            vars[k] = v.clone();
            startpoint_regularizer(&vars, &anchor, 0.7)
        };
        let err = check(sp, &model.classifier.params()[k], 700 + k as u64)?;
        tally.record(format!("start-point regularizer wrt param {k}"), err, false);
    }

    if tally.failures.is_empty() {
        Ok(format!(
            "{} checks; worst first-order {:.1e} (< {FIRST_ORDER_TOL:.0e}), worst second-order {:.1e} (< {SECOND_ORDER_TOL:.0e})",
            tally.checks, tally.first, tally.second
        ))
    } else {
        Err(format!("{} of {} checks over tolerance: {}", tally.failures.len(), tally.checks, tally.failures.join("; ")).into())
    }
}
