//! Critic, generator, extractor and classifier objectives.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{DfgError, Result};
use crate::rng::Rng;
use crate::tensor::{self, ops, Real, Tensor, Var};

/// Added under the square root of the gradient norm so it stays
/// differentiable at zero.
pub const NORM_EPS: f64 = 1e-12;

/// `eps[i] * real[i] + (1 - eps[i]) * fake[i]`, one coefficient per sample.
pub fn interpolate<T: Real>(real: &Tensor<T>, fake: &Tensor<T>, eps: &[f64]) -> Result<Tensor<T>> {
    real.expect_same_shape(fake)?;
    if eps.len() != real.batch() {
        return Err(DfgError::shape(format!(
            "{} interpolation coefficients for a batch of {}",
            eps.len(),
            real.batch()
        )));
    }
    let s = real.sample_len();
    let mut out = Vec::with_capacity(real.numel());
    for (i, &e) in eps.iter().enumerate() {
        let (e, f) = (T::lit(e), T::lit(1.0 - e));
        let r = &real.data()[i * s..(i + 1) * s];
        let q = &fake.data()[i * s..(i + 1) * s];
        out.extend(r.iter().zip(q).map(|(&a, &b)| e * a + f * b));
    }
    Tensor::new(real.shape(), out)
}

/// `lambda * mean_i (||grad_x D(x_i)|| - 1)^2` at the given points, built so
/// that it can be differentiated again with respect to the critic parameters.
pub fn penalty_at<T: Real, D>(critic: &mut D, points: &Tensor<T>, lambda: f64) -> Result<Var<T>>
where
    D: FnMut(&Var<T>) -> Result<Var<T>>,
{
    let x = Var::leaf(points.clone(), true);
    let scores = critic(&x)?;
    let g = tensor::grad_with_graph(&ops::sum(&scores), &x)?;
    let sq = ops::sum_per_sample(&ops::square(&g)?);
    let norm = ops::sqrt(&ops::add_scalar(&sq, NORM_EPS));
    let dev = ops::square(&ops::add_scalar(&norm, -1.0))?;
    Ok(ops::scale(&ops::mean(&dev), lambda))
}

/// Gradient penalty on random interpolates between paired real and fake
/// samples; `eps ~ U[0, 1]` is drawn once per pair from `rng`.
pub fn gradient_penalty<T: Real, D>(
    critic: &mut D,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    lambda: f64,
    rng: &mut Rng,
) -> Result<Var<T>>
where
    D: FnMut(&Var<T>) -> Result<Var<T>>,
{
    if lambda < 0.0 {
        return Err(DfgError::invalid("penalty coefficient must be non-negative"));
    }
    let eps: Vec<f64> = (0..real.batch()).map(|_| rng.random::<f64>()).collect();
    penalty_at(critic, &interpolate(real, fake, &eps)?, lambda)
}

/// Critic objective and its parts.
pub struct CriticLoss<T: Real> {
    pub total: Var<T>,
    pub penalty: Var<T>,
    /// `mean D(real) - mean D(fake)`, the critic's Wasserstein estimate.
    pub wasserstein: f64,
}

/// `mean D(fake) - mean D(real) + GP`, minimised by the critic.
pub fn critic_loss<T: Real, D>(
    critic: &mut D,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    lambda: f64,
    rng: &mut Rng,
) -> Result<CriticLoss<T>>
where
    D: FnMut(&Var<T>) -> Result<Var<T>>,
{
    if real.shape() != fake.shape() {
        return Err(DfgError::shape(format!(
            "real batch {:?} and fake batch {:?} differ",
            real.shape(),
            fake.shape()
        )));
    }
    let d_real = ops::mean(&critic(&Var::constant(real.clone()))?);
    let d_fake = ops::mean(&critic(&Var::constant(fake.clone()))?);
    let penalty = gradient_penalty(critic, real, fake, lambda, rng)?;
    let wasserstein = d_real.item().as_f64() - d_fake.item().as_f64();
    let total = ops::add(&ops::sub(&d_fake, &d_real)?, &penalty)?;
    Ok(CriticLoss {
        total,
        penalty,
        wasserstein,
    })
}

/// `-mean D(fake)` for critic scores on generated features.
pub fn generator_adv_loss<T: Real>(fake_scores: &Var<T>) -> Var<T> {
    ops::neg(&ops::mean(fake_scores))
}

/// Mean cross-entropy of classifier logits against labels.
pub fn extractor_ce_loss<T: Real>(logits: &Var<T>, labels: &[usize]) -> Result<Var<T>> {
    ops::cross_entropy(logits, labels)
}

/// Mixing weights of the classifier objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0 / 3.0,
            beta: 1.0 / 3.0,
            gamma: 1.0 / 3.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(DfgError::Config(format!(
                "loss weights must be finite and non-negative, got {all:?}"
            )));
        }
        let s: f64 = all.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(DfgError::Config(format!(
                "alpha + beta + gamma must equal 1 (got {s})"
            )));
        }
        Ok(())
    }
}

/// Classifier objective and its parts.
pub struct ClassifierLoss<T: Real> {
    pub total: Var<T>,
    pub real: Var<T>,
    pub generated: Var<T>,
    pub concatenated: Var<T>,
}

/// Logits and labels feeding the classifier objective.
pub struct ClassifierInputs<'a, T: Real> {
    /// `C(E(x))` with labels `y`.
    pub real: (&'a Var<T>, &'a [usize]),
    /// `C(G(z, y_hat))` with labels `y_hat`.
    pub generated: (&'a Var<T>, &'a [usize]),
    /// `C` on the real-then-fake concatenated batch.
    pub concatenated: (&'a Var<T>, &'a [usize]),
}

/// `alpha * CE(real) + beta * CE(generated) + gamma * CE(concatenated)`.
pub fn classifier_composite_loss<T: Real>(
    inputs: &ClassifierInputs<'_, T>,
    w: &LossWeights,
) -> Result<ClassifierLoss<T>> {
    w.validate()?;
    let real = ops::cross_entropy(inputs.real.0, inputs.real.1)?;
    let generated = ops::cross_entropy(inputs.generated.0, inputs.generated.1)?;
    let concatenated = ops::cross_entropy(inputs.concatenated.0, inputs.concatenated.1)?;
    let total = ops::add(
        &ops::add(&ops::scale(&real, w.alpha), &ops::scale(&generated, w.beta))?,
        &ops::scale(&concatenated, w.gamma),
    )?;
    Ok(ClassifierLoss {
        total,
        real,
        generated,
        concatenated,
    })
}

/// Real features followed by generated ones, with labels in the same order.
pub fn concat_features<T: Real>(
    real: &Var<T>,
    real_labels: &[usize],
    fake: Option<(&Var<T>, &[usize])>,
) -> Result<(Var<T>, Vec<usize>)> {
    if real.shape()[0] != real_labels.len() {
        return Err(DfgError::shape(format!(
            "{} labels for {} real samples",
            real_labels.len(),
            real.shape()[0]
        )));
    }
    let Some((fake, fake_labels)) = fake else {
        return Ok((real.clone(), real_labels.to_vec()));
    };
    if fake.shape()[0] != fake_labels.len() {
        return Err(DfgError::shape(format!(
            "{} labels for {} generated samples",
            fake_labels.len(),
            fake.shape()[0]
        )));
    }
    let x = ops::concat_batch(real, fake)?;
    let mut y = real_labels.to_vec();
    y.extend_from_slice(fake_labels);
    Ok((x, y))
}
