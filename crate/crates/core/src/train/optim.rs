use serde::{Deserialize, Serialize};

use crate::arch::Checkpoint;
use crate::error::{DfgError, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Which update rule an optimizer applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// Moment accumulators (Adam) or velocity (SGD, first slot only).
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T: Real> {
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn zeros_like(params: &[Tensor<T>]) -> Self {
        let z: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        OptimizerState {
            first: z.clone(),
            second: z,
            step: 0,
        }
    }

    pub fn save(&self, ck: &mut Checkpoint<T>, prefix: &str) {
        for (i, (m, v)) in self.first.iter().zip(&self.second).enumerate() {
            ck.insert(format!("{prefix}.m.{i}"), m.clone());
            ck.insert(format!("{prefix}.v.{i}"), v.clone());
        }
        ck.insert(format!("{prefix}.step"), Tensor::scalar(T::lit(self.step as f64)));
    }

    pub fn restore(&mut self, ck: &Checkpoint<T>, prefix: &str) -> Result<()> {
        for i in 0..self.first.len() {
            let m = ck.get(&format!("{prefix}.m.{i}"))?;
            let v = ck.get(&format!("{prefix}.v.{i}"))?;
            self.first[i].expect_same_shape(m)?;
            self.second[i].expect_same_shape(v)?;
            self.first[i] = m.clone();
            self.second[i] = v.clone();
        }
        self.step = ck.get(&format!("{prefix}.step"))?.item().as_f64() as u64;
        Ok(())
    }
}

fn check_grads<T: Real>(params: &[Tensor<T>], grads: &[Tensor<T>], what: &str) -> Result<()> {
    if params.len() != grads.len() {
        return Err(DfgError::shape(format!(
            "{what}: {} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        p.expect_same_shape(g)?;
        if !g.is_finite() {
            return Err(DfgError::non_finite(format!("{what} gradient of parameter {i}")));
        }
    }
    Ok(())
}

/// Bias-corrected Adam update.
pub fn adam_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    check_grads(params, grads, "adam")?;
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - cfg.beta1.powf(t);
    let c2 = 1.0 - cfg.beta2.powf(t);
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (nb1, nb2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
    let step_size = T::lit(cfg.lr / c1);
    let inv_c2 = T::lit(1.0 / c2);
    let eps = T::lit(cfg.eps);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first.iter_mut().zip(state.second.iter_mut()))
    {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (((p, &g), m), v) in p.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + nb1 * g;
            *v = b2 * *v + nb2 * g * g;
            *p = *p - step_size * *m / ((*v * inv_c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// `v = mu * v + g; theta -= lr * v`.
pub fn sgd_momentum_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    check_grads(params, grads, "sgd")?;
    state.step += 1;
    let (lr, mu) = (T::lit(lr), T::lit(momentum));
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.first.iter_mut()) {
        for ((p, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *v = mu * *v + g;
            *p = *p - lr * *v;
        }
    }
    Ok(())
}

/// An update rule with its state and hyperparameters.
#[derive(Clone, Debug)]
pub struct Optimizer<T: Real> {
    pub kind: OptimizerKind,
    pub adam: AdamConfig,
    pub momentum: f64,
    pub state: OptimizerState<T>,
}

impl<T: Real> Optimizer<T> {
    pub fn adam(params: &[Tensor<T>], cfg: AdamConfig) -> Self {
        Optimizer {
            kind: OptimizerKind::Adam,
            adam: cfg,
            momentum: 0.0,
            state: OptimizerState::zeros_like(params),
        }
    }

    pub fn sgd(params: &[Tensor<T>], lr: f64, momentum: f64) -> Self {
        Optimizer {
            kind: OptimizerKind::Sgd,
            adam: AdamConfig {
                lr,
                beta1: 0.0,
                beta2: 0.0,
                eps: 0.0,
            },
            momentum,
            state: OptimizerState::zeros_like(params),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        match self.kind {
            OptimizerKind::Adam => adam_step(params, grads, &mut self.state, &self.adam),
            OptimizerKind::Sgd => {
                sgd_momentum_step(params, grads, &mut self.state, self.adam.lr, self.momentum)
            }
        }
    }
}
