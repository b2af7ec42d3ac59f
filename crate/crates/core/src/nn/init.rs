use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::arch::{NetworkSpec, ParamInit};
use crate::error::Result;
use crate::rng::{self, purpose};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`; variance `2 / (fan_in + fan_out)`.
    Xavier,
    /// Normal with variance `2 / fan_in`.
    He,
}

pub fn init_tensor<T: Real>(
    shape: &[usize],
    init: ParamInit,
    scheme: InitScheme,
    rng: &mut rng::Rng,
) -> Tensor<T> {
    match init {
        ParamInit::Zeros => Tensor::zeros(shape),
        ParamInit::Ones => Tensor::ones(shape),
        ParamInit::Scheme { fan_in, fan_out } => {
            let n: usize = shape.iter().product();
            let data: Vec<T> = match scheme {
                InitScheme::Xavier => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n).map(|_| T::lit(rng.random_range(-a..a))).collect()
                }
                InitScheme::He => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    let dist = Normal::new(0.0, std).expect("finite std");
                    (0..n).map(|_| T::lit(dist.sample(rng))).collect()
                }
            };
            Tensor::new(shape, data).expect("shape matches draw count")
        }
    }
}

fn name_tag(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325_u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Fresh parameters for `spec`, in slot order. Biases and batch-norm shifts
/// are zero, batch-norm scales one.
pub fn init_parameters<T: Real>(
    spec: &NetworkSpec,
    scheme: InitScheme,
    seed: u64,
) -> Result<Vec<Tensor<T>>> {
    let slots = spec.param_slots()?;
    let net_tag = name_tag(&spec.name);
    Ok(slots
        .iter()
        .enumerate()
        .map(|(i, slot)| {
            let mut r = rng::stream(seed, &[purpose::INIT, net_tag, i as u64]);
            init_tensor(&slot.shape, slot.init, scheme, &mut r)
        })
        .collect())
}
