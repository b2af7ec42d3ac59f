use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{DfgError, Result};
use crate::rng::{self, purpose};

/// Gaussian-blob image generator.
///
/// Class `c` places a blob on a ring around the image centre at angle
/// `2 pi c / n_classes`, with a width from a three-step ladder. Each sample
/// jitters position, width and amplitude, adds pixel noise and, with
/// probability one half, inverts polarity. The polarity flip makes the
/// class distributions symmetric under `x -> 255 - x`, so no hyperplane in
/// pixel space separates two classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub per_class: usize,
    pub size: usize,
    /// Ring radius as a fraction of the image side.
    pub radius: f64,
    /// Uniform position jitter, fraction of the side.
    pub jitter: f64,
    /// Pixel noise standard deviation on the `[0, 1]` scale.
    pub noise: f64,
    /// Rotation of the class ring, in units of the angular class spacing.
    pub angle_offset: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_classes: 10,
            per_class: 100,
            size: 32,
            radius: 0.25,
            jitter: 0.09,
            noise: 0.12,
            angle_offset: 0.0,
            seed: 0,
        }
    }
}

fn render(cfg: &SynthConfig, class: usize, rng: &mut rng::Rng, out: &mut Vec<u8>) {
    let s = cfg.size as f64;
    let theta = std::f64::consts::TAU * (class as f64 + cfg.angle_offset) / cfg.n_classes as f64;
    let cx = s / 2.0 + cfg.radius * s * theta.cos() + rng.random_range(-1.0..=1.0) * cfg.jitter * s;
    let cy = s / 2.0 + cfg.radius * s * theta.sin() + rng.random_range(-1.0..=1.0) * cfg.jitter * s;
    let sigma = s * (0.05 + 0.025 * (class % 3) as f64) * rng.random_range(0.85..1.15);
    let amp = rng.random_range(0.6..1.0);
    let flip = rng.random_bool(0.5);
    let noise = Normal::new(0.0, cfg.noise).expect("non-negative noise");
    let inv = 1.0 / (2.0 * sigma * sigma);
    for y in 0..cfg.size {
        for x in 0..cfg.size {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let mut v = amp * (-(dx * dx + dy * dy) * inv).exp() + noise.sample(rng);
            if flip {
                v = 1.0 - v;
            }
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
}

/// Balanced single-channel dataset of `n_classes * per_class` images,
/// grouped by class. Identical bytes for identical configs.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.n_classes == 0 || cfg.per_class == 0 || cfg.size < 4 {
        return Err(DfgError::invalid(format!(
            "synthetic set needs classes, samples and a side of at least 4, got {cfg:?}"
        )));
    }
    if !(cfg.noise >= 0.0) {
        return Err(DfgError::invalid("noise must be non-negative"));
    }
    let n = cfg.n_classes * cfg.per_class;
    let mut images = Vec::with_capacity(n * cfg.size * cfg.size);
    let mut labels = Vec::with_capacity(n);
    for c in 0..cfg.n_classes {
        let mut rng = rng::stream(cfg.seed, &[purpose::SYNTH, c as u64]);
        for _ in 0..cfg.per_class {
            render(cfg, c, &mut rng, &mut images);
            labels.push(c);
        }
    }
    Dataset::new("synthetic", images, [1, cfg.size, cfg.size], labels, cfg.n_classes)
}
