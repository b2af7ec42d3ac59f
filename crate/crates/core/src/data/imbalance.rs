use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{DfgError, Result};
use crate::rng::{self, purpose};

/// Step imbalance: majority classes keep `majority_count` samples, every
/// other class keeps `majority_count / ratio` (rounded).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImbalanceSpec {
    pub majority: Vec<usize>,
    pub ratio: f64,
    pub majority_count: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ImbalanceSpec {
    pub fn minority_count(&self) -> usize {
        (self.majority_count as f64 / self.ratio).round() as usize
    }

    /// Target count of every class.
    pub fn target_counts(&self, n_classes: usize) -> Result<Vec<usize>> {
        if !(self.ratio >= 1.0) {
            return Err(DfgError::Config(format!(
                "imbalance ratio must be at least 1, got {}",
                self.ratio
            )));
        }
        if let Some(&c) = self.majority.iter().find(|&&c| c >= n_classes) {
            return Err(DfgError::Config(format!(
                "majority class {c} out of range for {n_classes} classes"
            )));
        }
        Ok((0..n_classes)
            .map(|c| {
                if self.majority.contains(&c) {
                    self.majority_count
                } else {
                    self.minority_count()
                }
            })
            .collect())
    }

    /// `count` majority classes drawn from `n_classes` with `seed`.
    pub fn random_majority(n_classes: usize, count: usize, seed: u64) -> Vec<usize> {
        let mut classes: Vec<usize> = (0..n_classes).collect();
        classes.shuffle(&mut rng::stream(seed, &[purpose::IMBALANCE, u64::MAX]));
        let mut m = classes[..count.min(n_classes)].to_vec();
        m.sort_unstable();
        m
    }
}

/// Subsamples each class to its target count without replacement.
pub fn make_step_imbalance(d: &Dataset, spec: &ImbalanceSpec) -> Result<Dataset> {
    let targets = spec.target_counts(d.n_classes)?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); d.n_classes];
    for (i, &y) in d.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut keep = Vec::with_capacity(targets.iter().sum());
    for (c, idx) in by_class.iter_mut().enumerate() {
        if targets[c] > idx.len() {
            return Err(DfgError::invalid(format!(
                "{}: class {c} has {} samples, {} requested",
                d.name,
                idx.len(),
                targets[c]
            )));
        }
        idx.shuffle(&mut rng::stream(spec.seed, &[purpose::IMBALANCE, c as u64]));
        keep.extend_from_slice(&idx[..targets[c]]);
    }
    keep.sort_unstable();
    Ok(d.subset(&keep))
}
