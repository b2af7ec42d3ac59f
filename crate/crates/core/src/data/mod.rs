//! Datasets: IDX ingestion, preprocessing, synthetic generation, step
//! imbalance and batching.

mod batch;
mod idx;
mod imbalance;
mod preprocess;
mod synth;

pub use batch::{BatchSampler, Batches};
pub use idx::{load_idx, read_idx_images, read_idx_labels, write_idx};
pub use imbalance::{make_step_imbalance, ImbalanceSpec};
pub use preprocess::{denormalize, normalize, preprocess, Step};
pub use synth::{synth_dataset, SynthConfig};

use crate::error::{DfgError, Result};
use crate::tensor::{Real, Tensor};

/// Labelled 8-bit images, `[n, c, h, w]` row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub name: String,
    pub images: Vec<u8>,
    /// Per-image shape `[c, h, w]`.
    pub image_shape: [usize; 3],
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        images: Vec<u8>,
        image_shape: [usize; 3],
        labels: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self> {
        let d = Dataset {
            name: name.into(),
            images,
            image_shape,
            labels,
            n_classes,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let per = self.image_len();
        if per == 0 || self.images.len() != per * self.labels.len() {
            return Err(DfgError::shape(format!(
                "{}: {} bytes for {} images of shape {:?}",
                self.name,
                self.images.len(),
                self.labels.len(),
                self.image_shape
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.n_classes) {
            return Err(DfgError::invalid(format!(
                "{}: label {bad} out of range for {} classes",
                self.name, self.n_classes
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let p = self.image_len();
        &self.images[i * p..(i + 1) * p]
    }

    /// Samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    /// New dataset holding `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            name: self.name.clone(),
            images,
            image_shape: self.image_shape,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        }
    }
}

/// Preprocessed floating-point images ready for a network.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorDataset<T: Real> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl<T: Real> TensorDataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Images and labels at `indices`.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let x = self.images.select_batch(indices)?;
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let (images, labels) = self.gather(indices)?;
        Ok(TensorDataset {
            images,
            labels,
            n_classes: self.n_classes,
        })
    }
}
