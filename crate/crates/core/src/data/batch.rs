use rand::seq::SliceRandom;

use super::TensorDataset;
use crate::error::{DfgError, Result};
use crate::rng::{self, purpose};
use crate::tensor::{Real, Tensor};

/// Deterministic minibatch indices with random access by global batch
/// number, so a resumed run sees the same sequence. Each epoch is a fresh
/// seeded permutation; the trailing partial batch is dropped.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    n: usize,
    m: usize,
    shuffle: bool,
    seed: u64,
    tag: u64,
    cached: Option<(usize, Vec<usize>)>,
}

impl BatchSampler {
    pub fn new(n: usize, m: usize, shuffle: bool, seed: u64) -> Result<Self> {
        if m == 0 || m > n {
            return Err(DfgError::invalid(format!(
                "batch size {m} must be in 1..={n} (dataset size)"
            )));
        }
        Ok(BatchSampler {
            n,
            m,
            shuffle,
            seed,
            tag: 0,
            cached: None,
        })
    }

    /// Separates several samplers that share a seed.
    pub fn with_tag(mut self, tag: u64) -> Self {
        self.tag = tag;
        self.cached = None;
        self
    }

    pub fn batch_size(&self) -> usize {
        self.m
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n / self.m
    }

    /// Samples actually seen per epoch once the partial batch is dropped.
    pub fn effective_epoch_samples(&self) -> usize {
        self.batches_per_epoch() * self.m
    }

    fn permutation(&mut self, epoch: usize) -> &[usize] {
        if self.cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut p: Vec<usize> = (0..self.n).collect();
            if self.shuffle {
                p.shuffle(&mut rng::stream(
                    self.seed,
                    &[purpose::BATCHES, self.tag, epoch as u64],
                ));
            }
            self.cached = Some((epoch, p));
        }
        &self.cached.as_ref().expect("just filled").1
    }

    /// Indices of global batch `k`.
    pub fn batch(&mut self, k: usize) -> Vec<usize> {
        let per = self.batches_per_epoch();
        let (epoch, j) = (k / per, k % per);
        let m = self.m;
        self.permutation(epoch)[j * m..(j + 1) * m].to_vec()
    }
}

/// Iterator over `(images, labels)` minibatches of a dataset, endless when
/// `epochs` is `None`.
pub struct Batches<'a, T: Real> {
    data: &'a TensorDataset<T>,
    sampler: BatchSampler,
    next: usize,
    end: Option<usize>,
}

impl<'a, T: Real> Batches<'a, T> {
    pub fn new(
        data: &'a TensorDataset<T>,
        m: usize,
        shuffle: bool,
        seed: u64,
        epochs: Option<usize>,
    ) -> Result<Self> {
        let sampler = BatchSampler::new(data.len(), m, shuffle, seed)?;
        let end = epochs.map(|e| e * sampler.batches_per_epoch());
        Ok(Batches {
            data,
            sampler,
            next: 0,
            end,
        })
    }
}

impl<T: Real> Iterator for Batches<'_, T> {
    type Item = (Tensor<T>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.end.is_some_and(|e| self.next >= e) {
            return None;
        }
        let idx = self.sampler.batch(self.next);
        self.next += 1;
        Some(self.data.gather(&idx).expect("sampler indices are in range"))
    }
}
