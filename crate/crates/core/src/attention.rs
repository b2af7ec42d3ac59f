//! Filter importance by single-filter ablation and its class-wise use in the
//! generator.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::arch::{ForwardCtx, SplitModel};
use crate::error::{DfgError, Result};
use crate::nn::{self, BatchNormState, Mode};
use crate::rng::{self, purpose};
use crate::tensor::{kernels, no_grad, ops, Real, Tensor, Var};

/// Samples per ablation forward pass.
const ABLATION_CHUNK: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightOrigin {
    Source,
    Target,
    Blended,
}

/// Class-wise filter weights, `n_classes x n_filters`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterWeights {
    pub values: Vec<f64>,
    pub n_classes: usize,
    pub n_filters: usize,
    pub origin: WeightOrigin,
    /// Classes without calibration samples; their rows are all ones.
    pub empty_classes: Vec<usize>,
}

impl FilterWeights {
    pub fn uniform(n_classes: usize, n_filters: usize, origin: WeightOrigin) -> Self {
        FilterWeights {
            values: vec![1.0; n_classes * n_filters],
            n_classes,
            n_filters,
            origin,
            empty_classes: Vec::new(),
        }
    }

    pub fn row(&self, c: usize) -> &[f64] {
        &self.values[c * self.n_filters..(c + 1) * self.n_filters]
    }

    pub fn get(&self, c: usize, j: usize) -> f64 {
        self.values[c * self.n_filters + j]
    }

    pub fn row_mean(&self, c: usize) -> f64 {
        self.row(c).iter().sum::<f64>() / self.n_filters as f64
    }

    fn same_shape(&self, other: &FilterWeights) -> Result<()> {
        if self.n_classes != other.n_classes || self.n_filters != other.n_filters {
            return Err(DfgError::shape(format!(
                "filter weights {}x{} vs {}x{}",
                self.n_classes, self.n_filters, other.n_classes, other.n_filters
            )));
        }
        Ok(())
    }
}

/// Thresholded class-wise weights. The pre-mask matrix is kept for export
/// and for re-deriving the mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedWeights {
    pub values: Vec<f64>,
    pub unmasked: FilterWeights,
    pub delta: f64,
    /// Per-class cut-off `delta * rowmean`.
    pub thresholds: Vec<f64>,
}

impl MaskedWeights {
    pub fn n_classes(&self) -> usize {
        self.unmasked.n_classes
    }

    pub fn n_filters(&self) -> usize {
        self.unmasked.n_filters
    }

    pub fn get(&self, c: usize, j: usize) -> f64 {
        self.values[c * self.n_filters() + j]
    }

    /// `[n_classes, n_filters]` multiplier table for the generator.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            &[self.n_classes(), self.n_filters()],
            self.values.iter().map(|&v| T::lit(v)).collect(),
        )
        .expect("matrix extents")
    }

    /// All-ones weights (no masking), used before the first refresh.
    pub fn identity(n_classes: usize, n_filters: usize) -> Self {
        threshold_mask(&FilterWeights::uniform(n_classes, n_filters, WeightOrigin::Blended), 0.0)
    }
}

/// Index of the extractor's last convolution and its filter count.
fn ablation_layer<T: Real>(model: &SplitModel<T>) -> Result<(usize, usize)> {
    let layer = model
        .extractor
        .spec()
        .last_conv_layer()
        .ok_or_else(|| DfgError::invalid("extractor has no convolution layer"))?;
    let n_f = model.extractor.layer_output_shape(layer)[0];
    if n_f == 0 {
        return Err(DfgError::invalid("last extractor convolution has no filters"));
    }
    Ok((layer, n_f))
}

/// Per-sample filter importance: for each sample, the increase in
/// cross-entropy when filter `j` of the extractor's last convolution is
/// zeroed, passed through a softmax over `j`. Returns `n x n_f` row-major.
///
/// Runs in eval mode so a sample's row does not depend on its batch.
pub fn per_sample_filter_weights<T: Real>(
    model: &mut SplitModel<T>,
    x: &Tensor<T>,
    labels: &[usize],
) -> Result<Vec<f64>> {
    let (gaps, n_f) = ablation_gaps(model, x, labels)?;
    let mut out = Vec::with_capacity(gaps.len());
    for row in gaps.chunks(n_f) {
        out.extend(softmax(row));
    }
    Ok(out)
}

/// Raw loss gaps `CE(filter j zeroed) - CE(baseline)`, `n x n_f`.
pub fn ablation_gaps<T: Real>(
    model: &mut SplitModel<T>,
    x: &Tensor<T>,
    labels: &[usize],
) -> Result<(Vec<f64>, usize)> {
    if x.batch() != labels.len() {
        return Err(DfgError::shape(format!(
            "{} labels for {} samples",
            labels.len(),
            x.batch()
        )));
    }
    let (layer, n_f) = ablation_layer(model)?;
    let _guard = no_grad();
    let pe = model.extractor.bind(false);
    let pc = model.classifier.bind(false);
    let n_layers = model.extractor.num_layers();
    let ctx = ForwardCtx::eval();
    let mut gaps = Vec::with_capacity(labels.len() * n_f);
    for start in (0..labels.len()).step_by(ABLATION_CHUNK) {
        let len = ABLATION_CHUNK.min(labels.len() - start);
        let xb = Var::constant(x.slice_batch(start, len)?);
        let yb = &labels[start..start + len];
        let h = model.extractor.forward_layers(&xb, &pe, &ctx, 0..layer + 1)?;
        let mut tail = |h: &Var<T>| -> Result<Vec<T>> {
            let f = model.extractor.forward_layers(h, &pe, &ctx, layer + 1..n_layers)?;
            let logits = model.classify(&f, &pc, Mode::Eval)?;
            kernels::cross_entropy_rows(logits.value(), yb)
        };
        let base = tail(&h)?;
        let mut per_filter = Vec::with_capacity(n_f);
        for j in 0..n_f {
            per_filter.push(tail(&Var::constant(zero_channel(h.value(), j)))?);
        }
        for i in 0..len {
            for loss in &per_filter {
                gaps.push(loss[i].as_f64() - base[i].as_f64());
            }
        }
    }
    Ok((gaps, n_f))
}

fn zero_channel<T: Real>(h: &Tensor<T>, j: usize) -> Tensor<T> {
    let s = h.shape();
    let p: usize = s[2..].iter().product();
    let mut out = h.clone();
    let c = s[1];
    let data = out.data_mut();
    for n in 0..s[0] {
        data[(n * c + j) * p..(n * c + j + 1) * p].fill(T::zero());
    }
    out
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `W[c, j] = n_f * mean of per-sample weight j over samples of class c`.
pub fn classwise_weights(
    per_sample: &[f64],
    labels: &[usize],
    n_classes: usize,
    n_filters: usize,
    origin: WeightOrigin,
) -> Result<FilterWeights> {
    if n_filters == 0 || per_sample.len() != labels.len() * n_filters {
        return Err(DfgError::shape(format!(
            "{} per-sample weights for {} samples of {n_filters} filters",
            per_sample.len(),
            labels.len()
        )));
    }
    let mut sums = vec![0.0; n_classes * n_filters];
    let mut counts = vec![0usize; n_classes];
    for (row, &y) in per_sample.chunks(n_filters).zip(labels) {
        if y >= n_classes {
            return Err(DfgError::invalid(format!(
                "label {y} out of range for {n_classes} classes"
            )));
        }
        counts[y] += 1;
        for (s, &v) in sums[y * n_filters..(y + 1) * n_filters].iter_mut().zip(row) {
            *s += v;
        }
    }
    let mut empty_classes = Vec::new();
    for c in 0..n_classes {
        let row = &mut sums[c * n_filters..(c + 1) * n_filters];
        if counts[c] == 0 {
            row.fill(1.0);
            empty_classes.push(c);
        } else {
            let k = n_filters as f64 / counts[c] as f64;
            row.iter_mut().for_each(|v| *v *= k);
        }
    }
    Ok(FilterWeights {
        values: sums,
        n_classes,
        n_filters,
        origin,
        empty_classes,
    })
}

/// `rho * source + (1 - rho) * target`, entrywise.
pub fn blend_weights(source: &FilterWeights, target: &FilterWeights, rho: f64) -> Result<FilterWeights> {
    source.same_shape(target)?;
    if !(0.0..=1.0).contains(&rho) {
        return Err(DfgError::invalid(format!("blend coefficient {rho} outside [0, 1]")));
    }
    let values = source
        .values
        .iter()
        .zip(&target.values)
        .map(|(&s, &t)| rho * s + (1.0 - rho) * t)
        .collect();
    let mut empty_classes: Vec<usize> = source
        .empty_classes
        .iter()
        .chain(&target.empty_classes)
        .copied()
        .collect();
    empty_classes.sort_unstable();
    empty_classes.dedup();
    Ok(FilterWeights {
        values,
        n_classes: source.n_classes,
        n_filters: source.n_filters,
        origin: WeightOrigin::Blended,
        empty_classes,
    })
}

/// Zeroes entries below `delta * rowmean` in each class row.
pub fn threshold_mask(w: &FilterWeights, delta: f64) -> MaskedWeights {
    let mut values = w.values.clone();
    let mut thresholds = Vec::with_capacity(w.n_classes);
    for c in 0..w.n_classes {
        let t = delta * w.row_mean(c);
        thresholds.push(t);
        for v in &mut values[c * w.n_filters..(c + 1) * w.n_filters] {
            if *v < t {
                *v = 0.0;
            }
        }
    }
    MaskedWeights {
        values,
        unmasked: w.clone(),
        delta,
        thresholds,
    }
}

/// `norm(W*[y] * tanh(pre))`: the generator's output stage, on its own.
pub fn weighted_generator_output<T: Real>(
    pre_activation: &Var<T>,
    weights: &MaskedWeights,
    labels: &[usize],
    bn: &mut BatchNormState<'_, T>,
) -> Result<Var<T>> {
    if pre_activation.value().rank() < 2 || pre_activation.shape()[1] != weights.n_filters() {
        return Err(DfgError::shape(format!(
            "generator output {:?} does not have {} channels",
            pre_activation.shape(),
            weights.n_filters()
        )));
    }
    let t = ops::tanh(pre_activation);
    let w = nn::apply_class_weights(&t, &weights.to_tensor(), labels)?;
    nn::batchnorm_forward(&w, bn)
}

/// `size` indices drawn evenly across classes (as far as each class allows),
/// in a seeded order.
pub fn calibration_indices(labels: &[usize], n_classes: usize, size: usize, seed: u64) -> Vec<usize> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y < n_classes {
            by_class[y].push(i);
        }
    }
    let mut r = rng::stream(seed, &[purpose::CALIBRATION]);
    for idx in &mut by_class {
        idx.shuffle(&mut r);
    }
    let mut picked = Vec::with_capacity(size.min(labels.len()));
    let mut round = 0;
    while picked.len() < size {
        let before = picked.len();
        for idx in &by_class {
            if picked.len() == size {
                break;
            }
            if let Some(&i) = idx.get(round) {
                picked.push(i);
            }
        }
        if picked.len() == before {
            break;
        }
        round += 1;
    }
    picked.sort_unstable();
    picked
}

/// Class-wise weights of a model on calibration data.
pub fn model_weights<T: Real>(
    model: &mut SplitModel<T>,
    x: &Tensor<T>,
    labels: &[usize],
    origin: WeightOrigin,
) -> Result<FilterWeights> {
    let (_, n_f) = ablation_layer(model)?;
    let per_sample = per_sample_filter_weights(model, x, labels)?;
    classwise_weights(&per_sample, labels, model.n_classes(), n_f, origin)
}

/// Everything one refresh produced, kept for export.
#[derive(Clone, Debug, PartialEq)]
pub struct Refresh {
    pub target: FilterWeights,
    pub blended: FilterWeights,
    pub masked: MaskedWeights,
}

/// Target weights on the calibration set, blended with `source` by `rho`
/// and masked at `delta`.
pub fn refresh_weights<T: Real>(
    model: &mut SplitModel<T>,
    x: &Tensor<T>,
    labels: &[usize],
    source: &FilterWeights,
    rho: f64,
    delta: f64,
) -> Result<Refresh> {
    let target = model_weights(model, x, labels, WeightOrigin::Target)?;
    let blended = blend_weights(source, &target, rho)?;
    let masked = threshold_mask(&blended, delta);
    Ok(Refresh {
        target,
        blended,
        masked,
    })
}

/// CSV with one row per (class, filter). Before the first refresh pass
/// `None`: the target column is left empty and the blended column holds
/// the source weights the mask was derived from.
pub fn export_filter_weights(
    path: &Path,
    source: &FilterWeights,
    masked: &MaskedWeights,
    refresh: Option<&Refresh>,
) -> Result<()> {
    let mut out = Vec::new();
    write_filter_weights(&mut out, source, masked, refresh)?;
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_filter_weights<W: Write>(
    out: W,
    source: &FilterWeights,
    masked: &MaskedWeights,
    refresh: Option<&Refresh>,
) -> Result<()> {
    source.same_shape(&masked.unmasked)?;
    if let Some(r) = refresh {
        source.same_shape(&r.target)?;
    }
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| DfgError::Io(e.into());
    w.write_record([
        "class",
        "filter_index",
        "weight_source",
        "weight_target",
        "weight_blended",
        "weight_masked",
    ])
    .map_err(io)?;
    for c in 0..source.n_classes {
        for j in 0..source.n_filters {
            let target = refresh.map_or(String::new(), |r| r.target.get(c, j).to_string());
            w.write_record([
                c.to_string(),
                j.to_string(),
                source.get(c, j).to_string(),
                target,
                masked.unmasked.get(c, j).to_string(),
                masked.get(c, j).to_string(),
            ])
            .map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}
