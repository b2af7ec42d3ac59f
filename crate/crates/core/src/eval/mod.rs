//! Metrics, multi-run aggregation, PCA and CSV exports.

mod pca;
mod sweep;

pub use pca::{pca_project, Pca, PCA_MAX_ITER, PCA_TOL};
pub use sweep::{sweep_rho, write_sweep, SweepRow};

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::{ForwardCtx, Network, SplitModel};
use crate::attention::MaskedWeights;
use crate::data::TensorDataset;
use crate::error::{DfgError, Result};
use crate::nn::Mode;
use crate::rng::{self, purpose};
use crate::tensor::{no_grad, Real, Var};
use crate::train::{predict, sample_noise_and_labels};

/// Test-set metrics of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config_hash: String,
    pub n_samples: usize,
    /// `correct / total` over all samples.
    pub overall_accuracy: f64,
    /// Share of class-`c` samples predicted as `c`.
    pub per_class_recall: Vec<f64>,
    /// One-vs-rest accuracy of class `c`: `(TP + TN) / total`.
    pub per_class_accuracy: Vec<f64>,
    /// Seconds of training; not written to `report.csv`.
    pub wall_time_secs: f64,
}

impl RunReport {
    /// Mean recall over `classes` (e.g. the minority classes).
    pub fn mean_recall(&self, classes: &[usize]) -> f64 {
        if classes.is_empty() {
            return f64::NAN;
        }
        classes.iter().map(|&c| self.per_class_recall[c]).sum::<f64>() / classes.len() as f64
    }
}

/// Scores `predictions` against `labels`.
pub fn score(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<RunReport> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(DfgError::shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let n = labels.len();
    let mut tp = vec![0usize; n_classes];
    let mut support = vec![0usize; n_classes];
    let mut predicted = vec![0usize; n_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y >= n_classes || p >= n_classes {
            return Err(DfgError::invalid(format!("class index out of range for {n_classes} classes")));
        }
        support[y] += 1;
        predicted[p] += 1;
        if p == y {
            tp[y] += 1;
        }
    }
    let correct: usize = tp.iter().sum();
    let per_class_recall = (0..n_classes)
        .map(|c| if support[c] == 0 { 0.0 } else { tp[c] as f64 / support[c] as f64 })
        .collect();
    let per_class_accuracy = (0..n_classes)
        .map(|c| {
            let fp = predicted[c] - tp[c];
            let fn_ = support[c] - tp[c];
            (n - fp - fn_) as f64 / n as f64
        })
        .collect();
    Ok(RunReport {
        seed: 0,
        config_hash: String::new(),
        n_samples: n,
        overall_accuracy: correct as f64 / n as f64,
        per_class_recall,
        per_class_accuracy,
        wall_time_secs: 0.0,
    })
}

/// Eval-mode predictions of `model` on `data`.
pub fn evaluate<T: Real>(
    model: &mut SplitModel<T>,
    data: &TensorDataset<T>,
    seed: u64,
    config_hash: &str,
) -> Result<RunReport> {
    if data.n_classes > model.n_classes() {
        return Err(DfgError::shape(format!(
            "test data has {} classes, model {}",
            data.n_classes,
            model.n_classes()
        )));
    }
    let pred = predict(model, &data.images)?;
    let mut r = score(&pred, &data.labels, model.n_classes())?;
    r.seed = seed;
    r.config_hash = config_hash.to_string();
    Ok(r)
}

/// Writes `report.csv`: one row per run with overall accuracy, then
/// per-class recall and one-vs-rest accuracy.
pub fn write_report<W: Write>(out: W, reports: &[RunReport]) -> Result<()> {
    let n_classes = reports.first().map_or(0, |r| r.per_class_recall.len());
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| DfgError::Io(e.into());
    let mut header = vec!["seed".to_string(), "config_hash".into(), "n_samples".into(), "overall_accuracy".into()];
    header.extend((0..n_classes).map(|c| format!("recall_{c}")));
    header.extend((0..n_classes).map(|c| format!("class_accuracy_{c}")));
    w.write_record(&header).map_err(io)?;
    for r in reports {
        if r.per_class_recall.len() != n_classes {
            return Err(DfgError::shape("reports disagree on the class count"));
        }
        let mut row = vec![
            r.seed.to_string(),
            r.config_hash.clone(),
            r.n_samples.to_string(),
            r.overall_accuracy.to_string(),
        ];
        row.extend(r.per_class_recall.iter().map(f64::to_string));
        row.extend(r.per_class_accuracy.iter().map(f64::to_string));
        w.write_record(&row).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_report_file(path: &Path, reports: &[RunReport]) -> Result<()> {
    let mut buf = Vec::new();
    write_report(&mut buf, reports)?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// Mean and sample standard deviation of one metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// `k - 1` denominator; 0 when `k == 1`.
    pub std: f64,
    pub k: usize,
    /// Set when `k == 1`, so the zero spread is not a measurement.
    pub single_run: bool,
}

pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    let k = values.len();
    if k == 0 {
        return Err(DfgError::invalid("aggregate of zero runs"));
    }
    let mean = values.iter().sum::<f64>() / k as f64;
    let std = if k == 1 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt()
    };
    Ok(Aggregate {
        mean,
        std,
        k,
        single_run: k == 1,
    })
}

/// Per-metric aggregates over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub overall_accuracy: Aggregate,
    pub per_class_recall: Vec<Aggregate>,
}

pub fn aggregate_reports(reports: &[RunReport]) -> Result<AggregateReport> {
    let first = reports.first().ok_or_else(|| DfgError::invalid("no reports"))?;
    let n_classes = first.per_class_recall.len();
    let overall: Vec<f64> = reports.iter().map(|r| r.overall_accuracy).collect();
    let per_class_recall = (0..n_classes)
        .map(|c| aggregate(&reports.iter().map(|r| r.per_class_recall[c]).collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    Ok(AggregateReport {
        overall_accuracy: aggregate(&overall)?,
        per_class_recall,
    })
}

/// Writes `features.csv`: real features of `data` and `n_fake` generated
/// ones, flattened, with columns `origin,label,f_1..f_k`. The generator runs
/// in eval mode with the class weights `masked`.
pub fn export_features<T: Real, W: Write>(
    out: W,
    model: &mut SplitModel<T>,
    generator: Option<(&mut Network<T>, &MaskedWeights)>,
    data: &TensorDataset<T>,
    n_fake: usize,
    seed: u64,
) -> Result<()> {
    let _g = no_grad();
    let k: usize = model.feature_shape().iter().product();
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| DfgError::Io(e.into());
    let mut header = vec!["origin".to_string(), "label".into()];
    header.extend((1..=k).map(|i| format!("f_{i}")));
    w.write_record(&header).map_err(io)?;

    let pe = model.extractor.bind(false);
    const CHUNK: usize = 256;
    let mut start = 0;
    while start < data.len() {
        let len = CHUNK.min(data.len() - start);
        let x = data.images.slice_batch(start, len)?;
        let f = model.extract(&Var::constant(x), &pe, Mode::Eval)?;
        for (i, row) in f.value().data().chunks(k).enumerate() {
            let mut rec = vec!["real".to_string(), data.labels[start + i].to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(io)?;
        }
        start += len;
    }

    if n_fake > 0 {
        let (generator, masked) =
            generator.ok_or_else(|| DfgError::invalid("generated rows requested without a generator"))?;
        let z_dim = generator.spec().input_shape[0];
        let mut r = rng::stream(seed, &[purpose::NOISE, u64::MAX]);
        let (z, labels) = sample_noise_and_labels::<T>(n_fake, z_dim, model.n_classes(), &mut r)?;
        let weights = masked.to_tensor();
        let ctx = ForwardCtx::eval()
            .with_labels(&labels)
            .with_class_weights(Some(&weights));
        let pg = generator.bind(false);
        let fake = generator.forward(&Var::constant(z), &pg, &ctx)?;
        for (i, row) in fake.value().data().chunks(k).enumerate() {
            let mut rec = vec!["generated".to_string(), labels[i].to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}
