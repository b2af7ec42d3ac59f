use rand::Rng as _;

use crate::error::{DfgError, Result};
use crate::rng;

pub const PCA_TOL: f64 = 1e-9;
pub const PCA_MAX_ITER: usize = 1000;

/// Leading principal components of a sample matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit-norm directions, one per row.
    pub components: Vec<Vec<f64>>,
    /// Variance along each component over the total variance.
    pub explained_variance_ratio: Vec<f64>,
    /// `n x components.len()` scores of the centred samples.
    pub projected: Vec<Vec<f64>>,
    /// Set when fewer than the requested components carry variance.
    pub rank_deficient: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn mat_vec(m: &[f64], d: usize, v: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(&m[i * d..(i + 1) * d], v);
    }
}

/// Projects `rows` (n samples of dimension d) onto its top `dims` principal
/// directions, found by power iteration on the covariance with deflation.
/// Each component's sign is fixed so its largest-magnitude entry is
/// positive.
pub fn pca_project(rows: &[Vec<f64>], dims: usize) -> Result<Pca> {
    let n = rows.len();
    if dims == 0 || n < dims + 1 {
        return Err(DfgError::invalid(format!(
            "{dims} components need at least {} samples, got {n}",
            dims + 1
        )));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(DfgError::shape("feature rows must be non-empty and of equal length"));
    }
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();

    let mut cov = vec![0.0; d * d];
    for r in &centred {
        for i in 0..d {
            let ri = r[i];
            if ri == 0.0 {
                continue;
            }
            let row = &mut cov[i * d..(i + 1) * d];
            for (c, &rj) in row.iter_mut().zip(r) {
                *c += ri * rj;
            }
        }
    }
    let denom = (n - 1) as f64;
    cov.iter_mut().for_each(|c| *c /= denom);
    let total: f64 = (0..d).map(|i| cov[i * d + i]).sum();

    let mut components = Vec::new();
    let mut ratios = Vec::new();
    let mut rank_deficient = false;
    let mut r = rng::stream(0, &[0x5ca1ab1e]);
    let mut next = vec![0.0; d];
    for _ in 0..dims.min(d) {
        if total <= 0.0 {
            rank_deficient = true;
            break;
        }
        let mut v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        normalize(&mut v);
        for _ in 0..PCA_MAX_ITER {
            mat_vec(&cov, d, &v, &mut next);
            if normalize(&mut next) == 0.0 {
                break;
            }
            let diff = next.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            std::mem::swap(&mut v, &mut next);
            if diff < PCA_TOL {
                break;
            }
        }
        mat_vec(&cov, d, &v, &mut next);
        let lambda = dot(&v, &next);
        if lambda <= total * 1e-12 {
            rank_deficient = true;
            break;
        }
        let pivot = v
            .iter()
            .copied()
            .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        ratios.push(lambda / total);
        components.push(v);
    }
    if components.len() < dims {
        rank_deficient = true;
    }
    let projected = centred
        .iter()
        .map(|r| components.iter().map(|c| dot(r, c)).collect())
        .collect();
    Ok(Pca {
        mean,
        components,
        explained_variance_ratio: ratios,
        projected,
        rank_deficient,
    })
}
