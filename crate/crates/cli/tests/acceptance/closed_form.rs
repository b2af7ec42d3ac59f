use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;

use dfg_core::eval::pca_project;
use dfg_core::losses::penalty_at;
use dfg_core::rng;
use dfg_core::tensor::ops;
use dfg_core::{Tensor, Var};

use crate::Check;

/// Box-Muller standard normal.
fn normal(r: &mut rng::Rng) -> f64 {
    let u: f64 = r.random_range(f64::EPSILON..1.0);
    let v: f64 = r.random();
    (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
}

/// A linear critic `D(x) = w . x` has input gradient `w` everywhere, so the
/// penalty is `lambda * (||w|| - 1)^2` at any point set.
pub fn penalty() -> Check {
    let mut r = rng::stream(8, &[]);
    let points = Tensor::<f64>::new(&[16, 4], (0..64).map(|_| r.random_range(-3.0..3.0)).collect())?;
    let gp = |w: [f64; 4]| -> dfg_core::Result<f64> {
        let w = Var::constant(Tensor::new(&[4, 1], w.to_vec())?);
        let mut critic = |x: &Var<f64>| ops::matmul(x, &w, false, false);
        Ok(penalty_at(&mut critic, &points, 10.0)?.item())
    };
    // ||w|| = 3 and ||w|| = 1.
    let three = gp([1.0, 2.0, 2.0, 0.0])?;
    let one = gp([0.6, 0.0, 0.0, -0.8])?;
    let mut errors = Vec::new();
    if (three - 40.0).abs() > 1e-9 {
        errors.push(format!("||w|| = 3 gives {three}, expected 40"));
    }
    if one.abs() > 1e-9 {
        errors.push(format!("||w|| = 1 gives {one}, expected 0"));
    }
    if errors.is_empty() {
        Ok(format!("GP = {three:.12} for ||w|| = 3, {one:.1e} for ||w|| = 1"))
    } else {
        Err(errors.join("; ").into())
    }
}

/// Power-iteration PCA against a dense symmetric eigendecomposition of the
/// same covariance.
pub fn pca() -> Check {
    let (n, d, k, trials) = (50, 20, 3, 20);
    let mut worst_cos: f64 = 1.0;
    let mut worst_ratio: f64 = 0.0;
    for t in 0..trials {
        let mut r = rng::stream(t, &[0x9ca]);
        // Columns with distinct scales so the leading eigenvalues separate.
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|j| normal(&mut r) * (1.0 + j as f64 * 0.3)).collect())
            .collect();
        let pca = pca_project(&rows, k)?;

        let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|x| x[j]).sum::<f64>() / n as f64).collect();
        let centred = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
        let cov = centred.transpose() * &centred / (n - 1) as f64;
        let total = cov.trace();
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        for (c, &idx) in order.iter().take(k).enumerate() {
            let v = eig.eigenvectors.column(idx);
            let cos = pca.components[c].iter().zip(v.iter()).map(|(a, b)| a * b).sum::<f64>().abs();
            worst_cos = worst_cos.min(cos);
            let ratio = eig.eigenvalues[idx] / total;
            worst_ratio = worst_ratio.max((ratio - pca.explained_variance_ratio[c]).abs());
        }
    }
    if worst_cos > 0.999 && worst_ratio < 1e-6 {
        Ok(format!(
            "{trials} random {n}x{d} matrices, top {k} components: min |cos| {worst_cos:.9}, max ratio error {worst_ratio:.1e}"
        ))
    } else {
        Err(format!("min |cos| {worst_cos}, max variance-ratio error {worst_ratio:.2e}").into())
    }
}
