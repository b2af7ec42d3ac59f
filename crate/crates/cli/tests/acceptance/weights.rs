//! Filter-weight math: softmax rows, class-wise normalisation, blend
//! endpoints, zero gradients through masked filters, and ablation against a
//! re-forward oracle with the filter's kernel removed.

use rand::Rng as _;

use dfg_core::arch::{build_lenet_split, SplitModel};
use dfg_core::attention::{
    ablation_gaps, blend_weights, classwise_weights, per_sample_filter_weights, threshold_mask,
    weighted_generator_output, WeightOrigin,
};
use dfg_core::nn::{BatchNormState, Mode, BN_EPS, BN_MOMENTUM};
use dfg_core::rng;
use dfg_core::tensor::{backward, kernels, ops};
use dfg_core::{Tensor, Var};

use crate::Check;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng::stream(seed, &[0xa77]);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn run() -> Check {
    let mut errors: Vec<String> = Vec::new();
    let mut model: SplitModel<f64> = build_lenet_split(1, 10, 3)?;
    let n = 40;
    let x = random(&[n, 1, 32, 32], 1);
    let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();

    // Softmax rows.
    let per_sample = per_sample_filter_weights(&mut model, &x, &labels)?;
    let n_f = 6;
    let worst_row = per_sample
        .chunks(n_f)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    if worst_row > 1e-12 {
        errors.push(format!("per-sample rows deviate from 1 by {worst_row:.2e}"));
    }

    // Class-wise rows have mean one.
    let w = classwise_weights(&per_sample, &labels, 10, n_f, WeightOrigin::Target)?;
    let worst_mean = (0..10).map(|c| (w.row_mean(c) - 1.0).abs()).fold(0.0, f64::max);
    if worst_mean > 1e-6 {
        errors.push(format!("class-wise row means deviate from 1 by {worst_mean:.2e}"));
    }

    // Blend endpoints are exact.
    let source = classwise_weights(
        &per_sample.iter().rev().copied().collect::<Vec<_>>(),
        &labels,
        10,
        n_f,
        WeightOrigin::Source,
    )?;
    if blend_weights(&source, &w, 1.0)?.values != source.values {
        errors.push("rho = 1 does not return the source weights".into());
    }
    if blend_weights(&source, &w, 0.0)?.values != w.values {
        errors.push("rho = 0 does not return the target weights".into());
    }

    // Masked filters pass no gradient to the generator's pre-activation.
    let masked = threshold_mask(&blend_weights(&source, &w, 0.75)?, 0.95);
    let zeros = masked.values.iter().filter(|&&v| v == 0.0).count();
    if zeros == 0 {
        errors.push("mask zeroed nothing; the gradient property is untested".into());
    }
    let m = 20;
    let pre = Var::parameter(random(&[m, n_f, 4, 4], 2));
    let gen_labels: Vec<usize> = (0..m).map(|i| (i * 3) % 10).collect();
    let (mut mean, mut var) = (vec![0.0; n_f], vec![1.0; n_f]);
    let mut bn = BatchNormState {
        scale: Var::constant(Tensor::ones(&[n_f])),
        shift: Var::constant(Tensor::zeros(&[n_f])),
        running_mean: &mut mean,
        running_var: &mut var,
        momentum: BN_MOMENTUM,
        eps: BN_EPS,
        mode: Mode::Train,
    };
    let out = weighted_generator_output(&pre, &masked, &gen_labels, &mut bn)?;
    let loss = ops::sum(&ops::mul_const(&out, &random(out.shape(), 3))?);
    let g = backward(&loss)?.get_or_zeros(&pre);
    let mut checked = 0;
    for (i, &y) in gen_labels.iter().enumerate() {
        for j in 0..n_f {
            if masked.get(y, j) == 0.0 {
                let block = &g.data()[(i * n_f + j) * 16..(i * n_f + j + 1) * 16];
                checked += 1;
                if block.iter().any(|&v| v != 0.0) {
                    errors.push(format!("sample {i} (class {y}) filter {j}: masked but gradient non-zero"));
                }
            }
        }
    }

    // Ablation gaps against a re-forward with filter j's kernel and bias zeroed.
    let (gaps, nf) = ablation_gaps(&mut model, &x, &labels)?;
    let base = kernels::cross_entropy_rows(&model.logits(&x, Mode::Eval)?, &labels)?;
    let conv_layer = model.extractor.spec().last_conv_layer().expect("extractor has a convolution");
    let range = model.extractor.layer_param_range(conv_layer);
    let mut mismatches = 0;
    for j in 0..nf {
        let mut ablated = model.clone();
        let params = ablated.extractor.params_mut();
        for p in &mut params[range.clone()] {
            let per_filter = p.numel() / nf;
            p.data_mut()[j * per_filter..(j + 1) * per_filter].fill(0.0);
        }
        let loss = kernels::cross_entropy_rows(&ablated.logits(&x, Mode::Eval)?, &labels)?;
        for i in 0..n {
            if gaps[i * nf + j] != loss[i] - base[i] {
                mismatches += 1;
            }
        }
    }
    if mismatches > 0 {
        errors.push(format!("{mismatches} ablation gaps differ from the re-forward oracle"));
    }

    if errors.is_empty() {
        Ok(format!(
            "row sums within {worst_row:.1e}, class means within {worst_mean:.1e}, {checked} masked blocks with zero gradient, {} ablation gaps exact",
            n * nf
        ))
    } else {
        Err(errors.join("; ").into())
    }
}
