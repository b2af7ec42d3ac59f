use rand::Rng as _;

use super::*;
use crate::arch::{LayerSpec, NetworkSpec};
use crate::rng;
use crate::tensor::check::finite_difference_check;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng::stream(seed, &[99]);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn cst(t: &Tensor<f64>) -> Var<f64> {
    Var::constant(t.clone())
}

#[test]
fn conv_shape_matches_lenet_first_layer() {
    let x = Var::constant(Tensor::<f32>::zeros(&[1, 1, 32, 32]));
    let p = Conv2dParams {
        weight: Var::constant(Tensor::zeros(&[6, 1, 5, 5])),
        bias: Var::constant(Tensor::zeros(&[6])),
        stride: 1,
        padding: 0,
    };
    assert_eq!(conv2d_forward(&x, &p).unwrap().shape(), &[1, 6, 28, 28]);
}

#[test]
fn identity_kernel_reproduces_input() {
    let x = random(&[2, 1, 5, 4], 1);
    let p = Conv2dParams {
        weight: Var::constant(Tensor::ones(&[1, 1, 1, 1])),
        bias: Var::constant(Tensor::zeros(&[1])),
        stride: 1,
        padding: 0,
    };
    assert_eq!(conv2d_forward(&cst(&x), &p).unwrap().value(), &x);
}

#[test]
fn conv_rejects_channel_mismatch() {
    let x = Var::constant(Tensor::<f64>::zeros(&[1, 2, 6, 6]));
    let p = Conv2dParams {
        weight: Var::constant(Tensor::zeros(&[4, 3, 3, 3])),
        bias: Var::constant(Tensor::zeros(&[4])),
        stride: 1,
        padding: 0,
    };
    assert!(conv2d_forward(&x, &p).is_err());
}

#[test]
fn transposed_conv_shapes_match_generator_rows() {
    let cases = [
        ([1, 128, 4, 4], [128, 48, 3, 3], 2, [1, 48, 9, 9]),
        ([1, 48, 9, 9], [48, 12, 3, 3], 1, [1, 12, 11, 11]),
        ([1, 12, 11, 11], [12, 6, 4, 4], 1, [1, 6, 14, 14]),
    ];
    for (xs, ws, stride, out) in cases {
        let p = TransposedConv2dParams {
            weight: Var::constant(Tensor::<f32>::zeros(&ws)),
            bias: Var::constant(Tensor::zeros(&[ws[1]])),
            stride,
            padding: 0,
        };
        let y = transposed_conv2d_forward(&Var::constant(Tensor::zeros(&xs)), &p).unwrap();
        assert_eq!(y.shape(), &out);
    }
}

#[test]
fn transposed_conv_is_adjoint_of_conv() {
    for (stride, pad) in [(1, 0), (2, 0), (2, 1), (1, 2)] {
        let x = random(&[2, 3, 7, 7], 10 + stride as u64);
        let w = random(&[4, 3, 3, 3], 20 + pad as u64);
        let cx = ops::conv2d(&cst(&x), &cst(&w), stride, pad).unwrap();
        let y = random(cx.shape(), 30);
        let ty = ops::conv_transpose2d_to(&cst(&y), &cst(&w), stride, pad, (7, 7)).unwrap();
        let lhs: f64 = cx.value().data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.value().data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-6 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}

fn bn_state<'a>(
    mean: &'a mut [f64],
    var: &'a mut [f64],
    mode: Mode,
) -> BatchNormState<'a, f64> {
    let c = mean.len();
    BatchNormState {
        scale: Var::constant(Tensor::ones(&[c])),
        shift: Var::constant(Tensor::zeros(&[c])),
        running_mean: mean,
        running_var: var,
        momentum: BN_MOMENTUM,
        eps: BN_EPS,
        mode,
    }
}

#[test]
fn batchnorm_constant_channel_gives_zeros() {
    let x = Tensor::full(&[4, 2, 3, 3], 2.5);
    let (mut m, mut v) = (vec![0.0; 2], vec![1.0; 2]);
    let y = batchnorm_forward(&cst(&x), &mut bn_state(&mut m, &mut v, Mode::Train)).unwrap();
    assert!(y.value().data().iter().all(|&a| a == 0.0));
}

#[test]
fn batchnorm_train_normalizes_and_updates_running_stats() {
    let x = random(&[8, 3, 4, 4], 5).map(|a| 3.0 * a + 1.0);
    let (mut m, mut v) = (vec![0.0; 3], vec![1.0; 3]);
    let y = batchnorm_forward(&cst(&x), &mut bn_state(&mut m, &mut v, Mode::Train)).unwrap();
    let (mean, var) = crate::tensor::kernels::channel_moments(y.value());
    for c in 0..3 {
        assert!(mean[c].abs() < 1e-6);
        assert!((var[c] - 1.0).abs() < 1e-3);
    }
    let (bm, bv) = crate::tensor::kernels::channel_moments(&x);
    let count = (8 * 16) as f64;
    for c in 0..3 {
        assert!((m[c] - 0.1 * bm[c]).abs() < 1e-12);
        assert!((v[c] - (0.9 + 0.1 * bv[c] * count / (count - 1.0))).abs() < 1e-12);
    }
}

#[test]
fn batchnorm_eval_with_unit_stats_is_affine() {
    let x = random(&[3, 2, 2, 2], 6);
    let (mut m, mut v) = (vec![0.0; 2], vec![1.0; 2]);
    let mut s = bn_state(&mut m, &mut v, Mode::Eval);
    s.scale = Var::constant(Tensor::new(&[2], vec![2.0, -1.0]).unwrap());
    s.shift = Var::constant(Tensor::new(&[2], vec![0.5, 0.25]).unwrap());
    let y = batchnorm_forward(&cst(&x), &mut s).unwrap();
    let k = 1.0 / (1.0 + BN_EPS).sqrt();
    for (i, (&a, &b)) in x.data().iter().zip(y.value().data()).enumerate() {
        let c = (i / 4) % 2;
        let expect = if c == 0 { 2.0 * a * k + 0.5 } else { -a * k + 0.25 };
        assert!((b - expect).abs() < 1e-12);
    }
}

#[test]
fn maxpool_shapes_and_brute_force() {
    let y = maxpool2d(&Var::constant(Tensor::<f32>::zeros(&[1, 6, 28, 28])), 2, 2).unwrap();
    assert_eq!(y.shape(), &[1, 6, 14, 14]);

    let c = maxpool2d(&cst(&Tensor::full(&[1, 1, 4, 4], 3.0)), 2, 2).unwrap();
    assert!(c.value().data().iter().all(|&a| a == 3.0));

    let x = random(&[1, 1, 4, 4], 7);
    let y = maxpool2d(&cst(&x), 2, 2).unwrap();
    for oy in 0..2 {
        for ox in 0..2 {
            let mut best = f64::NEG_INFINITY;
            for dy in 0..2 {
                for dx in 0..2 {
                    best = best.max(x.data()[(2 * oy + dy) * 4 + 2 * ox + dx]);
                }
            }
            assert_eq!(y.value().data()[oy * 2 + ox], best);
        }
    }
    assert!(maxpool2d(&cst(&x), 5, 1).is_err());
}

#[test]
fn activation_values() {
    let eq = activation(&cst(&Tensor::zeros(&[1, 10])), Activation::Softmax).unwrap();
    assert!(eq.value().data().iter().all(|&p| (p - 0.1).abs() < 1e-15));
    let t = activation(&cst(&Tensor::scalar(0.0)), Activation::Tanh).unwrap();
    assert_eq!(t.item(), 0.0);
    let r = activation(&cst(&Tensor::scalar(-1.0)), Activation::Relu).unwrap();
    assert_eq!(r.item(), 0.0);
    let l = activation(&cst(&Tensor::scalar(-2.0)), Activation::parse("leaky_relu").unwrap()).unwrap();
    assert!((l.item() + 0.4).abs() < 1e-15);
    assert!(Activation::parse("swish").is_err());
}

#[test]
fn softmax_rows_sum_to_one() {
    let x = random(&[5, 7], 8).map(|a| 20.0 * a);
    let p = activation(&cst(&x), Activation::Softmax).unwrap();
    for row in p.value().data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&v| v > 0.0));
    }
}

fn dense_spec(fan_in: usize, fan_out: usize) -> NetworkSpec {
    NetworkSpec::new("probe", vec![fan_in], vec![LayerSpec::dense(fan_out)])
}

#[test]
fn xavier_variance_and_zero_biases() {
    let params: Vec<Tensor<f64>> = init_parameters(&dense_spec(100, 200), InitScheme::Xavier, 11).unwrap();
    let w = &params[0];
    assert!(w.numel() >= 10_000);
    let n = w.numel() as f64;
    let mean = w.data().iter().sum::<f64>() / n;
    let var = w.data().iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let target = 2.0 / 300.0;
    assert!((var - target).abs() < 0.2 * target, "{var} vs {target}");
    assert!(params[1].data().iter().all(|&b| b == 0.0));
}

#[test]
fn he_variance() {
    let params: Vec<Tensor<f64>> = init_parameters(&dense_spec(100, 200), InitScheme::He, 12).unwrap();
    let w = &params[0];
    let n = w.numel() as f64;
    let var = w.data().iter().map(|a| a * a).sum::<f64>() / n;
    assert!((var - 0.02).abs() < 0.2 * 0.02);
}

#[test]
fn init_is_deterministic_per_seed() {
    let spec = dense_spec(10, 5);
    let a: Vec<Tensor<f32>> = init_parameters(&spec, InitScheme::Xavier, 3).unwrap();
    let b: Vec<Tensor<f32>> = init_parameters(&spec, InitScheme::Xavier, 3).unwrap();
    let c: Vec<Tensor<f32>> = init_parameters(&spec, InitScheme::Xavier, 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn class_weights_pick_rows_by_label() {
    let x = random(&[3, 2, 2, 2], 13);
    let w = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.5, 2.0]).unwrap();
    let y = apply_class_weights(&cst(&x), &w, &[0, 1, 0]).unwrap();
    for (i, (&a, &b)) in x.data().iter().zip(y.value().data()).enumerate() {
        let (s, c) = (i / 8, (i / 4) % 2);
        let label = [0, 1, 0][s];
        assert_eq!(b, a * w.data()[label * 2 + c]);
    }
    assert!(apply_class_weights(&cst(&x), &w, &[0, 2, 0]).is_err());
}

#[test]
fn layer_gradients_match_finite_differences() {
    let x = random(&[2, 2, 5, 5], 21);
    let w = random(&[3, 2, 3, 3], 22);
    let b = random(&[3], 23);
    let tw = random(&[2, 3, 3, 3], 24);
    let dw = random(&[4, 50], 25);
    let db = random(&[4], 26);
    let tol = 1e-6;

    let conv = |v: &Var<f64>| -> Result<Var<f64>> {
        let p = Conv2dParams {
            weight: cst(&w),
            bias: cst(&b),
            stride: 2,
            padding: 1,
        };
        Ok(ops::sum(&ops::square(&conv2d_forward(v, &p)?)?))
    };
    assert!(finite_difference_check(conv, &x, 1e-5).unwrap() < tol);

    let conv_w = |v: &Var<f64>| -> Result<Var<f64>> {
        let p = Conv2dParams {
            weight: v.clone(),
            bias: cst(&b),
            stride: 1,
            padding: 1,
        };
        Ok(ops::sum(&ops::tanh(&conv2d_forward(&cst(&x), &p)?)))
    };
    assert!(finite_difference_check(conv_w, &w, 1e-5).unwrap() < tol);

    let deconv = |v: &Var<f64>| -> Result<Var<f64>> {
        let p = TransposedConv2dParams {
            weight: cst(&tw),
            bias: cst(&b),
            stride: 2,
            padding: 0,
        };
        Ok(ops::sum(&ops::square(&transposed_conv2d_forward(v, &p)?)?))
    };
    assert!(finite_difference_check(deconv, &x, 1e-5).unwrap() < tol);

    let dense = |v: &Var<f64>| -> Result<Var<f64>> {
        let p = DenseParams {
            weight: cst(&dw),
            bias: cst(&db),
        };
        Ok(ops::sum(&ops::tanh(&dense_forward(v, &p)?)))
    };
    assert!(finite_difference_check(dense, &x, 1e-5).unwrap() < tol);

    let scale = random(&[2], 27);
    let bn = |v: &Var<f64>| -> Result<Var<f64>> {
        let (mut m, mut s) = (vec![0.0; 2], vec![1.0; 2]);
        let mut st = bn_state(&mut m, &mut s, Mode::Train);
        st.scale = cst(&scale);
        let y = batchnorm_forward(v, &mut st)?;
        Ok(ops::sum(&ops::mul_const(&ops::tanh(&y), &x)?))
    };
    assert!(finite_difference_check(bn, &x, 1e-5).unwrap() < tol);

    let pool = |v: &Var<f64>| -> Result<Var<f64>> {
        Ok(ops::sum(&ops::square(&maxpool2d(v, 2, 2)?)?))
    };
    assert!(finite_difference_check(pool, &x, 1e-6).unwrap() < tol);

    for kind in [Activation::Relu, Activation::LeakyRelu { slope: 0.2 }, Activation::Tanh] {
        let act = |v: &Var<f64>| -> Result<Var<f64>> {
            Ok(ops::sum(&ops::mul_const(&activation(v, kind)?, &x)?))
        };
        assert!(finite_difference_check(act, &x, 1e-6).unwrap() < tol, "{kind:?}");
    }
}
