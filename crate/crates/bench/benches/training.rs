use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use dfg_core::arch::{build_dcgan_pair, build_lenet_split, ForwardCtx, Network};
use dfg_core::data::{preprocess, synth_dataset, Step, SynthConfig};
use dfg_core::losses::critic_loss;
use dfg_core::nn::InitScheme;
use dfg_core::rng;
use dfg_core::tensor::backward;
use dfg_core::train::{DfgTrainer, GanSpecs, TrainConfig};
use dfg_core::Tensor;

fn critic_step(c: &mut Criterion) {
    let (_, spec) = build_dcgan_pair(&[6, 14, 14], 10, 100).unwrap();
    let critic = Network::<f32>::new(spec, InitScheme::Xavier, 1).unwrap();
    let real = Tensor::<f32>::ones(&[64, 6, 14, 14]);
    let fake = Tensor::<f32>::zeros(&[64, 6, 14, 14]);
    let ctx = ForwardCtx::train();
    c.bench_function("critic loss with penalty, batch 64, forward+backward", |b| {
        b.iter(|| {
            let mut net = critic.clone();
            let p = net.bind(true);
            let mut d = |x: &dfg_core::Var<f32>| net.forward(x, &p, &ctx);
            let mut r = rng::stream(0, &[]);
            let loss = critic_loss(&mut d, &real, &fake, 10.0, &mut r).unwrap();
            black_box(backward(&loss.total).unwrap())
        })
    });
}

fn dfg_iteration(c: &mut Criterion) {
    let raw = synth_dataset(&SynthConfig {
        per_class: 20,
        ..SynthConfig::default()
    })
    .unwrap();
    let data = preprocess::<f32>(&raw, &[Step::Normalize]).unwrap();
    let source = build_lenet_split::<f32>(1, 10, 0).unwrap();
    let cfg = TrainConfig {
        iterations: usize::MAX,
        batch_size: 8,
        n_w: 1_000_000,
        calibration_size: 50,
        ..TrainConfig::default()
    };
    let mut trainer = DfgTrainer::new(&cfg, &data, &source, GanSpecs::for_model(&source, cfg.z_dim).unwrap()).unwrap();
    let mut group = c.benchmark_group("dfg");
    group.sample_size(20);
    group.bench_function("one outer iteration, batch 8", |b| b.iter(|| black_box(trainer.step().unwrap())));
    group.finish();
}

criterion_group!(benches, critic_step, dfg_iteration);
criterion_main!(benches);
