use std::collections::HashSet;

use proptest::prelude::*;

use dfg_core::data::{
    denormalize, load_idx, make_step_imbalance, normalize, preprocess, read_idx_images, synth_dataset, write_idx,
    BatchSampler, Dataset, ImbalanceSpec, Step, SynthConfig, TensorDataset,
};
use dfg_core::DfgError;

/// Hand-assembled IDX pair: big-endian magic, counts, then raw bytes.
fn idx_fixture(images: &[u8], n: u32, h: u32, w: u32, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut img = vec![0, 0, 8, 3];
    for v in [n, h, w] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(images);
    let mut lab = vec![0, 0, 8, 1];
    lab.extend_from_slice(&n.to_be_bytes());
    lab.extend_from_slice(labels);
    (img, lab)
}

#[test]
fn idx_reads_independent_fixture_and_writes_it_back_byte_for_byte() {
    let pixels: Vec<u8> = (0..3 * 2 * 4).map(|i| (i * 11 % 256) as u8).collect();
    let (img, lab) = idx_fixture(&pixels, 3, 2, 4, &[2, 0, 1]);
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
    std::fs::write(&ip, &img).unwrap();
    std::fs::write(&lp, &lab).unwrap();

    let d = load_idx(&ip, &lp).unwrap();
    assert_eq!(d.len(), 3);
    assert_eq!(d.image_shape, [1, 2, 4]);
    assert_eq!(d.labels, vec![2, 0, 1]);
    assert_eq!(d.images, pixels);
    assert_eq!(d.n_classes, 3);

    let (ip2, lp2) = (dir.path().join("i2.idx"), dir.path().join("l2.idx"));
    write_idx(&d, &ip2, &lp2).unwrap();
    assert_eq!(std::fs::read(&ip2).unwrap(), img);
    assert_eq!(std::fs::read(&lp2).unwrap(), lab);
}

#[test]
fn idx_rejects_bad_magic_and_truncated_body() {
    let (mut img, _) = idx_fixture(&[0; 8], 2, 2, 2, &[0, 1]);
    let p = std::path::Path::new("x.idx");
    img.pop();
    assert!(matches!(read_idx_images(&img, p), Err(DfgError::Format { .. })));
    img[3] = 9;
    assert!(matches!(read_idx_images(&img, p), Err(DfgError::Format { .. })));
}

#[test]
fn synthetic_data_is_deterministic_per_seed() {
    let cfg = SynthConfig {
        per_class: 3,
        seed: 4,
        ..SynthConfig::default()
    };
    let a = synth_dataset(&cfg).unwrap();
    assert_eq!(a.len(), 30);
    assert_eq!(a, synth_dataset(&cfg).unwrap());
    let b = synth_dataset(&SynthConfig { seed: 5, ..cfg }).unwrap();
    assert_ne!(a.images, b.images);
}

#[test]
fn imbalance_example_counts() {
    let d = synth_dataset(&SynthConfig {
        per_class: 60,
        ..SynthConfig::default()
    })
    .unwrap();
    let spec = ImbalanceSpec {
        majority: vec![3, 7],
        ratio: 10.0,
        majority_count: 60,
        seed: 1,
    };
    let out = make_step_imbalance(&d, &spec).unwrap();
    let counts = out.class_counts();
    for (c, &n) in counts.iter().enumerate() {
        assert_eq!(n, if c == 3 || c == 7 { 60 } else { 6 }, "class {c}");
    }
    let too_many = ImbalanceSpec {
        majority_count: 61,
        ..spec
    };
    assert!(make_step_imbalance(&d, &too_many).is_err());
}

#[test]
fn pad_then_normalize_keeps_content_centered() {
    let d = Dataset::new("one", vec![255; 4], [1, 2, 2], vec![0], 1).unwrap();
    let t: TensorDataset<f64> = preprocess(&d, &[Step::Pad { height: 4, width: 4 }, Step::Normalize]).unwrap();
    assert_eq!(t.images.shape(), &[1, 1, 4, 4]);
    let px = t.images.data();
    for y in 0..4 {
        for x in 0..4 {
            let inside = (1..3).contains(&y) && (1..3).contains(&x);
            assert_eq!(px[y * 4 + x], if inside { 1.0 } else { -1.0 }, "({y}, {x})");
        }
    }
}

#[test]
fn sampler_drops_partial_batch() {
    let s = BatchSampler::new(130, 64, true, 0).unwrap();
    assert_eq!(s.batches_per_epoch(), 2);
    assert_eq!(s.effective_epoch_samples(), 128);
    assert!(BatchSampler::new(10, 11, true, 0).is_err());
    assert!(BatchSampler::new(10, 0, true, 0).is_err());
}

proptest! {
    #[test]
    fn normalize_round_trips_every_byte(v in 0u8..=255) {
        prop_assert_eq!(denormalize(normalize(v as f64)), v);
        let back = (normalize(v as f64) + 1.0) * 127.5;
        prop_assert!((back - v as f64).abs() <= 0.5 / 127.5);
    }

    #[test]
    fn imbalance_counts_are_exact_and_reproducible(
        majority_count in 5usize..40,
        ratio in 1.0f64..8.0,
        n_majority in 1usize..5,
        seed in 0u64..1000,
    ) {
        let d = synth_dataset(&SynthConfig { per_class: 40, size: 8, seed: 3, ..SynthConfig::default() }).unwrap();
        let majority = ImbalanceSpec::random_majority(10, n_majority, seed);
        prop_assert_eq!(majority.len(), n_majority);
        let spec = ImbalanceSpec { majority: majority.clone(), ratio, majority_count, seed };
        let out = make_step_imbalance(&d, &spec).unwrap();
        let minority = spec.minority_count();
        for (c, &n) in out.class_counts().iter().enumerate() {
            prop_assert_eq!(n, if majority.contains(&c) { majority_count } else { minority });
        }
        prop_assert_eq!(&out, &make_step_imbalance(&d, &spec).unwrap());
    }

    #[test]
    fn sampler_epochs_have_no_duplicates_and_replay(n in 2usize..200, m in 1usize..64, seed in 0u64..100) {
        prop_assume!(m <= n);
        let mut a = BatchSampler::new(n, m, true, seed).unwrap();
        let mut b = BatchSampler::new(n, m, true, seed).unwrap();
        let per = a.batches_per_epoch();
        for epoch in 0..2 {
            let mut seen = HashSet::new();
            for j in 0..per {
                let k = epoch * per + j;
                let batch = a.batch(k);
                prop_assert_eq!(batch.len(), m);
                for &i in &batch {
                    prop_assert!(i < n);
                    prop_assert!(seen.insert(i), "index {} twice in epoch {}", i, epoch);
                }
                prop_assert_eq!(batch, b.batch(k));
            }
        }
        // Random access gives the same batch as sequential access.
        let last = 2 * per - 1;
        let mut c = BatchSampler::new(n, m, true, seed).unwrap();
        prop_assert_eq!(c.batch(last), a.batch(last));
    }
}
