//! A 200-iteration instrumented run: every update count and every weight
//! refresh lands exactly where the schedule puts it.

use dfg_core::arch::build_lenet_split;
use dfg_core::data::{preprocess, synth_dataset, Step, SynthConfig};
use dfg_core::train::{DfgTrainer, GanSpecs, TrainConfig, UpdateCounts};

use crate::Check;

pub fn run() -> Check {
    let iterations = 200;
    let cfg = TrainConfig {
        iterations,
        batch_size: 4,
        n_critic: 5,
        n_c1: 2,
        n_c2: 10,
        n_w: 50,
        calibration_size: 40,
        seed: 9,
        ..TrainConfig::default()
    };
    let raw = synth_dataset(&SynthConfig {
        per_class: 8,
        ..SynthConfig::default()
    })?;
    let data = preprocess::<f32>(&raw, &[Step::Normalize])?;
    let source = build_lenet_split::<f32>(1, 10, 2)?;
    let gan = GanSpecs::for_model(&source, cfg.z_dim)?;
    let mut trainer = DfgTrainer::new(&cfg, &data, &source, gan)?;
    let mut refreshed_at = Vec::new();
    let mut per_step_errors = Vec::new();
    trainer.run(|t, row| {
        let before = refreshed_at.len();
        if t.counts.refresh > before {
            refreshed_at.push(row.iteration);
        }
        let k = row.iteration;
        let expected = |every: usize| k % every == 0;
        let logged = (
            row.critic.is_some(),
            row.generator.is_some(),
            row.extractor.is_some(),
            row.classifier_generated.is_some(),
        );
        let want = (true, true, expected(2), expected(10));
        if logged != want {
            per_step_errors.push(format!("iteration {k}: logged {logged:?}, expected {want:?}"));
        }
        Ok(())
    })?;

    let want = UpdateCounts {
        critic: 5 * iterations,
        generator_adv: iterations,
        generator_concat: iterations / 2,
        extractor: iterations / 2,
        classifier_real: iterations / 2,
        classifier_full: iterations / 10,
        refresh: iterations / 50,
    };
    let mut errors = Vec::new();
    if trainer.counts != want {
        errors.push(format!("counts {:?}, expected {want:?}", trainer.counts));
    }
    if refreshed_at != [50, 100, 150, 200] {
        errors.push(format!("refreshes at {refreshed_at:?}, expected [50, 100, 150, 200]"));
    }
    errors.extend(per_step_errors.into_iter().take(5));
    if errors.is_empty() {
        Ok(format!(
            "{:?}; first refresh at iteration {}",
            trainer.counts, refreshed_at[0]
        ))
    } else {
        Err(errors.join("; ").into())
    }
}
