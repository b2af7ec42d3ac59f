//! Every row of the LeNet-5 split and DCGAN-style generator/critic layer
//! tables, checked against the built specs.

use dfg_core::arch::{build_dcgan_pair, lenet_classifier_spec, lenet_extractor_spec, NetworkSpec};

use crate::Check;

/// Per-layer output shapes (channels first) as the tables list them.
/// Activations share a row with the layer before them, so the expected
/// list repeats that shape.
fn expect(spec: &NetworkSpec, rows: &[&[usize]], errors: &mut Vec<String>) -> dfg_core::Result<usize> {
    let got = spec.describe()?;
    if got.len() != rows.len() {
        errors.push(format!(
            "{}: {} layers, expected {}",
            spec.name,
            got.len(),
            rows.len()
        ));
        return Ok(0);
    }
    for (i, ((label, shape), want)) in got.iter().zip(rows).enumerate() {
        if shape.as_slice() != *want {
            errors.push(format!("{} layer {i} ({label}): {shape:?}, expected {want:?}", spec.name));
        }
    }
    Ok(rows.len())
}

pub fn run() -> Check {
    let mut errors = Vec::new();
    let mut rows = 0;

    let extractor = lenet_extractor_spec(1);
    if extractor.input_shape != [1, 32, 32] {
        errors.push(format!("extractor input {:?}", extractor.input_shape));
    }
    rows += 1 + expect(&extractor, &[&[6, 28, 28], &[6, 28, 28], &[6, 14, 14]], &mut errors)?;

    let classifier = lenet_classifier_spec(10);
    if classifier.input_shape != [6, 14, 14] {
        errors.push(format!("classifier input {:?}", classifier.input_shape));
    }
    rows += 1 + expect(
        &classifier,
        &[
            &[16, 10, 10],
            &[16, 10, 10],
            &[16, 5, 5],
            &[400],
            &[120],
            &[120],
            &[84],
            &[84],
            &[10],
            &[10],
        ],
        &mut errors,
    )?;

    let (generator, critic) = build_dcgan_pair(&[6, 14, 14], 10, 100)?;
    if generator.input_shape != [100] {
        errors.push(format!("generator noise input {:?}", generator.input_shape));
    }
    rows += 1 + expect(
        &generator,
        &[
            // noise plus one-hot label: the 110-wide input row
            &[110],
            &[2048],
            &[128, 4, 4],
            &[128, 4, 4],
            &[48, 9, 9],
            &[48, 9, 9],
            &[48, 9, 9],
            &[12, 11, 11],
            &[12, 11, 11],
            &[12, 11, 11],
            &[6, 14, 14],
            &[6, 14, 14],
            &[6, 14, 14],
            &[6, 14, 14],
        ],
        &mut errors,
    )?;

    if critic.input_shape != [6, 14, 14] {
        errors.push(format!("critic input {:?}", critic.input_shape));
    }
    rows += 1 + expect(
        &critic,
        &[
            &[32, 7, 7],
            &[32, 7, 7],
            &[64, 4, 4],
            &[64, 4, 4],
            &[128, 2, 2],
            &[128, 2, 2],
            &[512],
            &[512],
            &[1],
        ],
        &mut errors,
    )?;

    let (g_out, e_out) = (generator.computed_output_shape()?, extractor.computed_output_shape()?);
    if g_out != e_out {
        errors.push(format!("generator emits {g_out:?}, extractor {e_out:?}"));
    }

    if errors.is_empty() {
        Ok(format!("{rows} layer rows across extractor, classifier, generator and critic"))
    } else {
        Err(errors.join("; ").into())
    }
}
