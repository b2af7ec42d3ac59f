use serde::{Deserialize, Serialize};

use super::{Dataset, TensorDataset};
use crate::error::{DfgError, Result};
use crate::tensor::{Real, Tensor};

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// One preprocessing stage, applied in order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Step {
    /// RGB to one channel with ITU-R 601 luma weights; no-op on gray input.
    Grayscale,
    /// Zero-pad to `height x width`, content centered (extra row/column
    /// goes to the bottom/right).
    Pad { height: usize, width: usize },
    /// Bilinear resize with half-pixel centers.
    Resize { height: usize, width: usize },
    /// `x / 127.5 - 1`, mapping `[0, 255]` onto `[-1, 1]`.
    Normalize,
}

/// `x / 127.5 - 1`.
pub fn normalize(x: f64) -> f64 {
    x / 127.5 - 1.0
}

/// Inverse of [`normalize`], rounded and clamped to a byte.
pub fn denormalize(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

struct Image {
    c: usize,
    h: usize,
    w: usize,
    px: Vec<f64>,
}

fn grayscale(img: Image) -> Result<Image> {
    match img.c {
        1 => Ok(img),
        3 => {
            let plane = img.h * img.w;
            let px = (0..plane)
                .map(|i| (0..3).map(|ch| LUMA[ch] * img.px[ch * plane + i]).sum())
                .collect();
            Ok(Image { c: 1, px, ..img })
        }
        c => Err(DfgError::invalid(format!("grayscale needs 1 or 3 channels, got {c}"))),
    }
}

fn pad(img: Image, height: usize, width: usize) -> Result<Image> {
    if height < img.h || width < img.w {
        return Err(DfgError::invalid(format!(
            "cannot pad {}x{} down to {height}x{width}",
            img.h, img.w
        )));
    }
    let (top, left) = ((height - img.h) / 2, (width - img.w) / 2);
    let mut px = vec![0.0; img.c * height * width];
    for ch in 0..img.c {
        for r in 0..img.h {
            let src = &img.px[(ch * img.h + r) * img.w..][..img.w];
            px[(ch * height + top + r) * width + left..][..img.w].copy_from_slice(src);
        }
    }
    Ok(Image {
        c: img.c,
        h: height,
        w: width,
        px,
    })
}

/// Source sample positions and weights along one axis.
fn taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

fn resize(img: Image, height: usize, width: usize) -> Result<Image> {
    if height == 0 || width == 0 {
        return Err(DfgError::invalid("resize target must be non-empty"));
    }
    if (height, width) == (img.h, img.w) {
        return Ok(img);
    }
    let (ry, rx) = (taps(img.h, height), taps(img.w, width));
    let mut px = Vec::with_capacity(img.c * height * width);
    for ch in 0..img.c {
        let plane = &img.px[ch * img.h * img.w..][..img.h * img.w];
        for &(y0, y1, fy) in &ry {
            for &(x0, x1, fx) in &rx {
                let at = |y: usize, x: usize| plane[y * img.w + x];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                px.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Ok(Image {
        c: img.c,
        h: height,
        w: width,
        px,
    })
}

fn apply(mut img: Image, steps: &[Step]) -> Result<Image> {
    for step in steps {
        img = match *step {
            Step::Grayscale => grayscale(img)?,
            Step::Pad { height, width } => pad(img, height, width)?,
            Step::Resize { height, width } => resize(img, height, width)?,
            Step::Normalize => {
                img.px.iter_mut().for_each(|v| *v = normalize(*v));
                img
            }
        };
    }
    Ok(img)
}

/// Runs `steps` over every image of `d`.
pub fn preprocess<T: Real>(d: &Dataset, steps: &[Step]) -> Result<TensorDataset<T>> {
    let [c, h, w] = d.image_shape;
    let mut out_shape = None;
    let mut data = Vec::new();
    for i in 0..d.len() {
        let img = Image {
            c,
            h,
            w,
            px: d.image(i).iter().map(|&b| b as f64).collect(),
        };
        let img = apply(img, steps)?;
        out_shape.get_or_insert([img.c, img.h, img.w]);
        data.extend(img.px.into_iter().map(T::lit));
    }
    let [oc, oh, ow] = match out_shape {
        Some(s) => s,
        None => {
            let probe = apply(
                Image {
                    c,
                    h,
                    w,
                    px: vec![0.0; c * h * w],
                },
                steps,
            )?;
            [probe.c, probe.h, probe.w]
        }
    };
    Ok(TensorDataset {
        images: Tensor::new(&[d.len(), oc, oh, ow], data)?,
        labels: d.labels.clone(),
        n_classes: d.n_classes,
    })
}
