use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{DfgError, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const IMAGES4_MAGIC: u32 = 0x0000_0804;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| DfgError::format(path, "truncated header"))
}

/// Parses an IDX image file. Rank-3 files (`n x h x w`) give one channel;
/// rank-4 files are read as `n x c x h x w`.
pub fn read_idx_images(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, [usize; 3], usize)> {
    let magic = be_u32(bytes, 0, path)?;
    let (n, shape, header) = match magic {
        IMAGES_MAGIC => {
            let n = be_u32(bytes, 4, path)? as usize;
            let h = be_u32(bytes, 8, path)? as usize;
            let w = be_u32(bytes, 12, path)? as usize;
            (n, [1, h, w], 16)
        }
        IMAGES4_MAGIC => {
            let n = be_u32(bytes, 4, path)? as usize;
            let c = be_u32(bytes, 8, path)? as usize;
            let h = be_u32(bytes, 12, path)? as usize;
            let w = be_u32(bytes, 16, path)? as usize;
            (n, [c, h, w], 20)
        }
        other => {
            return Err(DfgError::format(
                path,
                format!("bad image magic 0x{other:08x} (expected 0x{IMAGES_MAGIC:08x})"),
            ))
        }
    };
    let len = n * shape.iter().product::<usize>();
    let body = &bytes[header..];
    if body.len() != len {
        return Err(DfgError::format(
            path,
            format!(
                "header promises {n} images of {shape:?} ({len} bytes) but the file holds {}",
                body.len()
            ),
        ));
    }
    Ok((body.to_vec(), shape, n))
}

pub fn read_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(DfgError::format(
            path,
            format!("bad label magic 0x{magic:08x} (expected 0x{LABELS_MAGIC:08x})"),
        ));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(DfgError::format(
            path,
            format!("header promises {n} labels but the file holds {}", body.len()),
        ));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Loads an image/label file pair; the class count is `max label + 1`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (pixels, shape, n) = read_idx_images(&fs::read(images)?, images)?;
    let y = read_idx_labels(&fs::read(labels)?, labels)?;
    if y.len() != n {
        return Err(DfgError::format(
            labels,
            format!("{} labels for {n} images in {}", y.len(), images.display()),
        ));
    }
    let n_classes = y.iter().max().map_or(0, |&m| m + 1);
    let name = images
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(name, pixels, shape, y, n_classes)
}

/// Writes `d` as an IDX pair (rank 3 for single-channel images).
pub fn write_idx(d: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let n = d.len() as u32;
    let [c, h, w] = d.image_shape;
    let mut out = Vec::with_capacity(20 + d.images.len());
    if c == 1 {
        out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        out.extend_from_slice(&n.to_be_bytes());
    } else {
        out.extend_from_slice(&IMAGES4_MAGIC.to_be_bytes());
        out.extend_from_slice(&n.to_be_bytes());
        out.extend_from_slice(&(c as u32).to_be_bytes());
    }
    out.extend_from_slice(&(h as u32).to_be_bytes());
    out.extend_from_slice(&(w as u32).to_be_bytes());
    out.extend_from_slice(&d.images);
    fs::write(images, out)?;

    if d.n_classes > 256 {
        return Err(DfgError::invalid("IDX labels are single bytes"));
    }
    let mut out = Vec::with_capacity(8 + d.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&n.to_be_bytes());
    out.extend(d.labels.iter().map(|&y| y as u8));
    fs::write(labels, out)?;
    Ok(())
}
