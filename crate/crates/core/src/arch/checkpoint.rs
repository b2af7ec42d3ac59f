use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use super::network::Network;
use crate::error::{DfgError, Result};
use crate::tensor::{DType, Real, Tensor};

const MAGIC: &[u8; 8] = b"DFGCKPT\0";
const VERSION: u32 = 1;

/// Named tensors plus the metadata needed to resume a run.
///
/// Layout (little-endian): magic, version `u32`, spec hash `u64`, dtype tag
/// `u8`, seed `u64`, iteration `u64`, tensor count `u32`, then per tensor a
/// `u32`-prefixed UTF-8 name, rank `u32`, dims `u64` each and raw elements.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Real> {
    pub spec_hash: u64,
    pub seed: u64,
    pub iteration: u64,
    pub tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Checkpoint<T> {
    pub fn new(spec_hash: u64, seed: u64, iteration: u64) -> Self {
        Checkpoint {
            spec_hash,
            seed,
            iteration,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| DfgError::Checkpoint(format!("missing tensor `{name}`")))
    }

    /// Stores parameters and batch-norm statistics under `prefix.`.
    pub fn insert_network(&mut self, prefix: &str, net: &Network<T>) {
        for (slot, p) in net.slots().iter().zip(net.params()) {
            self.insert(format!("{prefix}.{}", slot.name), p.clone());
        }
        for (layer, stats) in net.running_stats() {
            let c = stats.mean.len();
            self.insert(
                format!("{prefix}.layer{layer}.running_mean"),
                Tensor::new(&[c], stats.mean.clone()).expect("per-channel length"),
            );
            self.insert(
                format!("{prefix}.layer{layer}.running_var"),
                Tensor::new(&[c], stats.var.clone()).expect("per-channel length"),
            );
        }
    }

    /// Restores what [`Checkpoint::insert_network`] stored.
    pub fn restore_network(&self, prefix: &str, net: &mut Network<T>) -> Result<()> {
        let names: Vec<(String, Vec<usize>)> = net
            .slots()
            .iter()
            .map(|s| (s.name.clone(), s.shape.clone()))
            .collect();
        for (i, (name, shape)) in names.iter().enumerate() {
            let t = self.get(&format!("{prefix}.{name}"))?;
            if t.shape() != shape.as_slice() {
                return Err(DfgError::Checkpoint(format!(
                    "{prefix}.{name}: stored shape {:?}, network expects {shape:?}",
                    t.shape()
                )));
            }
            net.params_mut()[i] = t.clone();
        }
        let layers: Vec<usize> = net.running_stats().map(|(l, _)| l).collect();
        for layer in layers {
            let mean = self.get(&format!("{prefix}.layer{layer}.running_mean"))?.clone();
            let var = self.get(&format!("{prefix}.layer{layer}.running_var"))?.clone();
            let stats = net.running_stats_mut(layer).expect("listed layer");
            if mean.numel() != stats.mean.len() || var.numel() != stats.var.len() {
                return Err(DfgError::Checkpoint(format!(
                    "{prefix}.layer{layer}: running statistics have the wrong length"
                )));
            }
            stats.mean = mean.into_vec();
            stats.var = var.into_vec();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.spec_hash.to_le_bytes());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    /// Parses a checkpoint; `expected_hash` rejects files written for a
    /// different architecture.
    pub fn from_bytes(bytes: &[u8], expected_hash: Option<u64>) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(DfgError::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(DfgError::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let spec_hash = r.u64()?;
        if let Some(expected) = expected_hash {
            if expected != spec_hash {
                return Err(DfgError::Checkpoint(format!(
                    "architecture mismatch: checkpoint was written for spec hash {spec_hash:016x}, \
                     the configured networks hash to {expected:016x}"
                )));
            }
        }
        let tag = r.take(1)?[0];
        match DType::from_tag(tag) {
            Some(d) if d == T::DTYPE => {}
            Some(d) => {
                return Err(DfgError::Checkpoint(format!(
                    "checkpoint stores {d:?}, requested {:?}",
                    T::DTYPE
                )))
            }
            None => return Err(DfgError::Checkpoint(format!("unknown dtype tag {tag}"))),
        }
        let seed = r.u64()?;
        let iteration = r.u64()?;
        let count = r.u32()?;
        let width = T::DTYPE.tag() as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| DfgError::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(width).ok_or_else(|| {
                DfgError::Checkpoint(format!("{name}: implausible shape {shape:?}"))
            })?)?;
            let data = raw.chunks_exact(width).map(T::read_le).collect();
            let t = Tensor::new(&shape, data)
                .map_err(|e| DfgError::Checkpoint(format!("{name}: {e}")))?;
            tensors.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(DfgError::Checkpoint(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            spec_hash,
            seed,
            iteration,
            tensors,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| DfgError::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Writes atomically (temp file plus rename).
pub fn save_checkpoint<T: Real>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&ckpt.to_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path, expected_hash: Option<u64>) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path)?;
    Checkpoint::from_bytes(&bytes, expected_hash)
        .map_err(|e| DfgError::Checkpoint(format!("{}: {e}", path.display())))
}
