//! FIFO memory bank of detached class features, one buffer per
//! (tissue, pyramid level).

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{self, Manifest};
use crate::labels::Tissue;
use crate::tensor::Tensor;

pub const DEFAULT_CAPACITY: usize = 100;

type Key = (Tissue, usize);

#[derive(Clone, Debug, PartialEq)]
struct Buffer {
    dim: usize,
    items: VecDeque<Vec<f64>>,
    pushed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    buffers: BTreeMap<Key, Buffer>,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("memory bank capacity must be positive".into()));
        }
        Ok(Self { capacity, buffers: BTreeMap::new() })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self, tissue: Tissue, level: usize) -> usize {
        self.buffers.get(&(tissue, level)).map_or(0, |b| b.items.len())
    }

    pub fn is_empty(&self) -> bool {
        self.buffers.values().all(|b| b.items.is_empty())
    }

    /// Total pushes ever made to one buffer (evicted ones included).
    pub fn pushed(&self, tissue: Tissue, level: usize) -> u64 {
        self.buffers.get(&(tissue, level)).map_or(0, |b| b.pushed)
    }

    /// Appends a value snapshot; evicts the oldest entry when full. The first
    /// push fixes the buffer's feature length.
    pub fn push(&mut self, tissue: Tissue, level: usize, feature: &[f64]) -> Result<()> {
        if feature.is_empty() {
            return Err(Error::InvalidArgument("cannot push an empty feature".into()));
        }
        let buf = self
            .buffers
            .entry((tissue, level))
            .or_insert_with(|| Buffer { dim: feature.len(), items: VecDeque::new(), pushed: 0 });
        if buf.dim != feature.len() {
            return Err(Error::Shape(format!(
                "{} level {level}: feature of length {} pushed into bank of width {}",
                tissue.name(),
                feature.len(),
                buf.dim
            )));
        }
        if buf.items.len() == self.capacity {
            buf.items.pop_front();
        }
        buf.items.push_back(feature.to_vec());
        buf.pushed += 1;
        Ok(())
    }

    /// Mean of the current buffer contents, `None` when empty.
    ///
    /// Computed as `x_0 + mean(x_i - x_0)`, which is exact when every entry
    /// is identical.
    pub fn prototype(&self, tissue: Tissue, level: usize) -> Option<Vec<f64>> {
        let buf = self.buffers.get(&(tissue, level))?;
        let first = buf.items.front()?;
        let n = buf.items.len() as f64;
        let mut shift = vec![0.0; buf.dim];
        for item in &buf.items {
            for ((s, x), f) in shift.iter_mut().zip(item).zip(first) {
                *s += x - f;
            }
        }
        Some(first.iter().zip(&shift).map(|(f, s)| f + s / n).collect())
    }

    pub fn contents(&self, tissue: Tissue, level: usize) -> Vec<Vec<f64>> {
        self.buffers
            .get(&(tissue, level))
            .map(|b| b.items.iter().cloned().collect())
            .unwrap_or_default()
    }

    /// Prototypes of every non-empty buffer, frozen at call time.
    pub fn snapshot(&self) -> Prototypes {
        Prototypes {
            entries: self
                .buffers
                .keys()
                .filter_map(|&(t, l)| self.prototype(t, l).map(|p| ((t, l), p)))
                .collect(),
        }
    }

    /// Writes each buffer as a `[len, dim]` DMT1 tensor plus `bank.manifest`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        io::ensure_dir(dir)?;
        let mut manifest = Manifest::new();
        manifest.set("capacity", self.capacity);
        for (&(tissue, level), buf) in &self.buffers {
            let key = format!("{}_{level}", tissue.name());
            manifest.set(format!("buffer.{key}.pushed"), buf.pushed);
            manifest.set(format!("buffer.{key}.dim"), buf.dim);
            manifest.set(format!("buffer.{key}.len"), buf.items.len());
            if buf.items.is_empty() {
                continue;
            }
            let data = buf.items.iter().flatten().copied().collect();
            let t = Tensor::new(vec![buf.items.len(), buf.dim], data)?;
            io::write_dmt(&dir.join(format!("{key}.dmt")), &t)?;
        }
        manifest.write(&dir.join("bank.manifest"))
    }

    /// Restores a saved bank. Values come back at DMT1 (f32) precision.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("bank.manifest");
        let manifest = Manifest::read(&path)?;
        let mut bank = MemoryBank::new(manifest.parse_value("capacity", &path)?)?;
        for tissue in Tissue::ALL {
            for level in 0..64 {
                let key = format!("{}_{level}", tissue.name());
                let Some(len) = manifest.get(&format!("buffer.{key}.len")) else { continue };
                let len: usize = len.parse().map_err(|_| Error::format(&path, "bad buffer length"))?;
                let dim: usize = manifest.parse_value(&format!("buffer.{key}.dim"), &path)?;
                let pushed: u64 = manifest.parse_value(&format!("buffer.{key}.pushed"), &path)?;
                let mut items = VecDeque::new();
                if len > 0 {
                    let t = io::read_dmt(&dir.join(format!("{key}.dmt")))?;
                    if t.shape() != [len, dim] {
                        return Err(Error::format(&path, format!("buffer {key} has shape {:?}", t.shape())));
                    }
                    items.extend(t.data().chunks(dim).map(<[f64]>::to_vec));
                }
                bank.buffers.insert((tissue, level), Buffer { dim, items, pushed });
            }
        }
        Ok(bank)
    }
}

/// Frozen prototypes read by the regularizer. Values are plain copies, so
/// they carry no gradient.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Prototypes {
    entries: BTreeMap<Key, Vec<f64>>,
}

impl Prototypes {
    pub fn get(&self, tissue: Tissue, level: usize) -> Option<&[f64]> {
        self.entries.get(&(tissue, level)).map(Vec::as_slice)
    }

    pub fn insert(&mut self, tissue: Tissue, level: usize, prototype: Vec<f64>) {
        self.entries.insert((tissue, level), prototype);
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
