//! On-disk formats: DMT1 binary tensors and `key=value` text manifests.
//!
//! DMT1 layout: the four bytes `DMT1`, one byte rank, `rank` little-endian
//! `u32` extents, then the row-major values as little-endian `f32`. Storage
//! is single precision; everything is widened back to `f64` on read.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DMT_MAGIC: &[u8; 4] = b"DMT1";

pub fn encode_dmt(tensor: &Tensor) -> Result<Vec<u8>> {
    let rank = tensor.rank();
    if rank > u8::MAX as usize {
        return Err(Error::Shape(format!("rank {rank} does not fit the DMT1 header")));
    }
    let mut out = Vec::with_capacity(5 + 4 * rank + 4 * tensor.numel());
    out.extend_from_slice(DMT_MAGIC);
    out.push(rank as u8);
    for &d in tensor.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Shape(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_dmt(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    if bytes.len() < 5 || &bytes[..4] != DMT_MAGIC {
        return Err(Error::format(origin, "missing DMT1 magic"));
    }
    let rank = bytes[4] as usize;
    let header = 5 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::format(origin, "truncated header"));
    }
    let shape: Vec<usize> = bytes[5..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let numel: usize = shape.iter().product();
    let body = &bytes[header..];
    if body.len() != 4 * numel {
        return Err(Error::format(
            origin,
            format!("expected {} payload bytes, found {}", 4 * numel, body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::format(origin, e.to_string()))
}

pub fn write_dmt(path: &Path, tensor: &Tensor) -> Result<()> {
    let bytes = encode_dmt(tensor)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_dmt(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dmt(&bytes, path)
}

/// Ordered `key=value` text file. Blank lines and `#` comments are ignored
/// on read; key order is preserved on write.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str, origin: &Path) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::format(origin, format!("missing key `{key}`")))
    }

    pub fn parse_value<T: std::str::FromStr>(&self, key: &str, origin: &Path) -> Result<T> {
        let raw = self.require(key, origin)?;
        raw.parse()
            .map_err(|_| Error::format(origin, format!("bad value `{raw}` for `{key}`")))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a str)> {
        self.entries()
            .filter_map(move |(k, v)| k.strip_prefix(prefix).map(|rest| (rest, v)))
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut manifest = Manifest::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::format(origin, format!("line {} is not key=value", lineno + 1))
            })?;
            manifest.set(k.trim(), v.trim());
        }
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.render().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

pub fn format_shape(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "scalar".into();
    }
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

pub fn parse_shape(text: &str) -> Option<Vec<usize>> {
    if text == "scalar" {
        return Some(Vec::new());
    }
    text.split('x').map(|d| d.parse().ok()).collect()
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Combined hash over every regular file under `root`, visited in sorted
/// path order. Paths are hashed relative to `root`.
pub fn tree_hash(root: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(root, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for path in files {
        let rel = path.strip_prefix(root).unwrap_or(&path);
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update([0u8]);
        hasher.update(fs::read(&path).map_err(|e| Error::io(&path, e))?);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}
