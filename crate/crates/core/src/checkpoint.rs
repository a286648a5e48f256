//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "CLVCCKPT"
//! version      u32
//! stage        u32 length + UTF-8
//! metadata     u32 length + UTF-8 JSON
//! count        u32
//! per tensor:  u32 length + UTF-8 name, u32 ndim, ndim × u64 dims,
//!              product(dims) × f32 row-major
//! ```

use crate::error::{Error, Result};
use clvc_autograd::{Matrix, ParamStore};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"CLVCCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn from_matrix(name: impl Into<String>, m: &Matrix) -> Self {
        Self {
            name: name.into(),
            shape: vec![m.rows(), m.cols()],
            data: m.data().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        let (rows, cols) = match self.shape[..] {
            [r, c] => (r, c),
            [n] => (1, n),
            [] => (1, 1),
            _ => return Err(Error::Shape(format!("tensor {} has rank {}", self.name, self.shape.len()))),
        };
        Ok(Matrix::from_vec(rows, cols, self.data.iter().map(|&v| v as f64).collect()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: String,
    pub metadata: Value,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(stage: impl Into<String>, metadata: Value) -> Self {
        Self {
            stage: stage.into(),
            metadata,
            tensors: Vec::new(),
        }
    }

    pub fn push_matrix(&mut self, name: impl Into<String>, m: &Matrix) {
        self.tensors.push(Tensor::from_matrix(name, m));
    }

    /// Adds every tensor of `store` under `prefix`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, m) in store.iter() {
            self.push_matrix(format!("{prefix}{name}"), m);
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        self.tensor(name)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor `{name}`")))?
            .to_matrix()
    }

    /// Tensors whose names start with `prefix`, prefix stripped, in file order.
    pub fn store(&self, prefix: &str) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for t in &self.tensors {
            if let Some(name) = t.name.strip_prefix(prefix) {
                store.add(name, t.to_matrix()?);
            }
        }
        Ok(store)
    }

    /// Fails unless the stage tag is `expected`.
    pub fn expect_stage(&self, expected: &str) -> Result<()> {
        if self.stage != expected {
            return Err(Error::Invalid(format!(
                "checkpoint is for stage `{}`, expected `{expected}`",
                self.stage
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.stage)?;
        put_str(&mut out, &serde_json::to_string(&self.metadata)?)?;
        put_u32(&mut out, self.tensors.len())?;
        for t in &self.tensors {
            let expected: usize = t.shape.iter().product();
            if expected != t.data.len() {
                return Err(Error::Shape(format!(
                    "tensor {} has shape {:?} but {} values",
                    t.name,
                    t.shape,
                    t.data.len()
                )));
            }
            put_str(&mut out, &t.name)?;
            put_u32(&mut out, t.shape.len())?;
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion(version));
        }
        let stage = r.string()?;
        let metadata = serde_json::from_str(&r.string()?)
            .map_err(|e| Error::CorruptCheckpoint(format!("metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                let d = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                shape.push(usize::try_from(d).map_err(|_| Error::CorruptCheckpoint("dimension overflow".into()))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::CorruptCheckpoint(format!("tensor {name} is too large")))?;
            let raw = r.take(n)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(Tensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            stage,
            metadata,
            tensors,
        })
    }

    /// Writes atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Tab-delimited text dump of one tensor: a `# name` line, a `# shape`
    /// line, then one row per line (trailing dimension across columns).
    pub fn debug_dump(&self, name: &str) -> Result<String> {
        let t = self
            .tensor(name)
            .ok_or_else(|| Error::Invalid(format!("no tensor `{name}`")))?;
        let cols = t.shape.last().copied().unwrap_or(1).max(1);
        let mut out = format!("# {}\n# shape", t.name);
        for d in &t.shape {
            let _ = write!(out, " {d}");
        }
        out.push('\n');
        for row in t.data.chunks(cols) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&cells.join("\t"));
            out.push('\n');
        }
        Ok(out)
    }
}

/// Lowercase hex SHA-256 of a file.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn put_u32(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Invalid(format!("length {n} exceeds u32")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
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
            .ok_or_else(|| {
                Error::CorruptCheckpoint(format!(
                    "truncated: needed {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::CorruptCheckpoint("invalid UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new("am", json!({"seed": 7, "config": {"lr": 0.001}}));
        c.push_matrix("w", &Matrix::from_vec(2, 3, vec![1.0, -2.5, 3.25, 0.0, 1e-3, 7.0]));
        c.push_matrix("b", &Matrix::row_vector(vec![0.5, 0.25]));
        c
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
    }

    #[test]
    fn truncation_and_version_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [4, 1, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..bytes.len() - cut]).unwrap_err();
            assert!(matches!(err, Error::CorruptCheckpoint(_)), "{err}");
        }
        let mut bad = bytes.clone();
        bad[8] = 2;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::CheckpointVersion(2))));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn shape_mismatch_is_refused_on_write() {
        let mut c = sample();
        c.tensors[0].data.pop();
        assert!(c.to_bytes().is_err());
    }

    #[test]
    fn stores_round_trip_by_prefix() {
        let mut store = ParamStore::new();
        store.add("a/w", Matrix::from_vec(1, 2, vec![1.0, 2.0]));
        store.add("a/b", Matrix::scalar(3.0));
        let mut c = Checkpoint::new("x", Value::Null);
        c.push_store("p/", &store);
        c.push_matrix("other", &Matrix::scalar(1.0));
        assert_eq!(c.store("p/").unwrap(), store);
    }

    #[test]
    fn sha_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
