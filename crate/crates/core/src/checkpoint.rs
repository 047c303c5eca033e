//! Versioned binary container of named parameter matrices.
//!
//! Layout (little endian): magic `FSDC`, format version u32, then the
//! strings `kind`, `config_hash`, `code_version`, `config_toml` (u32 length +
//! UTF-8), seed u64, step u64, tensor count u32, and per tensor its name
//! string, rows u32, cols u32 and `rows * cols` f64 values.

use std::path::Path;

use crate::error::{FsdError, Result};
use crate::tensor::FeatureArray;

pub const MAGIC: &[u8; 4] = b"FSDC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Which model family the tensors belong to, e.g. `fsd` or `dense`.
    pub kind: String,
    pub config_hash: String,
    pub code_version: String,
    /// Full configuration the model was trained with.
    pub config_toml: String,
    pub seed: u64,
    pub step: u64,
    pub tensors: Vec<(String, FeatureArray)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&FeatureArray> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose names start with `prefix`, with the prefix removed.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a FeatureArray)> + 'a {
        self.tensors
            .iter()
            .filter_map(move |(n, t)| n.strip_prefix(prefix).map(|s| (s, t)))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for s in [&self.kind, &self.config_hash, &self.code_version, &self.config_toml] {
            put_str(&mut out, s);
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.n() as u32).to_le_bytes());
            out.extend_from_slice(&(t.c() as u32).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(FsdError::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(FsdError::format(
                path,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let kind = r.string()?;
        let config_hash = r.string()?;
        let code_version = r.string()?;
        let config_toml = r.string()?;
        let seed = r.u64()?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = r.string()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let len = rows
                .checked_mul(cols)
                .filter(|&l| l.checked_mul(8).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| FsdError::format(path, format!("tensor {name} is larger than the file")))?;
            let raw = r.take(len * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, FeatureArray::from_vec(rows, cols, data)?));
        }
        if r.pos != bytes.len() {
            return Err(FsdError::format(path, "trailing bytes after last tensor"));
        }
        Ok(Self {
            kind,
            config_hash,
            code_version,
            config_toml,
            seed,
            step,
            tensors,
        })
    }

    /// Writes through a temporary file so a crash never leaves a partial
    /// checkpoint under the final name.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| FsdError::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode()).map_err(|e| FsdError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| FsdError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| FsdError::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| FsdError::format(self.path, "checkpoint is truncated"))?;
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

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| FsdError::format(self.path, "invalid UTF-8 in checkpoint"))
    }
}
