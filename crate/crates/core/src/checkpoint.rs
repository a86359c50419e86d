//! Binary checkpoint container: magic header, scalar dtype, step counter,
//! the configuration as JSON, and named matrix segments (parameters plus
//! optimizer state). Loading validates structure and returns checkpoint
//! errors instead of panicking on corrupt files.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::scalar::Scalar;

const MAGIC: [u8; 8] = *b"RRGCKPT\0";
const FORMAT_VERSION: u8 = 1;

/// Everything needed to resume a run bitwise: the step counter, the exact
/// configuration, and every named matrix (parameters and optimizer moments).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    pub step: u64,
    pub config_json: String,
    pub segments: BTreeMap<String, Mat<S>>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
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
            .ok_or_else(|| bad(format!("truncated: needed {n} bytes at offset {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| bad(format!("{what} length {v} does not fit")))
    }
}

impl<S: Scalar> Checkpoint<S> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.push(FORMAT_VERSION);
        out.push(S::DTYPE);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.config_json.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        out.extend_from_slice(&(self.segments.len() as u64).to_le_bytes());
        for (name, m) in &self.segments {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for &x in m.data() {
                x.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = r.take(1)?[0];
        if version != FORMAT_VERSION {
            return Err(bad(format!(
                "format version {version} unsupported (expected {FORMAT_VERSION})"
            )));
        }
        let dtype = r.take(1)?[0];
        if dtype != S::DTYPE {
            return Err(bad(format!(
                "scalar dtype tag {dtype} does not match the requested precision (tag {})",
                S::DTYPE
            )));
        }
        let step = r.u64()?;
        let config_len = r.len("config")?;
        let config_json = std::str::from_utf8(r.take(config_len)?)
            .map_err(|_| bad("config is not valid UTF-8"))?
            .to_string();
        let n_segments = r.len("segment count")?;
        let mut segments = BTreeMap::new();
        for _ in 0..n_segments {
            let name_len = r.len("segment name")?;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| bad("segment name is not valid UTF-8"))?
                .to_string();
            let rows = r.len("rows")?;
            let cols = r.len("cols")?;
            let n = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(S::BYTE_LEN))
                .ok_or_else(|| bad(format!("segment {name:?} shape overflows")))?;
            let raw = r.take(n)?;
            let data: Vec<S> = raw.chunks_exact(S::BYTE_LEN).map(S::read_le).collect();
            if segments.insert(name.clone(), Mat::from_vec(rows, cols, data)).is_some() {
                return Err(bad(format!("duplicate segment {name:?}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(bad(format!(
                "{} trailing bytes after the last segment",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            step,
            config_json,
            segments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
