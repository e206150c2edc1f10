//! Binary checkpoint format.
//!
//! ```text
//! "KRCK" | version: u32 | config_len: u32 | config JSON
//! tensor_count: u32
//! per tensor: name_len: u32 | name | rows: u32 | cols: u32 | rows*cols f64
//! ```
//! All integers and floats little-endian.

use std::path::Path;

use super::{Model, ModelConfig};
use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Mat;

const MAGIC: &[u8; 4] = b"KRCK";
pub const CHECKPOINT_VERSION: u32 = 1;

impl Model {
    pub fn to_bytes(&self) -> Vec<u8> {
        let config = serde_json::to_string(&self.config).expect("config serializes");
        let mut out = Vec::with_capacity(16 + config.len() + self.params.num_scalars() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (_, name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols as u32).to_le_bytes());
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.err("bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.err(&format!("unsupported version {version}")));
        }
        let len = r.u32()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(len)?)
            .map_err(|e| r.err(&format!("config: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| r.err("tensor name is not utf-8"))?
                .to_owned();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let raw = r.take(rows * cols * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if params.find(&name).is_some() {
                return Err(r.err(&format!("duplicate tensor {name}")));
            }
            params.add(name, Mat::from_vec(rows, cols, data));
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes"));
        }
        Model::from_parts(config, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Model> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Model::from_bytes(&bytes).map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err("truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn err(&self, message: &str) -> Error {
        Error::Parse {
            path: "checkpoint".into(),
            message: format!("byte {}: {message}", self.pos),
        }
    }
}
