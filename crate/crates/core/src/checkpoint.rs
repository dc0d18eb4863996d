//! Versioned archive of named `f32` arrays with a JSON metadata blob.
//!
//! Layout (little-endian): magic, `u32` version, `u32` meta length, meta bytes,
//! `u32` entry count, then per entry: `u32` name length, name, `u32` group length,
//! group, `u32` rows, `u32` cols, row-major values.

use std::path::Path;

use ndarray::Array2;

use crate::autograd::ParamSet;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CTXCKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub group: String,
    pub value: Array2<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn from_params(meta: String, params: &ParamSet<f32>) -> Self {
        let arrays = params
            .iter()
            .map(|(_, p)| NamedArray { name: p.name.clone(), group: p.group.clone(), value: p.value.clone() })
            .collect();
        Self { meta, arrays }
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    /// Copies values into `params`; names, order and shapes must match exactly.
    pub fn load_into(&self, params: &mut ParamSet<f32>) -> Result<()> {
        if self.arrays.len() != params.len() {
            return Err(Error::InvalidInput(format!(
                "checkpoint has {} arrays, model expects {}",
                self.arrays.len(),
                params.len()
            )));
        }
        for (a, (_, p)) in self.arrays.iter().zip(params.iter()) {
            if a.name != p.name || a.value.dim() != p.value.dim() {
                return Err(Error::InvalidInput(format!(
                    "checkpoint array `{}` {:?} does not match model parameter `{}` {:?}",
                    a.name,
                    a.value.dim(),
                    p.name,
                    p.value.dim()
                )));
            }
        }
        for (a, (_, p)) in self.arrays.iter().zip(params.iter_mut()) {
            p.value.assign(&a.value);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        put_str(&mut out, &self.meta);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            put_str(&mut out, &a.name);
            put_str(&mut out, &a.group);
            out.extend_from_slice(&(a.value.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(a.value.ncols() as u32).to_le_bytes());
            for v in a.value.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
        if buf.len() < 12 || &buf[..8] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut pos = 8;
        let u32_at = |pos: &mut usize| -> Result<u32> {
            let b = buf.get(*pos..*pos + 4).ok_or_else(|| bad("truncated"))?;
            *pos += 4;
            Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        };
        let version = u32_at(&mut pos)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let string_at = |pos: &mut usize| -> Result<String> {
            let n = u32_at(pos)? as usize;
            let b = buf.get(*pos..*pos + n).ok_or_else(|| bad("truncated string"))?;
            *pos += n;
            String::from_utf8(b.to_vec()).map_err(|_| bad("string is not UTF-8"))
        };
        let meta = string_at(&mut pos)?;
        let count = u32_at(&mut pos)? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name = string_at(&mut pos)?;
            let group = string_at(&mut pos)?;
            let rows = u32_at(&mut pos)? as usize;
            let cols = u32_at(&mut pos)? as usize;
            let body = buf.get(pos..pos + 4 * rows * cols).ok_or_else(|| bad("truncated array"))?;
            pos += 4 * rows * cols;
            let vals = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let value = Array2::from_shape_vec((rows, cols), vals).map_err(|e| bad(&e.to_string()))?;
            arrays.push(NamedArray { name, group, value });
        }
        if pos != buf.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
