//! Tensor checkpoint container.
//!
//! Layout: `b"EPLAB"`, format version (`u32` LE), manifest length (`u32` LE),
//! the JSON manifest, then every tensor as little-endian `f32`, row-major,
//! in manifest order. Offsets in the manifest are byte offsets from the
//! start of the tensor section.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 5] = b"EPLAB";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub component: String,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Named tensors plus the config that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub component: String,
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        let mut offset = 0u64;
        let entries = self
            .tensors
            .iter()
            .map(|(name, m)| {
                let e = TensorEntry { name: name.clone(), shape: [m.rows(), m.cols()], offset };
                offset += 4 * m.data().len() as u64;
                e
            })
            .collect();
        let manifest = Manifest { component: self.component.clone(), config: self.config.clone(), tensors: entries };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(13 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, m) in &self.tensors {
            for &v in m.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let bad = |msg: &str| ModelError::Checkpoint(msg.to_string());
        if bytes.len() < 13 || &bytes[..5] != MAGIC {
            return Err(bad("missing EPLAB magic"));
        }
        let version = u32::from_le_bytes(bytes[5..9].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported format version {version}")));
        }
        let mlen = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        let data_start = 13usize.checked_add(mlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[13..data_start])?;
        let data = &bytes[data_start..];
        let mut expected = 0u64;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            if e.offset != expected {
                return Err(ModelError::Checkpoint(format!("tensor {} has offset {} (expected {expected})", e.name, e.offset)));
            }
            let count = e.shape[0].checked_mul(e.shape[1]).ok_or_else(|| bad("tensor too large"))?;
            let start = e.offset as usize;
            let end = start.checked_add(4 * count).filter(|&x| x <= data.len()).ok_or_else(|| bad("truncated tensor data"))?;
            let values: Vec<f64> = data[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::Checkpoint(format!("tensor {} contains non-finite values", e.name)));
            }
            tensors.push((e.name.clone(), Matrix::from_vec(e.shape[0], e.shape[1], values)?));
            expected = end as u64;
        }
        if expected as usize != data.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self { component: manifest.component, config: manifest.config, tensors })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), ModelError> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, ModelError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Removes and returns the tensor called `name`, checking its shape.
    pub(crate) fn take(&mut self, name: &str, shape: (usize, usize)) -> Result<Matrix, ModelError> {
        let pos = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| ModelError::Checkpoint(format!("missing tensor {name}")))?;
        let (_, m) = self.tensors.remove(pos);
        if m.shape() != shape {
            return Err(ModelError::Checkpoint(format!(
                "tensor {name} has shape {}x{}, expected {}x{}",
                m.rows(),
                m.cols(),
                shape.0,
                shape.1
            )));
        }
        Ok(m)
    }

    pub(crate) fn expect_component(&self, component: &str) -> Result<(), ModelError> {
        if self.component != component {
            return Err(ModelError::Checkpoint(format!(
                "checkpoint holds component {:?}, expected {component:?}",
                self.component
            )));
        }
        Ok(())
    }
}
