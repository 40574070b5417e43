//! Named-tensor checkpoints.
//!
//! Binary layout (little endian): `EACP`, u32 version, u32 tensor count, then
//! per tensor a u16 name length, the UTF-8 name, a u8 rank, u64 extents and
//! the f32 payload. The architecture and basis live in a JSON sidecar
//! `<file>.json` so a checkpoint can be rebuilt without outside knowledge.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::manifest_path;
use crate::basis::{build_basis_bank, BasisConfig};
use crate::eaconv::{build_model, Model, ModelConfig};
use crate::{Error, Result, Tensor};

const MAGIC: &[u8; 4] = b"EACP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis: Option<BasisConfig>,
}

pub fn write_tensors(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Config(format!("tensor name {name:?} too long")))?;
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::Config(format!("tensor {name:?} has rank {}", t.rank())))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(rank);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!("unexpected end of file at byte {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if c.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::format(path, "missing EACP magic"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let count = c.u32()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(c.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = c.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(c.take(8)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let data = c
            .take(n * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after the last tensor"));
    }
    Ok(out)
}

/// Copies tensors into a model skeleton by name. Every parameter and buffer
/// must be present with a matching shape; unknown names are rejected too.
pub fn load_into(model: &mut Model, tensors: Vec<(String, Tensor)>) -> Result<()> {
    let mut by_name: BTreeMap<String, Tensor> = tensors.into_iter().collect();
    let mut missing = Vec::new();
    let mut fill = |name: String, slot: &mut Tensor| -> Result<()> {
        match by_name.remove(&name) {
            Some(t) if t.shape() == slot.shape() => *slot = t,
            Some(t) => {
                return Err(Error::Incompatible(format!(
                    "tensor {name}: checkpoint shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )))
            }
            None => missing.push(name),
        }
        Ok(())
    };
    for (name, p) in model.params_mut() {
        fill(name, &mut p.value)?;
    }
    for (name, slot) in model.buffers_mut() {
        fill(name, slot)?;
    }
    if !missing.is_empty() {
        return Err(Error::Incompatible(format!(
            "checkpoint lacks tensors: {}",
            missing.join(", ")
        )));
    }
    if !by_name.is_empty() {
        let extra: Vec<_> = by_name.into_keys().collect();
        return Err(Error::Incompatible(format!(
            "checkpoint has unknown tensors: {}",
            extra.join(", ")
        )));
    }
    Ok(())
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    write_tensors(path, &model.named_tensors())?;
    let sidecar = Sidecar {
        model: model.config().clone(),
        basis: model.bank().map(|b| b.config().clone()),
    };
    let spath = manifest_path(path);
    fs::write(&spath, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&spath, e))
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let spath = manifest_path(path);
    let text = fs::read_to_string(&spath).map_err(|e| Error::io(&spath, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Rebuilds the model described by the sidecar and fills in its tensors.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let tensors = read_tensors(path)?;
    let sidecar = read_sidecar(path)?;
    let bank = sidecar
        .basis
        .as_ref()
        .map(|c| build_basis_bank(c).map(|b| b.into_shared()))
        .transpose()?;
    let mut model = build_model(&sidecar.model, bank, 0)?;
    load_into(&mut model, tensors)?;
    Ok(model)
}
