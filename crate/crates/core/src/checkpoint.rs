//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! | field | encoding |
//! |---|---|
//! | magic | `LMAMLCKP` |
//! | version | `u32` |
//! | config | `u64` length + canonical TOML (architecture, meta config, episode spec) |
//! | Adam step | `u64` |
//! | tensors | `u32` count, then per tensor: `u32` name length, name, `u32` rank, `u64` dims, `f64` values |
//! | checksum | SHA-256 of every preceding byte |
//!
//! Tensors are the weights in layout order, then `adam.m.<name>`, then `adam.v.<name>`.

use std::fs;
use std::path::Path;

use lambda_tensor::TensorData;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::episodes::EpisodeSpec;
use crate::error::{io_err, Error, Result};
use crate::maml::{AdamState, MetaConfig, MetaModel};
use crate::nn::{Architecture, WeightSet};

pub const MAGIC: &[u8; 8] = b"LMAMLCKP";
pub const VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
struct Header {
    episode: EpisodeSpec,
    meta: MetaConfig,
    arch: Architecture,
}

pub fn to_bytes(model: &MetaModel) -> Result<Vec<u8>> {
    to_bytes_versioned(model, VERSION)
}

#[doc(hidden)]
pub fn to_bytes_versioned(model: &MetaModel, version: u32) -> Result<Vec<u8>> {
    let header = Header {
        episode: model.episode,
        meta: model.config.clone(),
        arch: model.arch.clone(),
    };
    let config = toml::to_string(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&model.adam.t.to_le_bytes());

    let params = model.weights.params();
    let mut tensors: Vec<(String, &TensorData<f64>)> =
        params.iter().map(|p| (p.name.clone(), &p.data)).collect();
    tensors.extend(params.iter().zip(&model.adam.m).map(|(p, m)| (format!("adam.m.{}", p.name), m)));
    tensors.extend(params.iter().zip(&model.adam.v).map(|(p, v)| (format!("adam.v.{}", p.name), v)));
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, data) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(data.shape().len() as u32).to_le_bytes());
        for &d in data.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in data.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
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
            .ok_or_else(|| Error::Checkpoint(format!("unexpected end of data at byte {}", self.pos)))?;
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

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<MetaModel> {
    if bytes.len() < MAGIC.len() + 4 + CHECKSUM_LEN {
        return Err(Error::Checkpoint(format!(
            "file is {} bytes, too short to be a checkpoint",
            bytes.len()
        )));
    }
    let (body, digest) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch: file is corrupt or truncated".into()));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (this build reads version {VERSION})"
        )));
    }
    let config_len = r.len()?;
    let config = std::str::from_utf8(r.take(config_len)?)
        .map_err(|e| Error::Checkpoint(format!("config is not UTF-8: {e}")))?;
    let header: Header = toml::from_str(config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let adam_t = r.u64()?;
    let count = r.u32()? as usize;
    let slots = header.arch.param_slots();
    if count != 3 * slots.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors for this architecture, found {count}",
            3 * slots.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for k in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::Checkpoint(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let slot = &slots[k % slots.len()];
        let expected = match k / slots.len() {
            0 => slot.name.clone(),
            1 => format!("adam.m.{}", slot.name),
            _ => format!("adam.v.{}", slot.name),
        };
        if name != expected {
            return Err(Error::Checkpoint(format!("expected tensor {expected}, found {name}")));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        if shape != slot.shape {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {shape:?}, architecture says {:?}",
                slot.shape
            )));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(TensorData::new(&shape, values)?);
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!(
            "{} unexpected trailing bytes",
            body.len() - r.pos
        )));
    }
    let v = tensors.split_off(2 * slots.len());
    let m = tensors.split_off(slots.len());
    let weights = WeightSet::new(&header.arch, tensors)?;
    let mut model = MetaModel::new(header.arch, weights, header.meta, header.episode)?;
    model.adam = AdamState { m, v, t: adam_t };
    Ok(model)
}

pub fn save_checkpoint(model: &MetaModel, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)?).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<MetaModel> {
    from_bytes(&fs::read(path).map_err(io_err(path))?)
}
