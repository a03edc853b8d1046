//! Versioned binary model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "OARSEGM\0"
//! version    u32
//! structure  u32 length + UTF-8 name
//! snapshot   u32 length + UTF-8 JSON (stage, network, structure and crop settings)
//! tensors    u32 count, then per tensor:
//!              u32 name length + UTF-8 name
//!              u32 rank, rank x u32 dims
//!              f32 payload
//! checksum   u64 FNV-1a over every preceding byte
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::nn::{UNetConfig, UNetModel};
use crate::pipeline::{Stage, StructureConfig};
use crate::preprocess::CropSpec;
use crate::volume::StructureId;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"OARSEGM\0";
const VERSION: u32 = 1;

/// Everything stored next to the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub stage: Stage,
    pub unet: UNetConfig,
    pub structure: StructureConfig,
    pub crop: CropSpec,
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("field fits u32").to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

pub fn encode_model(model: &UNetModel<f32>, meta: &ModelMeta) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, meta.structure.id.name());
    put_str(&mut out, &serde_json::to_string(meta).expect("metadata serializes"));
    let tensors = model.tensors();
    put_u32(&mut out, tensors.len());
    for t in tensors {
        put_str(&mut out, &t.name);
        put_u32(&mut out, t.shape.len());
        for &d in &t.shape {
            put_u32(&mut out, d);
        }
        for v in t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, message: impl Into<String>) -> Error {
        Error::CorruptModel {
            path: self.path.to_path_buf(),
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.corrupt(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self, what: &str) -> Result<&'a str> {
        let n = self.u32(what)?;
        let b = self.take(n, what)?;
        std::str::from_utf8(b).map_err(|_| self.corrupt(format!("{what} is not UTF-8")))
    }
}

pub fn decode_model(path: &Path, bytes: &[u8]) -> Result<(ModelMeta, UNetModel<f32>)> {
    let corrupt = |message: String| Error::CorruptModel {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < MAGIC.len() + 4 + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt("not a model file (bad magic or truncated)".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if stored != fnv1a64(body) {
        return Err(corrupt("checksum mismatch".into()));
    }
    let mut r = Reader {
        path,
        bytes: body,
        pos: MAGIC.len(),
    };
    let version = r.u32("version")?;
    if version as u32 != VERSION {
        return Err(r.corrupt(format!("unsupported format version {version}")));
    }
    let name = r.string("structure id")?;
    let id: StructureId = name.parse().map_err(|_| r.corrupt(format!("unknown structure `{name}`")))?;
    let meta: ModelMeta =
        serde_json::from_str(r.string("snapshot")?).map_err(|e| r.corrupt(format!("snapshot: {e}")))?;
    if meta.structure.id != id {
        return Err(r.corrupt(format!("structure `{name}` disagrees with snapshot `{}`", meta.structure.id)));
    }
    meta.unet.validate().map_err(|e| r.corrupt(e.to_string()))?;
    let mut model = UNetModel::<f32>::zeros(meta.unet);
    let count = r.u32("tensor count")?;
    let mut slots = model.tensors_mut();
    if count != slots.len() {
        return Err(r.corrupt(format!("{count} tensors, the network needs {}", slots.len())));
    }
    for (name, shape, _, data) in slots.iter_mut() {
        let name = name.as_str();
        let got = r.string("tensor name")?;
        if got != name {
            return Err(r.corrupt(format!("expected tensor `{name}`, found `{got}`")));
        }
        let rank = r.u32("rank")?;
        let dims = (0..rank).map(|_| r.u32("dims")).collect::<Result<Vec<_>>>()?;
        if dims != *shape {
            return Err(r.corrupt(format!("`{name}` has shape {dims:?}, expected {shape:?}")));
        }
        let raw = r.take(data.len() * 4, name)?;
        for (v, c) in data.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        }
    }
    drop(slots);
    if r.pos != body.len() {
        return Err(r.corrupt(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok((meta, model))
}

pub fn save_model(model: &UNetModel<f32>, meta: &ModelMeta, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if model.config != meta.unet {
        return Err(Error::config("unet", "model and metadata disagree on the network layout"));
    }
    fs::write(path, encode_model(model, meta)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(ModelMeta, UNetModel<f32>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(path, &bytes)
}
