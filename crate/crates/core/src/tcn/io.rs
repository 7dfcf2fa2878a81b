//! Weight file: `NVSD` magic, u32 version, u32 JSON header length, JSON
//! header, then each tensor's f32 payload (little-endian) in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FeatureNorm, ModelSpec, ModelWeights, Tensor};
use crate::classes::ClassSet;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NVSD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    classes: ClassSet,
    tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    norm: Option<FeatureNorm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    user_id: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn write_weights<W: Write>(weights: &ModelWeights, mut w: W) -> Result<()> {
    let header = Header {
        spec: weights.spec.clone(),
        classes: weights.classes.clone(),
        tensors: weights
            .tensors()
            .iter()
            .map(|t| TensorEntry { name: t.name.clone(), shape: t.shape.clone() })
            .collect(),
        norm: weights.norm.clone(),
        user_id: weights.user_id.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let io = |e| Error::io("<weights>", e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    let mut buf = Vec::new();
    for t in weights.tensors() {
        buf.clear();
        buf.reserve(t.data.len() * 4);
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_weights<R: Read>(mut r: R) -> Result<ModelWeights> {
    let mut pre = [0u8; 12];
    r.read_exact(&mut pre)
        .map_err(|_| Error::Truncated("weight file preamble".into()))?;
    if &pre[..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(&pre[..4])
        )));
    }
    let version = u32::from_le_bytes(pre[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Version(version));
    }
    let len = u32::from_le_bytes(pre[8..12].try_into().unwrap()) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)
        .map_err(|_| Error::Truncated("weight file header".into()))?;
    let header: Header =
        serde_json::from_slice(&json).map_err(|e| Error::Format(format!("header: {e}")))?;

    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes).map_err(|_| {
            Error::Truncated(format!("tensor {} declares {n} floats", entry.name))
        })?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push(Tensor { name: entry.name, shape: entry.shape, data });
    }
    let mut weights = ModelWeights::from_tensors(header.spec, header.classes, header.norm, tensors)?;
    weights.user_id = header.user_id;
    Ok(weights)
}

pub fn save_weights(weights: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_weights(weights, std::io::BufWriter::new(f))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelWeights> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_weights(std::io::BufReader::new(f))
}
