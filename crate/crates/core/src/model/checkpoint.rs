//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, u32 format version, u64 header length, a JSON
//! header (config plus tensor names and lengths), then every tensor as raw
//! little-endian `f32` in header order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::network::Transformer;
use super::params::Params;
use super::{ModelError, Result};

const MAGIC: &[u8; 8] = b"LRSMTCK\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

/// Header of a checkpoint file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn to_bytes(model: &Transformer<f32>) -> Vec<u8> {
    let tensors = model.params.tensors();
    let header = Checkpoint {
        version: VERSION,
        config: model.config.clone(),
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                len: t.len(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + 4 * model.params.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(mut bytes: &[u8]) -> Result<Transformer<f32>> {
    let bad = |m: &str| ModelError::Checkpoint(m.to_string());
    let mut magic = [0u8; 8];
    bytes.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let mut word = [0u8; 4];
    bytes.read_exact(&mut word).map_err(|_| bad("truncated"))?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut len = [0u8; 8];
    bytes.read_exact(&mut len).map_err(|_| bad("truncated"))?;
    let hlen = u64::from_le_bytes(len) as usize;
    if bytes.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: Checkpoint =
        serde_json::from_slice(&bytes[..hlen]).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    bytes = &bytes[hlen..];
    header.config.validate()?;
    let mut params = Params::<f32>::zeros(&header.config);
    let slots = params.tensors_mut();
    if slots.len() != header.tensors.len() {
        return Err(bad("tensor count does not match config"));
    }
    for ((name, slot), entry) in slots.into_iter().zip(&header.tensors) {
        if name != entry.name || slot.len() != entry.len {
            return Err(ModelError::Checkpoint(format!(
                "tensor {} does not match expected {name}",
                entry.name
            )));
        }
        if bytes.len() < 4 * entry.len {
            return Err(bad("truncated tensor data"));
        }
        for (v, chunk) in slot.iter_mut().zip(bytes.chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        }
        bytes = &bytes[4 * entry.len..];
    }
    if !bytes.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Transformer::from_parts(header.config, params)
}

pub fn save_checkpoint(path: &Path, model: &Transformer<f32>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&to_bytes(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Transformer<f32>> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Preset};

    #[test]
    fn round_trip() {
        let mut cfg = ModelConfig::preset(Preset::Base, 20, 4);
        cfg.enc_layers = 2;
        cfg.dec_layers = 1;
        let model = Transformer::<f32>::new(cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &model).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), model);
    }

    #[test]
    fn rejects_damage() {
        let model = Transformer::<f32>::new(ModelConfig::preset(Preset::Base, 10, 0)).unwrap();
        let bytes = to_bytes(&model);
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(from_bytes(b"nonsense").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
    }
}
