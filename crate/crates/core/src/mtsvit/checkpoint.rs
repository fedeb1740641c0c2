//! Single-file parameter container.
//!
//! Layout: `u64` little-endian header length, a JSON header
//! `{config, tensors: [{name, shape, offset}], metadata}`, then every tensor
//! as little-endian `f64` values. `offset` counts bytes from the start of
//! the payload.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, Mtsvit, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    metadata: serde_json::Value,
}

/// A model plus free-form metadata (normalization statistics, run config).
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Mtsvit,
    pub metadata: serde_json::Value,
}

pub fn save_checkpoint(path: &Path, model: &Mtsvit, metadata: &serde_json::Value) -> Result<()> {
    let mut offset = 0u64;
    let tensors = model
        .store
        .params()
        .iter()
        .map(|p| {
            let e = TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
            };
            offset += 8 * p.value.len() as u64;
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        tensors,
        metadata: metadata.clone(),
    })
    .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    for p in model.store.params() {
        for v in p.value.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |msg: &str| ModelError::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let payload_start = 8usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[8..payload_start]).map_err(|e| bad(&e.to_string()))?;
    let payload = &bytes[payload_start..];
    let mut values = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let start = t.offset as usize;
        let end = start + 8 * n;
        if end > payload.len() {
            return Err(bad(&format!("tensor {} runs past the end of the file", t.name)));
        }
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        values.push((t.name.clone(), Tensor::new(t.shape.clone(), data)?));
    }
    let mut model = Mtsvit::new(header.config, 0)?;
    model.store.load_values(values)?;
    Ok(Checkpoint {
        model,
        metadata: header.metadata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{scaled_modality_set, Cadence};

    #[test]
    fn round_trip_is_bitwise() {
        let specs = scaled_modality_set(Cadence::Annual, 1, 4).unwrap();
        let mut cfg = ModelConfig::for_specs(&specs);
        cfg.d = 8;
        cfg.heads = 2;
        let model = Mtsvit::new(cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let meta = serde_json::json!({"mean": [0.5, 1.5]});
        save_checkpoint(&path, &model, &meta).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.metadata, meta);
        assert_eq!(back.model.config, model.config);
        for (a, b) in back.model.store.params().iter().zip(model.store.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        std::fs::write(&path, [1u8, 0, 0]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
