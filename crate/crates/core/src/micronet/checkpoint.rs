//! Flat binary checkpoints: magic, format version, a JSON header holding the
//! model config and selection metadata, then every parameter and running
//! statistic as little-endian f64 in declaration order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Model, ModelConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TRCAMNET";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub fold: u8,
    pub epoch: usize,
    pub val_acc: f64,
}

pub fn encode(model: &Model, fold: u8, epoch: usize, val_acc: f64) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        model: model.config.clone(),
        fold,
        epoch,
        val_acc,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let params = model.params();
    let count: usize = params.iter().map(|p| p.value.len()).sum();
    let mut out = Vec::with_capacity(24 + json.len() + 8 * count);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for p in params {
        for v in &p.value {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(Model, CheckpointHeader)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let take = |at: usize, n: usize| bytes.get(at..at + n).ok_or_else(|| bad("truncated file"));
    if take(0, 8)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(take(8, 4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let json_len = u32::from_le_bytes(take(12, 4)?.try_into().expect("4 bytes")) as usize;
    let header: CheckpointHeader = serde_json::from_slice(take(16, json_len)?)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut at = 16 + json_len;
    let count = u64::from_le_bytes(take(at, 8)?.try_into().expect("8 bytes")) as usize;
    at += 8;
    let mut model = Model::new(header.model.clone())?;
    let expected: usize = model.params().iter().map(|p| p.value.len()).sum();
    if count != expected || bytes.len() != at + 8 * count {
        return Err(Error::Checkpoint(format!(
            "blob holds {count} values, config needs {expected}"
        )));
    }
    for p in model.params_mut() {
        for v in p.value.iter_mut() {
            *v = f64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
            at += 8;
        }
    }
    Ok((model, header))
}

pub fn save(path: &Path, model: &Model, fold: u8, epoch: usize, val_acc: f64) -> Result<()> {
    let bytes = encode(model, fold, epoch, val_acc)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Model, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::micronet::layers::Mode;
    use crate::micronet::tensor::Tensor;

    fn config() -> ModelConfig {
        ModelConfig {
            widths: [2, 3, 4, 4, 4],
            bottlenecks: [1, 1, 1, 1],
            head_channels: 5,
            input_side: 32,
            init_seed: 9,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_preserves_outputs_bitwise() {
        let mut model = Model::new(config()).unwrap();
        for p in model.params_mut() {
            if !p.trainable {
                p.value
                    .iter_mut()
                    .enumerate()
                    .for_each(|(i, v)| *v += 0.01 * i as f64);
            }
        }
        let bytes = encode(&model, 3, 17, 0.875).unwrap();
        let (mut back, header) = decode(&bytes).unwrap();
        assert_eq!((header.fold, header.epoch, header.val_acc), (3, 17, 0.875));
        let x = Tensor::from_vec(
            [2, 1, 32, 32],
            (0..2048).map(|i| (i % 13) as f64 / 13.0).collect(),
        )
        .unwrap();
        let a = model.forward(&x, Mode::Eval).unwrap().logits;
        let b = back.forward(&x, Mode::Eval).unwrap().logits;
        assert_eq!(a.data(), b.data());
        assert_eq!(encode(&back, 3, 17, 0.875).unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let model = Model::new(config()).unwrap();
        let bytes = encode(&model, 1, 1, 0.5).unwrap();
        assert!(decode(&bytes[..bytes.len() - 8]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode(&wrong).is_err());
        assert!(decode(&[]).is_err());
    }
}
