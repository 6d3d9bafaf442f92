//! Versioned checkpoint files: magic, format version, a JSON header with the
//! architecture and training digest, then little-endian `f32` parameters.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MaskedSeqModel, ModelConfig, ModelError};
use crate::codec::Token;

const MAGIC: &[u8; 8] = b"LEAPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub model: ModelConfig,
    pub vocab: usize,
    pub param_count: usize,
    /// Digest of the training configuration that produced the weights.
    pub train_digest: String,
    pub epoch: usize,
}

pub fn save_checkpoint(
    model: &MaskedSeqModel<f32>,
    train_digest: &str,
    epoch: usize,
    path: &Path,
) -> Result<(), ModelError> {
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        model: *model.config(),
        vocab: Token::VOCAB,
        param_count: model.param_count(),
        train_digest: train_digest.to_string(),
        epoch,
    };
    let json = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for v in model.params() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8]), ModelError> {
    let bad = |m: &str| ModelError::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let rest = &bytes[20..];
    if rest.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&rest[..hlen]).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    if header.vocab != Token::VOCAB {
        return Err(ModelError::DimMismatch {
            expected: format!("vocab {}", Token::VOCAB),
            found: format!("vocab {}", header.vocab),
        });
    }
    let payload = &rest[hlen..];
    if payload.len() != header.param_count * 4 {
        return Err(bad("payload length does not match parameter count"));
    }
    Ok((header, payload))
}

fn decode_payload(payload: &[u8]) -> Vec<f32> {
    payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

/// Load a model with the architecture recorded in the file.
pub fn load_checkpoint(path: &Path) -> Result<(MaskedSeqModel<f32>, CheckpointHeader), ModelError> {
    let bytes = fs::read(path)?;
    let (header, payload) = read_header(&bytes)?;
    let model = MaskedSeqModel::from_params(header.model, decode_payload(payload))?;
    Ok((model, header))
}

/// Load weights into an existing model; any architecture difference is an error.
pub fn load_into(path: &Path, model: &mut MaskedSeqModel<f32>) -> Result<CheckpointHeader, ModelError> {
    let bytes = fs::read(path)?;
    let (header, payload) = read_header(&bytes)?;
    if header.model != *model.config() || header.param_count != model.param_count() {
        return Err(ModelError::DimMismatch {
            expected: model.config().describe(),
            found: header.model.describe(),
        });
    }
    model.params_mut().copy_from_slice(&decode_payload(payload));
    Ok(header)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_dim_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = MaskedSeqModel::<f32>::new(ModelConfig::tiny(6, 5), 1).unwrap();
        save_checkpoint(&m, "abc", 3, &path).unwrap();
        let (back, header) = load_checkpoint(&path).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(header.epoch, 3);
        assert_eq!(header.train_digest, "abc");

        let mut other = MaskedSeqModel::<f32>::new(ModelConfig::tiny(6, 6), 1).unwrap();
        assert!(matches!(
            load_into(&path, &mut other),
            Err(ModelError::DimMismatch { .. })
        ));
        let mut same = MaskedSeqModel::<f32>::new(ModelConfig::tiny(6, 5), 2).unwrap();
        load_into(&path, &mut same).unwrap();
        assert_eq!(same.params(), m.params());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = MaskedSeqModel::<f32>::new(ModelConfig::tiny(6, 5), 1).unwrap();
        save_checkpoint(&m, "", 0, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
        fs::write(&path, b"garbage").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
