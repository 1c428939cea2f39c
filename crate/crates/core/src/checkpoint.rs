//! On-disk formats for model weights and training resume state.
//!
//! Checkpoint: the 8-byte magic `AAETR01\n`, a little-endian `u32` header
//! length, a JSON header (model config plus the ordered tensor table), then
//! every tensor as little-endian `f32` in table order.
//!
//! Resume state: magic `AAETRRS\n`, `u32` header length, JSON header, then
//! parameters and both optimizer moment vectors as little-endian `f64`, so
//! a resumed run continues bit for bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AoaError, Result};
use crate::model::{init_weights, ModelConfig, ModelWeights, TensorSpec};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AAETR01\n";
pub const RESUME_MAGIC: &[u8; 8] = b"AAETRRS\n";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    parameter_count: usize,
    tensors: Vec<TensorSpec>,
    #[serde(default)]
    metadata: serde_json::Value,
}

fn corrupt(msg: impl Into<String>) -> AoaError {
    AoaError::Checkpoint(msg.into())
}

/// Writes via a temporary sibling and a rename, so an interrupted write
/// never clobbers the previous file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn frame(magic: &[u8; 8], header: &[u8], payload_len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + header.len() + payload_len);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
    out
}

fn unframe<'a>(bytes: &'a [u8], magic: &[u8; 8], what: &str) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < 12 || &bytes[..8] != magic {
        return Err(corrupt(format!("not a {what} file (bad magic)")));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < len {
        return Err(corrupt(format!("{what} header truncated")));
    }
    Ok(body.split_at(len))
}

pub fn checkpoint_bytes(weights: &ModelWeights, metadata: serde_json::Value) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        model: weights.config().clone(),
        parameter_count: weights.parameter_count(),
        tensors: weights.tensors().to_vec(),
        metadata,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = frame(CHECKPOINT_MAGIC, &json, 4 * weights.parameter_count());
    for spec in weights.tensors() {
        for v in &weights.params()[spec.offset..spec.offset + spec.len()] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, weights: &ModelWeights, metadata: serde_json::Value) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(weights, metadata)?)
}

/// Parses a checkpoint, checking the tensor table against the layout its
/// config implies.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<(ModelWeights, serde_json::Value)> {
    let (header, payload) = unframe(bytes, CHECKPOINT_MAGIC, "checkpoint")?;
    let header: CheckpointHeader =
        serde_json::from_slice(header).map_err(|e| corrupt(format!("checkpoint header: {e}")))?;
    let template = init_weights(&header.model, 0).map_err(|e| corrupt(format!("checkpoint config: {e}")))?;
    if header.tensors != template.tensors() || header.parameter_count != template.parameter_count() {
        return Err(corrupt("tensor table does not match the model configuration"));
    }
    let n = template.parameter_count();
    if payload.len() != 4 * n {
        return Err(corrupt(format!(
            "expected {} tensor bytes, found {}",
            4 * n,
            payload.len()
        )));
    }
    let params: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let weights = ModelWeights::from_params(header.model, params)?;
    Ok((weights, header.metadata))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelWeights> {
    let bytes = fs::read(path)?;
    parse_checkpoint(&bytes).map(|(w, _)| w)
}

/// Everything needed to continue training exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub config: serde_json::Value,
    pub params: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ResumeHeader {
    step: u64,
    parameter_count: usize,
    config: serde_json::Value,
}

pub fn save_train_state(path: &Path, state: &TrainState) -> Result<()> {
    let n = state.params.len();
    if state.adam_m.len() != n || state.adam_v.len() != n {
        return Err(AoaError::invalid("optimizer moments do not match parameter count"));
    }
    let json = serde_json::to_vec(&ResumeHeader {
        step: state.step,
        parameter_count: n,
        config: state.config.clone(),
    })?;
    let mut out = frame(RESUME_MAGIC, &json, 24 * n);
    for v in state.params.iter().chain(&state.adam_m).chain(&state.adam_v) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &out)
}

pub fn load_train_state(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path)?;
    let (header, payload) = unframe(&bytes, RESUME_MAGIC, "resume state")?;
    let header: ResumeHeader =
        serde_json::from_slice(header).map_err(|e| corrupt(format!("resume header: {e}")))?;
    let n = header.parameter_count;
    if payload.len() != 24 * n {
        return Err(corrupt(format!("expected {} state bytes, found {}", 24 * n, payload.len())));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(TrainState {
        step: header.step,
        config: header.config,
        params: values[..n].to_vec(),
        adam_m: values[n..2 * n].to_vec(),
        adam_v: values[2 * n..].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_f32_exact() {
        let w = init_weights(&ModelConfig::tiny(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.aaetr");
        save_checkpoint(&path, &w, serde_json::json!({"step": 7})).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        let (back, meta) = parse_checkpoint(&bytes).unwrap();
        assert_eq!(meta["step"], 7);
        assert_eq!(back.config(), w.config());
        for (a, b) in back.params().iter().zip(w.params()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        // Re-saving the loaded weights reproduces the file byte for byte.
        assert_eq!(checkpoint_bytes(&back, meta).unwrap(), bytes);
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let w = init_weights(&ModelConfig::tiny(), 3).unwrap();
        let bytes = checkpoint_bytes(&w, serde_json::Value::Null).unwrap();
        assert!(matches!(parse_checkpoint(&bytes[..bytes.len() - 4]), Err(AoaError::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(parse_checkpoint(&bad), Err(AoaError::Checkpoint(_))));
        assert!(matches!(parse_checkpoint(b"AAETR01\n"), Err(AoaError::Checkpoint(_))));
        let mut nan = bytes.clone();
        let end = nan.len();
        nan[end - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(parse_checkpoint(&nan).is_err());
    }

    #[test]
    fn train_state_round_trip_is_exact() {
        let state = TrainState {
            step: 5,
            config: serde_json::json!({"a": 1}),
            params: vec![0.1, -2.5e-300, 3.0],
            adam_m: vec![1.0, 2.0, 3.0],
            adam_v: vec![f64::MIN_POSITIVE, 0.0, 7.0],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("resume.state");
        save_train_state(&path, &state).unwrap();
        assert_eq!(load_train_state(&path).unwrap(), state);
    }
}
