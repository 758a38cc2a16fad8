//! Single-file parameter checkpoints.
//!
//! Layout: an 8-byte little-endian header length `n`, `n` bytes of JSON
//! [`CheckpointHeader`], then every tensor's values as little-endian `f64`
//! in header order, each tensor row-major.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::error::{Error, Result};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorHeader {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub schema_version: u32,
    pub seed: u64,
    pub variant: String,
    /// Free-form model description (shapes, config) stored verbatim.
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorHeader>,
}

pub fn encode_checkpoint(params: &ParamSet, variant: &str, meta: serde_json::Value) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        seed: params.seed,
        variant: variant.to_string(),
        meta,
        tensors: params
            .tensors()
            .iter()
            .map(|t| TensorHeader {
                name: t.name.clone(),
                shape: [t.value.nrows(), t.value.ncols()],
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + params.num_values() * 8);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params.tensors() {
        for v in t.value.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, ParamSet)> {
    let bad = |detail: String| Error::format("checkpoint", detail);
    if bytes.len() < 8 {
        return Err(bad("truncated header length".into()));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(8..8 + n).ok_or_else(|| bad("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    if header.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(bad(format!("unsupported schema version {}", header.schema_version)));
    }
    let mut values = bytes[8 + n..].chunks_exact(8);
    if bytes[8 + n..].len() % 8 != 0 {
        return Err(bad("value section is not a whole number of f64".into()));
    }
    let mut params = ParamSet::new(header.seed);
    for t in &header.tensors {
        let [r, c] = t.shape;
        let vals: Vec<f64> = values
            .by_ref()
            .take(r * c)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        if vals.len() != r * c {
            return Err(bad(format!("truncated values for {}", t.name)));
        }
        let arr = Array2::from_shape_vec((r, c), vals).map_err(|e| bad(e.to_string()))?;
        params.push(&t.name, arr)?;
    }
    if values.next().is_some() {
        return Err(bad("trailing values after last tensor".into()));
    }
    Ok((header, params))
}

pub fn save_checkpoint(path: &Path, params: &ParamSet, variant: &str, meta: serde_json::Value) -> Result<()> {
    let bytes = encode_checkpoint(params, variant, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ParamSet)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    fn params() -> ParamSet {
        let mut p = ParamSet::new(42);
        p.add("enc.wh", (3, 12), Init::Uniform { fan_in: 3 }).unwrap();
        p.add("head.b", (1, 1), Init::Constant(-0.25)).unwrap();
        p
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = params();
        save_checkpoint(&path, &p, "seq2seq", serde_json::json!({"hidden": 3})).unwrap();
        let (h, q) = load_checkpoint(&path).unwrap();
        assert_eq!(q, p);
        assert_eq!(h.variant, "seq2seq");
        assert_eq!(h.tensors[0].shape, [3, 12]);
        assert_eq!(h.meta["hidden"], 3);
    }

    #[test]
    fn truncation_detected() {
        let bytes = encode_checkpoint(&params(), "x", serde_json::Value::Null).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 8]).is_err());
        assert!(decode_checkpoint(&bytes[..4]).is_err());
        let mut extra = bytes.clone();
        extra.extend_from_slice(&0f64.to_le_bytes());
        assert!(decode_checkpoint(&extra).is_err());
    }

    #[test]
    fn encoding_is_deterministic() {
        let a = encode_checkpoint(&params(), "x", serde_json::Value::Null).unwrap();
        let b = encode_checkpoint(&params(), "x", serde_json::Value::Null).unwrap();
        assert_eq!(a, b);
    }
}
