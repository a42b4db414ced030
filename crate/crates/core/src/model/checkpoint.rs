//! Checkpoint container.
//!
//! ```text
//! offset  size  content
//! 0       8     magic b"CPCTCKPT"
//! 8       4     format version, u32 little-endian
//! 12      8     header length in bytes, u64 little-endian
//! 20      n     header: UTF-8 JSON {format, version, config, vocab, tensors}
//! 20+n    8*k   parameters as f64 little-endian, tensors in header order
//! ```
//! Nothing may follow the last parameter.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::network::Model;
use crate::error::{Error, Result};
use crate::vocab::Vocab;

pub const MAGIC: &[u8; 8] = b"CPCTCKPT";
pub const VERSION: u32 = 1;
const FORMAT: &str = "copyctc-checkpoint";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    config: ModelConfig,
    vocab: Vec<String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

fn entries(model: &Model) -> Vec<TensorEntry> {
    model
        .layout()
        .tensors
        .iter()
        .map(|t| TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
        })
        .collect()
}

pub fn to_bytes(model: &Model, vocab: &Vocab) -> Result<Vec<u8>> {
    if vocab.len() != model.config().vocab_size {
        return Err(Error::ConfigMismatch(format!(
            "vocabulary has {} tokens but the model expects {}",
            vocab.len(),
            model.config().vocab_size
        )));
    }
    let header = Header {
        format: FORMAT.to_string(),
        version: VERSION,
        config: model.config().clone(),
        vocab: vocab.tokens().to_vec(),
        tensors: entries(model),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * model.params().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in model.params() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model, Vocab)> {
    let corrupt = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = 20usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..body])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(corrupt("header format or version disagrees with the container"));
    }
    let vocab = Vocab::new(header.vocab)?;
    if vocab.len() != header.config.vocab_size {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint vocabulary has {} tokens but its config says {}",
            vocab.len(),
            header.config.vocab_size
        )));
    }
    let data = &bytes[body..];
    if data.len() % 8 != 0 {
        return Err(corrupt("parameter section is not a whole number of f64 values"));
    }
    let params: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let model = Model::from_params(header.config, params)
        .map_err(|e| Error::Checkpoint(format!("parameters do not match the config: {e}")))?;
    if entries(&model) != header.tensors {
        return Err(corrupt("tensor table does not match the config"));
    }
    if model.params().iter().any(|v| !v.is_finite()) {
        return Err(corrupt("non-finite parameter"));
    }
    Ok((model, vocab))
}

pub fn save_checkpoint(model: &Model, vocab: &Vocab, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model, vocab)?).map_err(|e| Error::path(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, Vocab)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::path(path, e))?;
    from_bytes(&bytes)
}

/// Loads a checkpoint and checks it was trained on `vocab`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Model> {
    let (model, stored) = load_checkpoint(path)?;
    if stored.len() != vocab.len() {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint vocabulary size {} differs from expected {}",
            stored.len(),
            vocab.len()
        )));
    }
    if &stored != vocab {
        return Err(Error::ConfigMismatch("checkpoint vocabulary differs from expected".into()));
    }
    Ok(model)
}
