//! Binary parameter container and the on-disk model layout.
//!
//! A checkpoint file is the magic `BMRCCKPT`, a little-endian `u32` header
//! length, a JSON header naming every tensor and its shape, and then the
//! tensors as row-major little-endian `f32` in header order. The
//! vocabulary is stored next to it as one token per line.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{Model, ModelParams};

pub const MAGIC: &[u8; 8] = b"BMRCCKPT";
pub const FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub encoder: EncoderConfig,
    pub vocab_size: usize,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode(model: &Model) -> Vec<u8> {
    let named = model.params.named_tensors();
    let header = Header {
        version: FORMAT_VERSION,
        encoder: model.config,
        vocab_size: model.vocab.len(),
        tensors: named
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: [t.rows(), t.cols()],
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + header.len() + 4 * model.params.num_parameters());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in named {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Reads a container produced by [`encode`] into a model with `vocab`.
pub fn decode(bytes: &[u8], vocab: Vocabulary) -> Result<Model> {
    let bad = |m: String| Error::Checkpoint(m);
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)".into()));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12 + header_len;
    if bytes.len() < header_end {
        return Err(bad("truncated header".into()));
    }
    let header: Header =
        serde_json::from_slice(&bytes[12..header_end]).map_err(|e| bad(format!("malformed header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(bad(format!("unsupported version {}", header.version)));
    }
    header.encoder.validate()?;
    if header.vocab_size != vocab.len() {
        return Err(bad(format!(
            "checkpoint expects a vocabulary of {} tokens, found {}",
            header.vocab_size,
            vocab.len()
        )));
    }

    let mut params = ModelParams::init(&header.encoder, vocab.len(), 0);
    let expected: Vec<(String, [usize; 2])> = params
        .named_tensors()
        .iter()
        .map(|(n, t)| (n.clone(), [t.rows(), t.cols()]))
        .collect();
    if expected.len() != header.tensors.len() {
        return Err(bad(format!(
            "checkpoint lists {} tensors, encoder config needs {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    for ((name, shape), entry) in expected.iter().zip(&header.tensors) {
        if *name != entry.name || *shape != entry.shape {
            return Err(bad(format!(
                "tensor `{}` has shape {:?}, encoder config needs `{}` with shape {:?}",
                entry.name, entry.shape, name, shape
            )));
        }
    }

    let mut data = &bytes[header_end..];
    for t in params.tensors_mut() {
        let n = t.data().len() * 4;
        if data.len() < n {
            return Err(bad("truncated tensor data".into()));
        }
        for (v, chunk) in t.data_mut().iter_mut().zip(data[..n].chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
        data = &data[n..];
    }
    if !data.is_empty() {
        return Err(bad(format!("{} trailing bytes after tensor data", data.len())));
    }
    Ok(Model {
        config: header.encoder,
        vocab,
        params,
    })
}

/// Writes `model.ckpt` and `vocab.txt` into `dir`, creating it if needed.
pub fn save_model(model: &Model, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(CHECKPOINT_FILE);
    std::fs::write(&path, encode(model)).map_err(|e| Error::io(&path, e))?;
    model.vocab.save(dir.join(VOCAB_FILE))
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<Model> {
    let dir = dir.as_ref();
    let vocab = Vocabulary::load(dir.join(VOCAB_FILE))?;
    let path = dir.join(CHECKPOINT_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    decode(&bytes, vocab)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(d_h: usize) -> Model {
        let cfg = EncoderConfig {
            d_h,
            n_layers: 1,
            n_heads: 2,
            d_ff: 8,
            max_len: 16,
            dropout_rate: 0.1,
        };
        Model::new(cfg, Vocabulary::build(["food", "great"]), 3).unwrap()
    }

    #[test]
    fn round_trip_is_exact_after_rounding() {
        let mut m = model(8);
        m.params.round_to_f32();
        let back = decode(&encode(&m), m.vocab.clone()).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode(&back), encode(&m));
    }

    #[test]
    fn save_and_load_directory() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = model(8);
        save_model(&m, dir.path()).unwrap();
        m.params.round_to_f32();
        assert_eq!(load_model(dir.path()).unwrap(), m);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let m = model(8);
        let bytes = encode(&m);
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode(&wrong, m.vocab.clone()).is_err());
        assert!(decode(&bytes[..bytes.len() - 1], m.vocab.clone()).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode(&long, m.vocab.clone()).is_err());
    }

    #[test]
    fn vocabulary_size_mismatch_is_descriptive() {
        let m = model(8);
        let other = Vocabulary::build(["food", "great", "soup"]);
        let err = decode(&encode(&m), other).unwrap_err().to_string();
        assert!(err.contains("vocabulary"), "{err}");
    }

    #[test]
    fn shape_mismatch_names_the_tensor() {
        let m = model(8);
        let mut bytes = encode(&m);
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[12..12 + header_len].to_vec()).unwrap();
        let patched = header.replacen("\"d_ff\":8", "\"d_ff\":4", 1);
        assert_eq!(patched.len(), header.len());
        bytes.splice(12..12 + header_len, patched.into_bytes());
        let err = decode(&bytes, m.vocab.clone()).unwrap_err().to_string();
        assert!(err.contains("block0.ff.in.weight"), "{err}");
    }
}
