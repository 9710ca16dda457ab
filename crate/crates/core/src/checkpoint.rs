//! Single-file checkpoints: an 8-byte magic, the little-endian length of a
//! JSON manifest, the manifest, then the raw little-endian tensor payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embeddings::{EmbeddingMatrix, Vocabulary};
use crate::error::{Result, StrafeError};
use crate::model::{ModelConfig, StrafeModel};
use crate::optim::ParamStore;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"STRAFECK";
pub const FORMAT_VERSION: u32 = 1;
pub const KIND_MODEL: &str = "model-v1";
pub const KIND_EMBEDDINGS: &str = "embeddings-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload.
    pub offset: usize,
    /// Length in bytes.
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode<T: Real>(kind: &str, config: serde_json::Value, tensors: &[(&str, &Tensor<T>)]) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let offset = payload.len();
        for &v in t.data() {
            v.write_le(&mut payload);
        }
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE.to_string(),
            offset,
            length: payload.len() - offset,
        });
    }
    let manifest = serde_json::to_vec(&Manifest {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        config,
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(16 + manifest.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn bad(msg: impl Into<String>) -> StrafeError {
    StrafeError::Checkpoint(msg.into())
}

/// Parses and validates a checkpoint; returns the manifest and payload.
pub fn decode(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let manifest_end = 16usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..manifest_end])?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", manifest.format_version)));
    }
    let payload = &bytes[manifest_end..];
    let mut spans: Vec<(usize, usize)> = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let width = match e.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(bad(format!("tensor `{}` has unknown dtype {other}", e.name))),
        };
        let elements: usize = e.shape.iter().product();
        if e.shape.is_empty() || elements * width != e.length {
            return Err(bad(format!("tensor `{}`: shape {:?} does not fit {} bytes", e.name, e.shape, e.length)));
        }
        if e.offset.checked_add(e.length).is_none_or(|end| end > payload.len()) {
            return Err(bad(format!("tensor `{}` lies outside the payload", e.name)));
        }
        spans.push((e.offset, e.offset + e.length));
    }
    spans.sort_unstable();
    if spans.windows(2).any(|w| w[1].0 < w[0].1) {
        return Err(bad("tensor byte ranges overlap"));
    }
    Ok((manifest, payload))
}

fn read_tensor<T: Real>(e: &TensorEntry, payload: &[u8]) -> Result<Tensor<T>> {
    if e.dtype != T::DTYPE {
        return Err(bad(format!("tensor `{}` is {}, expected {}", e.name, e.dtype, T::DTYPE)));
    }
    let data = payload[e.offset..e.offset + e.length].chunks_exact(T::BYTES).map(T::read_le).collect();
    Tensor::from_vec(e.shape.clone(), data)
}

fn expect_kind(m: &Manifest, kind: &str) -> Result<()> {
    if m.kind != kind {
        return Err(bad(format!("checkpoint holds `{}`, expected `{kind}`", m.kind)));
    }
    Ok(())
}

pub fn model_to_bytes<T: Real>(model: &StrafeModel<T>) -> Result<Vec<u8>> {
    let tensors: Vec<(&str, &Tensor<T>)> = model.params.iter().map(|(k, p)| (k.as_str(), &p.value)).collect();
    encode(KIND_MODEL, serde_json::to_value(&model.config)?, &tensors)
}

pub fn model_from_bytes<T: Real>(bytes: &[u8]) -> Result<StrafeModel<T>> {
    let (manifest, payload) = decode(bytes)?;
    expect_kind(&manifest, KIND_MODEL)?;
    let config: ModelConfig = serde_json::from_value(manifest.config.clone())?;
    let mut params = ParamStore::new();
    for e in &manifest.tensors {
        params.insert(e.name.clone(), read_tensor(e, payload)?);
    }
    StrafeModel::from_params(config, params)
}

pub fn save_model<T: Real>(path: impl AsRef<Path>, model: &StrafeModel<T>) -> Result<()> {
    fs::write(path, model_to_bytes(model)?)?;
    Ok(())
}

pub fn load_model<T: Real>(path: impl AsRef<Path>) -> Result<StrafeModel<T>> {
    model_from_bytes(&fs::read(path)?)
}

pub fn embeddings_to_bytes(emb: &EmbeddingMatrix) -> Result<Vec<u8>> {
    let matrix = Tensor::from_vec(vec![emb.vocab.len(), emb.dim], emb.data.clone())?;
    encode(KIND_EMBEDDINGS, serde_json::to_value(&emb.vocab)?, &[("embeddings", &matrix)])
}

pub fn embeddings_from_bytes(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    let (manifest, payload) = decode(bytes)?;
    expect_kind(&manifest, KIND_EMBEDDINGS)?;
    let vocab: Vocabulary = serde_json::from_value(manifest.config.clone())?;
    let entry = manifest
        .tensors
        .iter()
        .find(|e| e.name == "embeddings")
        .ok_or_else(|| bad("missing `embeddings` tensor"))?;
    let t: Tensor<f32> = read_tensor(entry, payload)?;
    let dim = *t.shape().last().expect("non-empty shape");
    EmbeddingMatrix::new(vocab, dim, t.into_data())
}

pub fn save_embeddings(path: impl AsRef<Path>, emb: &EmbeddingMatrix) -> Result<()> {
    fs::write(path, embeddings_to_bytes(emb)?)?;
    Ok(())
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    embeddings_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn model() -> StrafeModel<f32> {
        StrafeModel::new(ModelConfig {
            variant: Variant::StrafeLstm,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let m = model();
        let bytes = model_to_bytes(&m).unwrap();
        let back: StrafeModel<f32> = model_from_bytes(&bytes).unwrap();
        assert_eq!(back.config, m.config);
        for (name, p) in m.params.iter() {
            let q = back.params.get(name).unwrap();
            let a: Vec<u32> = p.value.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = q.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "{name}");
        }
        assert_eq!(model_to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model();
        save_model(&path, &m).unwrap();
        assert_eq!(load_model::<f32>(&path).unwrap().params, m.params);
        assert!(load_model::<f64>(&path).is_err());
    }

    #[test]
    fn embeddings_round_trip() {
        let vocab = Vocabulary::from_counts([("cond:a".to_string(), 3), ("drug:b".to_string(), 1)].into());
        let emb = EmbeddingMatrix::new(vocab, 2, vec![0.1, -0.2, f32::MIN_POSITIVE, 7.5]).unwrap();
        let back = embeddings_from_bytes(&embeddings_to_bytes(&emb).unwrap()).unwrap();
        assert_eq!(back, emb);
        assert!(model_from_bytes::<f32>(&embeddings_to_bytes(&emb).unwrap()).is_err());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = model_to_bytes(&model()).unwrap();
        assert!(decode(&bytes[..10]).is_err());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode(&wrong).is_err());

        let t = Tensor::<f32>::zeros(&[2]);
        let mut good = encode("x", serde_json::Value::Null, &[("a", &t), ("b", &t)]).unwrap();
        assert!(decode(&good).is_ok());
        // Point the second tensor at the first one's bytes.
        let len = u64::from_le_bytes(good[8..16].try_into().unwrap()) as usize;
        let text = String::from_utf8(good[16..16 + len].to_vec()).unwrap();
        let patched = text.replacen("\"offset\":8", "\"offset\":4", 1);
        assert_eq!(patched.len(), text.len());
        good[16..16 + len].copy_from_slice(patched.as_bytes());
        assert!(matches!(decode(&good), Err(StrafeError::Checkpoint(_))));
    }

    #[test]
    fn mismatched_layout_is_rejected() {
        let m = model();
        let mut params = m.params.clone();
        params.insert("extra", Tensor::zeros(&[1]));
        let tensors: Vec<(&str, &Tensor<f32>)> = params.iter().map(|(k, p)| (k.as_str(), &p.value)).collect();
        let bytes = encode(KIND_MODEL, serde_json::to_value(&m.config).unwrap(), &tensors).unwrap();
        assert!(model_from_bytes::<f32>(&bytes).is_err());
    }
}
