//! Self-describing checkpoint container.
//!
//! Layout: the 8-byte magic `TLMCKPT1`, a little-endian `u64` header length, a JSON header
//! (configuration, schema hash, vocabularies, training record and tensor manifest), then every
//! parameter tensor as little-endian `f32` in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::forward::Model;
use super::params::ModelParams;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TLMCKPT1";

/// Node and customer vocabularies the embeddings were trained with.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VocabularyMap {
    /// IPv4 address of each node index.
    pub node_ips: Vec<String>,
    /// Customer index of each node index.
    pub node_customers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub steps: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub model: Model,
    pub schema_hash: String,
    pub config_digest: String,
    pub vocab: VocabularyMap,
    pub training: TrainingRecord,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    schema_hash: String,
    #[serde(default)]
    config_digest: String,
    vocab: VocabularyMap,
    training: TrainingRecord,
    tensors: Vec<ManifestEntry>,
}

fn bad(message: impl Into<String>) -> Error {
    Error::format("checkpoint", message)
}

impl ModelCheckpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.model.config.clone(),
            schema_hash: self.schema_hash.clone(),
            config_digest: self.config_digest.clone(),
            vocab: self.vocab.clone(),
            training: self.training.clone(),
            tensors: self
                .model
                .config
                .parameter_shapes()
                .into_iter()
                .map(|(name, shape)| ManifestEntry { name, shape })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.model.parameter_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        self.model.params.for_each(|_, s| {
            for &x in s {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        });
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing magic"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let rest = &bytes[16..];
        if header_len > rest.len() as u64 {
            return Err(bad("header length exceeds file"));
        }
        let (json, payload) = rest.split_at(header_len as usize);
        let header: Header = serde_json::from_slice(json)?;
        let cfg = header.config;
        cfg.validate()?;

        let expected = cfg.parameter_shapes();
        if expected.len() != header.tensors.len()
            || expected
                .iter()
                .zip(&header.tensors)
                .any(|((n, s), e)| *n != e.name || *s != e.shape)
        {
            return Err(bad("tensor manifest does not match configuration"));
        }
        let total = expected.iter().try_fold(0u64, |acc, (_, s)| {
            s.iter()
                .try_fold(1u64, |p, &d| p.checked_mul(d as u64))
                .and_then(|n| acc.checked_add(n))
        });
        if total.and_then(|t| t.checked_mul(4)) != Some(payload.len() as u64) {
            return Err(bad("payload size does not match manifest"));
        }
        if header.vocab.node_ips.len() != cfg.n_nodes
            || header.vocab.node_customers.len() != cfg.n_nodes
            || header.vocab.node_customers.iter().any(|&c| c >= cfg.n_customers)
        {
            return Err(bad("vocabulary does not match configuration"));
        }

        let mut params = ModelParams::zeros(&cfg);
        let mut chunks = payload.chunks_exact(4);
        params.for_each_mut(|_, s| {
            for (x, c) in s.iter_mut().zip(chunks.by_ref()) {
                *x = f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64;
            }
        });
        if !params.all_finite() {
            return Err(bad("non-finite parameter"));
        }
        Ok(Self {
            model: Model::from_params(cfg, params)?,
            schema_hash: header.schema_hash,
            config_digest: header.config_digest,
            vocab: header.vocab,
            training: header.training,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        match fs::read(path) {
            Ok(bytes) => Self::decode(&bytes),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                Err(Error::MissingArtifact(path.to_path_buf()))
            }
            Err(e) => Err(e.into()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ModelCheckpoint {
        let mut cfg = ModelConfig::small(3, 2, 1);
        cfg.d_model = 8;
        cfg.d_ff = 16;
        cfg.max_len = 6;
        ModelCheckpoint {
            model: Model::new(cfg, 7).unwrap(),
            schema_hash: "abcd".into(),
            config_digest: "ef".into(),
            vocab: VocabularyMap {
                node_ips: vec!["10.0.0.1".into(), "10.0.0.2".into()],
                node_customers: vec![0, 0],
            },
            training: TrainingRecord {
                steps: 12,
                epochs: 2,
                best_epoch: 1,
                best_val_loss: Some(1.5),
            },
        }
    }

    #[test]
    fn round_trip_to_f32_precision() {
        let ck = sample();
        let back = ModelCheckpoint::decode(&ck.encode().unwrap()).unwrap();
        assert_eq!(back.model.config, ck.model.config);
        assert_eq!(back.vocab, ck.vocab);
        assert_eq!(back.training, ck.training);
        for ((_, a), (_, b)) in back.model.params.tensors().iter().zip(ck.model.params.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let bytes = sample().encode().unwrap();
        assert!(ModelCheckpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(ModelCheckpoint::decode(&b).is_err());
        assert!(ModelCheckpoint::decode(&bytes[..10]).is_err());
    }
}
