//! Single-file binary checkpoints.
//!
//! Layout: 8-byte magic, `u64` LE header length, JSON header, parameter
//! tensors (little-endian, in header order), optional Adam moments (all `m`
//! then all `v`), then a 32-byte SHA-256 of every preceding byte.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{StepRecord, TrainConfig, TrainError};
use crate::model::{HeadCalibration, Model, ModelConfig, ModelParameters};
use crate::nn::{AdamConfig, AdamState, Real, Tensor};
use crate::tokenizer::Vocabulary;

const MAGIC: &[u8; 8] = b"MOLTXCK1";
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub precision: String,
    pub model_config: ModelConfig,
    pub calibration: HeadCalibration,
    pub vocab: Option<Vocabulary>,
    pub codebook_hash: String,
    pub step: u64,
    pub params: Vec<(String, usize, usize)>,
    pub optimizer: Option<(AdamConfig, u64)>,
    pub history: Vec<StepRecord>,
    pub train_config: Option<TrainConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<R> {
    pub model: Model<R>,
    pub optimizer: Option<AdamState<R>>,
    pub step: u64,
    pub codebook_hash: String,
    pub vocab: Option<Vocabulary>,
    pub history: Vec<StepRecord>,
    pub train_config: Option<TrainConfig>,
}

impl<R: Real> Checkpoint<R> {
    pub fn new(model: Model<R>, codebook_hash: impl Into<String>) -> Self {
        Self {
            model,
            optimizer: None,
            step: 0,
            codebook_hash: codebook_hash.into(),
            vocab: None,
            history: Vec::new(),
            train_config: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, TrainError> {
        let p = &self.model.params;
        let header = CheckpointHeader {
            precision: R::NAME.to_string(),
            model_config: self.model.config,
            calibration: self.model.calibration.clone(),
            vocab: self.vocab,
            codebook_hash: self.codebook_hash.clone(),
            step: self.step,
            params: p
                .names
                .iter()
                .zip(&p.tensors)
                .map(|(n, t)| (n.clone(), t.rows, t.cols))
                .collect(),
            optimizer: self.optimizer.as_ref().map(|o| (o.config, o.step)),
            history: self.history.clone(),
            train_config: self.train_config.clone(),
        };
        let json = serde_json::to_vec(&header)
            .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut write = |ts: &[Tensor<R>]| {
            for t in ts {
                for v in &t.data {
                    v.write_le(&mut out);
                }
            }
        };
        write(&p.tensors);
        if let Some(o) = &self.optimizer {
            write(&o.m);
            write(&o.v);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    /// Parse and verify a checkpoint. With `expected_codebook_hash`, a
    /// checkpoint built against a different codebook is refused.
    pub fn from_bytes(bytes: &[u8], expected_codebook_hash: Option<&str>) -> Result<Self, TrainError> {
        let bad = |m: &str| TrainError::Checkpoint(m.to_string());
        let (header, hlen) = parse_header(bytes)?;
        let body = &bytes[..bytes.len() - DIGEST_LEN];
        if header.precision != R::NAME {
            return Err(TrainError::Checkpoint(format!(
                "checkpoint precision {} requested as {}",
                header.precision,
                R::NAME
            )));
        }
        if let Some(expected) = expected_codebook_hash {
            if expected != header.codebook_hash {
                return Err(TrainError::CodebookMismatch {
                    expected: header.codebook_hash,
                    found: expected.to_string(),
                });
            }
        }
        let mut cursor = 16 + hlen;
        let mut read = |rows: usize, cols: usize| -> Result<Tensor<R>, TrainError> {
            let n = rows * cols * R::BYTES;
            let chunk = body
                .get(cursor..cursor + n)
                .ok_or_else(|| bad("tensor data truncated"))?;
            cursor += n;
            let data = chunk.chunks_exact(R::BYTES).map(R::read_le).collect();
            Ok(Tensor::from_vec(rows, cols, data))
        };
        let mut names = Vec::with_capacity(header.params.len());
        let mut tensors = Vec::with_capacity(header.params.len());
        for (name, r, c) in &header.params {
            names.push(name.clone());
            tensors.push(read(*r, *c)?);
        }
        let optimizer = match header.optimizer {
            Some((config, step)) => {
                let m = header
                    .params
                    .iter()
                    .map(|(_, r, c)| read(*r, *c))
                    .collect::<Result<Vec<_>, _>>()?;
                let v = header
                    .params
                    .iter()
                    .map(|(_, r, c)| read(*r, *c))
                    .collect::<Result<Vec<_>, _>>()?;
                Some(AdamState { m, v, step, config })
            }
            None => None,
        };
        if cursor != body.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        let model = Model {
            config: header.model_config,
            params: ModelParameters { names, tensors },
            calibration: header.calibration,
        };
        Ok(Self {
            model,
            optimizer,
            step: header.step,
            codebook_hash: header.codebook_hash,
            vocab: header.vocab,
            history: header.history,
            train_config: header.train_config,
        })
    }
}

fn parse_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize), TrainError> {
    let bad = |m: &str| TrainError::Checkpoint(m.to_string());
    if bytes.len() < MAGIC.len() + 8 + DIGEST_LEN {
        return Err(bad("file too short"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch (corrupt or truncated file)"));
    }
    if &body[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let hlen = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    let json = body
        .get(16..16 + hlen)
        .ok_or_else(|| bad("header length out of range"))?;
    let header = serde_json::from_slice(json).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    Ok((header, hlen))
}

/// Verified header only, e.g. to learn the stored precision.
pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader, TrainError> {
    let bytes =
        std::fs::read(path).map_err(|e| TrainError::Io(path.display().to_string(), e))?;
    Ok(parse_header(&bytes)?.0)
}

/// Write atomically via a sibling temporary file.
pub fn save_checkpoint<R: Real>(ckpt: &Checkpoint<R>, path: &Path) -> Result<(), TrainError> {
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("tmp");
    let io = |e| TrainError::Io(path.display().to_string(), e);
    std::fs::write(&tmp, bytes).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint<R: Real>(
    path: &Path,
    expected_codebook_hash: Option<&str>,
) -> Result<Checkpoint<R>, TrainError> {
    let bytes =
        std::fs::read(path).map_err(|e| TrainError::Io(path.display().to_string(), e))?;
    Checkpoint::from_bytes(&bytes, expected_codebook_hash)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ckpt() -> Checkpoint<f32> {
        let cfg = ModelConfig {
            hidden_dim: 8,
            n_layers: 1,
            intermediate_size: 16,
            n_heads: 2,
            vocab_size: 50,
            ..ModelConfig::default()
        };
        let model = init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut opt = AdamState::new(&model.params.tensors, AdamConfig::default());
        opt.step = 7;
        opt.m[0].data[3] = 0.125;
        let mut c = Checkpoint::new(model, "abc");
        c.optimizer = Some(opt);
        c.step = 7;
        c
    }

    #[test]
    fn byte_round_trip() {
        let c = ckpt();
        let back = Checkpoint::<f32>::from_bytes(&c.to_bytes().unwrap(), Some("abc")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn codebook_mismatch_rejected() {
        let bytes = ckpt().to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&bytes, Some("other")),
            Err(TrainError::CodebookMismatch { .. })
        ));
    }

    #[test]
    fn truncation_and_bit_flips_detected() {
        let bytes = ckpt().to_bytes().unwrap();
        for cut in [1, 10, bytes.len() / 2] {
            assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - cut], None).is_err());
        }
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 0x10;
        assert!(Checkpoint::<f32>::from_bytes(&flipped, None).is_err());
    }

    #[test]
    fn precision_mismatch_rejected() {
        let bytes = ckpt().to_bytes().unwrap();
        assert!(Checkpoint::<f64>::from_bytes(&bytes, None).is_err());
    }
}
