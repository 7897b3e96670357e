//! Versioned checkpoint container: magic, version, JSON header, then the
//! little-endian `f32` payload guarded by a SHA-256 digest.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{ParamStore, Tensor};
use crate::tokenizer::Vocabulary;
use crate::training::OptimizerState;

pub const MAGIC: &[u8; 8] = b"SWTKCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    DedicatedDisf,
    DedicatedPunc,
    Joint,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::DedicatedDisf => "dedicated-disf",
            ModelKind::DedicatedPunc => "dedicated-punc",
            ModelKind::Joint => "joint",
        }
    }

    pub fn uses_switches(self) -> bool {
        self == ModelKind::Joint
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub experiment: Option<ExperimentConfig>,
    pub vocab: Vocabulary,
    pub model: Model<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: ModelKind,
    experiment: Option<ExperimentConfig>,
    model: ModelConfig,
    vocab: Vocabulary,
    tensors: Vec<TensorMeta>,
    optimizer_step: Option<u64>,
    payload_len: usize,
    payload_sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::with_capacity(self.model.num_params() * 4);
        let mut push = |xs: &[f32]| xs.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes()));
        for t in &self.model.params.tensors {
            push(&t.data);
        }
        if let Some(o) = &self.optimizer {
            for (m, v) in o.m.iter().zip(&o.v) {
                push(m);
                push(v);
            }
        }
        let header = Header {
            kind: self.kind,
            experiment: self.experiment.clone(),
            model: self.model.config.clone(),
            vocab: self.vocab.clone(),
            tensors: self
                .model
                .params
                .tensors
                .iter()
                .map(|t| TensorMeta {
                    name: t.name.clone(),
                    rows: t.rows,
                    cols: t.cols,
                })
                .collect(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.t),
            payload_len: payload.len(),
            payload_sha256: hex(&Sha256::digest(&payload)),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Integrity(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if hlen > body.len() {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(&format!("header: {e}")))?;
        let payload = &body[hlen..];
        if payload.len() != header.payload_len {
            return Err(bad(&format!("payload is {} bytes, header says {}", payload.len(), header.payload_len)));
        }
        if hex(&Sha256::digest(payload)) != header.payload_sha256 {
            return Err(bad("payload digest mismatch"));
        }
        if header.model.vocab_size != header.vocab.size() {
            return Err(Error::Shape(format!(
                "model vocab_size {} but vocabulary has {} entries",
                header.model.vocab_size,
                header.vocab.size()
            )));
        }
        let mut floats = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        let mut take = |n: usize| -> Result<Vec<f32>> {
            let v: Vec<f32> = floats.by_ref().take(n).collect();
            if v.len() == n {
                Ok(v)
            } else {
                Err(bad("payload shorter than the tensor table"))
            }
        };
        let mut params = ParamStore::new();
        for m in &header.tensors {
            params.tensors.push(Tensor {
                name: m.name.clone(),
                rows: m.rows,
                cols: m.cols,
                data: take(m.rows * m.cols)?,
            });
        }
        let optimizer = match header.optimizer_step {
            Some(t) => {
                let mut st = OptimizerState::new(&params);
                for i in 0..params.len() {
                    st.m[i] = take(params.tensors[i].len())?;
                    st.v[i] = take(params.tensors[i].len())?;
                }
                st.t = t;
                Some(st)
            }
            None => None,
        };
        if floats.next().is_some() {
            return Err(bad("trailing payload bytes"));
        }
        let model = Model::from_params(&header.model, params)?;
        Ok(Self {
            kind: header.kind,
            experiment: header.experiment,
            vocab: header.vocab,
            model,
            optimizer,
        })
    }
}

/// Writes atomically via a temporary sibling file.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, ck.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Loads a checkpoint and checks it was built for `vocab`.
pub fn load_checkpoint_for(path: &Path, vocab: &Vocabulary) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if ck.vocab.size() != vocab.size() {
        return Err(Error::Shape(format!(
            "checkpoint vocabulary has {} entries, expected {}",
            ck.vocab.size(),
            vocab.size()
        )));
    }
    if ck.vocab != *vocab {
        return Err(Error::Shape("checkpoint vocabulary differs from the expected one".into()));
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoding::{beam_search, DecodeConfig};
    use crate::model::SwitchSetting;

    fn sample(opt: bool) -> Checkpoint {
        let vocab = Vocabulary::from_chars("abc ".chars());
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ffn_dim: 16,
            max_len: 20,
            vocab_size: vocab.size(),
            ..ModelConfig::desk()
        };
        let model = Model::init(&cfg, 3).unwrap();
        let optimizer = opt.then(|| {
            let mut o = OptimizerState::new(&model.params);
            o.t = 7;
            o.m[0][0] = 0.5;
            o
        });
        Checkpoint {
            kind: ModelKind::Joint,
            experiment: None,
            vocab,
            model,
            optimizer,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample(true);
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.model, ck.model);
        assert_eq!(back.optimizer, ck.optimizer);
        let dc = DecodeConfig {
            max_len: 10,
            switch: Some(SwitchSetting::JOINT),
            ..DecodeConfig::default()
        };
        for i in 0..10u32 {
            let src = [8 + i % 4, 9, 8 + (i * 7) % 4];
            assert_eq!(beam_search(&ck.model, &src, &dc).unwrap(), beam_search(&back.model, &src, &dc).unwrap());
        }
        assert!(load_checkpoint_for(&path, &ck.vocab).is_ok());
        assert!(matches!(
            load_checkpoint_for(&path, &Vocabulary::from_chars("ab".chars())),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn corruption_and_version_are_detected() {
        let bytes = sample(false).to_bytes();
        let mut flipped = bytes.clone();
        let last = flipped.len() - 3;
        flipped[last] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Integrity(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]), Err(Error::Integrity(_))));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(Error::Version { found: 2, expected: 1 })));
        assert!(matches!(Checkpoint::from_bytes(b"nonsense"), Err(Error::Integrity(_))));
    }

    #[test]
    fn vocabulary_size_mismatch_is_a_shape_error() {
        let mut ck = sample(false);
        ck.vocab = Vocabulary::from_chars("abcd ".chars());
        assert!(matches!(Checkpoint::from_bytes(&ck.to_bytes()), Err(Error::Shape(_))));
    }
}
