//! Checkpoint container.
//!
//! Layout: one line of compact JSON (the manifest) terminated by `\n`,
//! followed by every tensor as little-endian `f32`, in manifest order. Tensor
//! offsets are byte offsets into the payload that follows the manifest line.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::optim::AdamState;

pub const CHECKPOINT_FORMAT: &str = "declutr-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

const MOMENT_M: &str = "adam.m/";
const MOMENT_V: &str = "adam.v/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerMeta {
    step: u64,
    total_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: EncoderConfig,
    vocab_fingerprint: String,
    step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    optimizer: Option<OptimizerMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    run: Option<serde_json::Value>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub vocab_fingerprint: String,
    /// Optimizer steps completed when the checkpoint was written.
    pub step: u64,
    /// Present when the checkpoint can resume training.
    pub optimizer: Option<AdamState>,
    /// Opaque trainer bookkeeping.
    pub run: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn inference(params: EncoderParams, vocab_fingerprint: impl Into<String>, step: u64) -> Self {
        Self {
            params,
            vocab_fingerprint: vocab_fingerprint.into(),
            step,
            optimizer: None,
            run: None,
        }
    }

    pub fn check_vocab(&self, fingerprint: &str) -> Result<()> {
        if self.vocab_fingerprint != fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: fingerprint.to_string(),
                found: self.vocab_fingerprint.clone(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut sources: Vec<(String, &EncoderParams)> = vec![(String::new(), &self.params)];
        if let Some(opt) = &self.optimizer {
            sources.push((MOMENT_M.to_string(), &opt.m));
            sources.push((MOMENT_V.to_string(), &opt.v));
        }
        let mut entries = Vec::new();
        let mut payload = Vec::new();
        for (prefix, params) in &sources {
            for t in params.tensors() {
                entries.push(TensorEntry {
                    name: format!("{prefix}{}", t.name),
                    shape: t.value.shape().to_vec(),
                    offset: payload.len(),
                });
                for &x in t.value.iter() {
                    payload.extend_from_slice(&(x as f32).to_le_bytes());
                }
            }
        }
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.params.config.clone(),
            vocab_fingerprint: self.vocab_fingerprint.clone(),
            step: self.step,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerMeta {
                step: o.step,
                total_steps: o.total_steps,
            }),
            run: self.run.clone(),
            tensors: entries,
        };
        let mut out = serde_json::to_vec(&manifest).expect("manifest serializes");
        out.push(b'\n');
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| fail("missing manifest terminator (truncated file?)".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[..newline])
            .map_err(|e| fail(format!("unreadable manifest: {e}")))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(fail(format!("unknown format {:?}", manifest.format)));
        }
        if manifest.version != CHECKPOINT_VERSION {
            return Err(fail(format!(
                "version mismatch: file has {}, reader supports {}",
                manifest.version, CHECKPOINT_VERSION
            )));
        }
        manifest.config.validate()?;
        let payload = &bytes[newline + 1..];

        let mut params = EncoderParams::zeros(&manifest.config);
        let mut optimizer = manifest.optimizer.as_ref().map(|meta| AdamState {
            m: EncoderParams::zeros(&manifest.config),
            v: EncoderParams::zeros(&manifest.config),
            step: meta.step,
            total_steps: meta.total_steps,
        });

        let mut expected: Vec<(String, Vec<usize>)> = params
            .tensors()
            .into_iter()
            .map(|t| (t.name, t.value.shape().to_vec()))
            .collect();
        if optimizer.is_some() {
            let base = expected.clone();
            for prefix in [MOMENT_M, MOMENT_V] {
                expected.extend(base.iter().map(|(n, s)| (format!("{prefix}{n}"), s.clone())));
            }
        }
        if manifest.tensors.len() != expected.len() {
            return Err(fail(format!(
                "manifest lists {} tensors, configuration implies {}",
                manifest.tensors.len(),
                expected.len()
            )));
        }
        let mut offset = 0usize;
        for (entry, (name, shape)) in manifest.tensors.iter().zip(&expected) {
            if &entry.name != name {
                return Err(fail(format!("expected tensor {name}, found {}", entry.name)));
            }
            if &entry.shape != shape {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: entry.shape.clone(),
                });
            }
            if entry.offset != offset {
                return Err(fail(format!("tensor {name} at offset {}, expected {offset}", entry.offset)));
            }
            offset += 4 * shape.iter().product::<usize>();
        }
        if payload.len() != offset {
            return Err(fail(format!(
                "payload holds {} bytes, manifest describes {offset} (truncated file?)",
                payload.len()
            )));
        }

        let mut cursor = 0usize;
        let mut targets: Vec<&mut EncoderParams> = vec![&mut params];
        if let Some(opt) = optimizer.as_mut() {
            targets.push(&mut opt.m);
            targets.push(&mut opt.v);
        }
        for target in targets {
            for mut t in target.tensors_mut() {
                for x in t.value.iter_mut() {
                    let raw: [u8; 4] = payload[cursor..cursor + 4].try_into().expect("4 bytes");
                    *x = f32::from_le_bytes(raw) as f64;
                    cursor += 4;
                }
            }
        }
        if let Some(name) = params.first_non_finite() {
            return Err(Error::NonFinite(format!("checkpoint tensor {name}")));
        }
        Ok(Self {
            params,
            vocab_fingerprint: manifest.vocab_fingerprint,
            step: manifest.step,
            optimizer,
            run: manifest.run,
        })
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, checkpoint.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> EncoderParams {
        let cfg = EncoderConfig {
            d_model: 8,
            layers: 1,
            heads: 2,
            d_ff: 8,
            max_positions: 4,
            vocab_size: 9,
            dropout: 0.0,
        };
        EncoderParams::init(&cfg, 3).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let mut ckpt = Checkpoint::inference(params(), "abc", 17);
        ckpt.optimizer = Some(AdamState::new(&ckpt.params, 40));
        ckpt.run = Some(serde_json::json!({"epoch": 1}));
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.step, 17);
        assert_eq!(loaded.optimizer.as_ref().unwrap().total_steps, 40);
        let first = fs::read(&path).unwrap();
        assert_eq!(loaded.to_bytes(), first);
        // f32-representable parameters survive exactly
        let mut rounded = ckpt.params.clone();
        rounded.round_to_f32();
        assert_eq!(loaded.params, rounded);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let ckpt = Checkpoint::inference(params(), "abc", 0);
        let bytes = ckpt.to_bytes();
        let p = Path::new("x");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], p).is_err());

        let text = String::from_utf8_lossy(&bytes[..bytes.iter().position(|&b| b == b'\n').unwrap()]).to_string();
        let bumped = text.replace("\"version\":1", "\"version\":2");
        let mut v2 = bumped.into_bytes();
        v2.extend_from_slice(&bytes[text.len()..]);
        match Checkpoint::from_bytes(&v2, p) {
            Err(Error::Checkpoint { reason, .. }) => assert!(reason.contains("version")),
            other => panic!("{other:?}"),
        }

        let reshaped = text.replace("\"vocab_size\":9", "\"vocab_size\":10");
        let mut bad = reshaped.into_bytes();
        bad.extend_from_slice(&bytes[text.len()..]);
        assert!(matches!(Checkpoint::from_bytes(&bad, p), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn vocab_guard() {
        let ckpt = Checkpoint::inference(params(), "abc", 0);
        assert!(ckpt.check_vocab("abc").is_ok());
        assert!(matches!(ckpt.check_vocab("def"), Err(Error::FingerprintMismatch { .. })));
    }
}
