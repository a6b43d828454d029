//! Binary checkpoint format.
//!
//! ```text
//! "SSAE"                      4 bytes
//! format version              u32 LE
//! metadata length             u32 LE
//! metadata                    UTF-8 JSON
//! parameters                  f64 LE, in the order embedding, compose weight,
//!                             compose bias, decompose weight, decompose bias,
//!                             [dembedding if untied]
//! optimizer state (optional)  first moments, second moments (same layout as
//!                             the parameters), then the step count as one f64
//! ```
//!
//! The file length must match the metadata exactly; truncated files and
//! trailing bytes are both rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, ParamTensor};
use crate::trainer::AdamState;

pub const MAGIC: &[u8; 4] = b"SSAE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    #[serde(flatten)]
    pub config: ModelConfig,
    pub vocab_fingerprint: String,
    pub seed: u64,
    /// Completed epochs when the checkpoint was written.
    #[serde(default)]
    pub epoch: usize,
    /// `[beta1, beta2, eps]` when optimizer state follows the parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ModelParams,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        &self.meta.config
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = self.meta.clone();
        meta.adam = self.optimizer.as_ref().map(|s| [s.beta1, s.beta2, s.eps]);
        self.params
            .check_shapes(&meta.config)
            .map_err(|e| Error::Checkpoint(format!("parameters do not match metadata: {e}")))?;
        let json = serde_json::to_vec(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let json_len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("metadata too large".into()))?;
        let mut out = Vec::with_capacity(12 + json.len() + 8 * self.params.total_len() * 3);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&json_len.to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |p: &ModelParams| {
            for (_, t) in p.tensors() {
                for x in t {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        };
        put(&self.params);
        if let Some(state) = &self.optimizer {
            put(&state.m);
            put(&state.v);
            out.extend_from_slice(&(state.t as f64).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (bad magic bytes)"));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let json_len = word(8) as usize;
        let json = bytes.get(12..12 + json_len).ok_or_else(|| bad("truncated metadata"))?;
        let meta: CheckpointMeta =
            serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        meta.config
            .validate()
            .map_err(|e| Error::Checkpoint(format!("inconsistent header: {e}")))?;

        let mut params = ModelParams::zeros(&meta.config)?;
        let n = params.total_len();
        let floats = match meta.adam {
            Some(_) => 3 * n + 1,
            None => n,
        };
        let payload = &bytes[12 + json_len..];
        if payload.len() != 8 * floats {
            return Err(Error::Checkpoint(format!(
                "payload is {} bytes, header implies {}",
                payload.len(),
                8 * floats
            )));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut fill = |p: &mut ModelParams| {
            for which in ParamTensor::ALL {
                if let Some(t) = p.tensor_mut(which) {
                    t.iter_mut().for_each(|x| *x = values.next().expect("length checked"));
                }
            }
        };
        fill(&mut params);
        let optimizer = match meta.adam {
            Some([beta1, beta2, eps]) => {
                let mut state = AdamState::with_betas(&params, beta1, beta2, eps);
                fill(&mut state.m);
                fill(&mut state.v);
                let t = values.next().expect("length checked");
                if !(t >= 0.0 && t.fract() == 0.0) {
                    return Err(Error::Checkpoint(format!("invalid optimizer step count {t}")));
                }
                state.t = t as u64;
                Some(state)
            }
            None => None,
        };
        Ok(Checkpoint {
            meta,
            params,
            optimizer,
        })
    }
}

/// Writes a checkpoint through a temporary file so readers never see a partial one.
pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = checkpoint.to_bytes()?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
