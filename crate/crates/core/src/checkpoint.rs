//! Versioned parameter files: a safetensors blob whose header metadata carries
//! the model config and the hash of the vocabulary it was trained on.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::SafeTensors;

use crate::denoiser::{Denoise, DenoiserConfig, PreferenceTransformer};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: DenoiserConfig,
    pub vocab_hash: String,
    /// Last completed epoch (0-based).
    pub epoch: usize,
    /// Validation metric the checkpoint was selected on, if any.
    pub metric: Option<f64>,
    pub params: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn capture(
        model: &PreferenceTransformer,
        vocab_hash: &str,
        epoch: usize,
        metric: Option<f64>,
    ) -> Result<Self> {
        Ok(Checkpoint {
            config: model.config().clone(),
            vocab_hash: vocab_hash.to_string(),
            epoch,
            metric,
            params: model.params().snapshot()?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = HashMap::new();
        meta.insert("format_version".to_string(), FORMAT_VERSION.to_string());
        meta.insert("config".to_string(), serde_json::to_string(&self.config)?);
        meta.insert("vocab_hash".to_string(), self.vocab_hash.clone());
        meta.insert("epoch".to_string(), self.epoch.to_string());
        meta.insert("metric".to_string(), serde_json::to_string(&self.metric)?);
        let tmp = path.with_extension("tmp");
        safetensors::serialize_to_file(self.params.iter(), Some(meta), &tmp)
            .map_err(|e| Error::Argument(format!("serializing checkpoint: {e}")))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let bad = |msg: String| Error::Parse { line: 0, msg: format!("{}: {msg}", path.display()) };
        let (_, header) = SafeTensors::read_metadata(&buf).map_err(|e| bad(e.to_string()))?;
        let meta = header
            .metadata()
            .clone()
            .ok_or_else(|| bad("missing checkpoint metadata".into()))?;
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| bad(format!("missing {k}")));
        let version: u32 = field("format_version")?.parse().map_err(|_| bad("bad version".into()))?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let params = candle_core::safetensors::load_buffer(&buf, &Device::Cpu)?
            .into_iter()
            .collect();
        Ok(Checkpoint {
            config: serde_json::from_str(&field("config")?)?,
            vocab_hash: field("vocab_hash")?,
            epoch: field("epoch")?.parse().map_err(|_| bad("bad epoch".into()))?,
            metric: serde_json::from_str(&field("metric")?)?,
            params,
        })
    }

    /// Rebuilds the model; refuses when `expected_vocab_hash` differs from the
    /// checkpoint's.
    pub fn to_model(&self, expected_vocab_hash: Option<&str>) -> Result<PreferenceTransformer> {
        if let Some(found) = expected_vocab_hash {
            if found != self.vocab_hash {
                return Err(Error::VocabMismatch {
                    expected: self.vocab_hash.clone(),
                    found: found.to_string(),
                });
            }
        }
        let model = PreferenceTransformer::new(self.config.clone(), 0)?;
        model.params().restore(&self.params)?;
        Ok(model)
    }
}
