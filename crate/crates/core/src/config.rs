//! Run configuration: a TOML file of sections, dotted-key overrides, sweep
//! expansion and a stable content hash that names run directories.
//!
//! ```toml
//! [dataset]
//! path = "ml-1m/ratings.dat"
//! format = "ml1m"
//!
//! [traj]
//! k = 5
//!
//! [loss]
//! gamma = 0.3
//!
//! [sweep]
//! "loss.gamma" = [0.0, 0.3, 0.8]
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Value;

use crate::dataset::{Format, LoadOptions};
use crate::denoiser::{DenoiserConfig, MaskMode, Precision};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::sampler::EvalSettings;
use crate::schedule::ScheduleConfig;
use crate::trainer::{Ablation, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RawFormat {
    Tsv,
    Csv,
    /// `UserID::MovieID::Rating::Timestamp`, items rated fewer than 5 times dropped.
    Ml1m,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub path: Option<PathBuf>,
    pub format: RawFormat,
    /// Overrides the format's separator.
    pub delimiter: Option<String>,
    pub user_col: Option<usize>,
    pub item_col: Option<usize>,
    pub time_col: Option<usize>,
    /// Ignore timestamps and treat file order as chronological.
    pub file_order: bool,
    pub has_header: bool,
    pub min_item_count: Option<usize>,
    /// Prepared-data directory; relative paths resolve against the run root.
    pub prepared: PathBuf,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            path: None,
            format: RawFormat::Tsv,
            delimiter: None,
            user_col: None,
            item_col: None,
            time_col: None,
            file_order: false,
            has_header: false,
            min_item_count: None,
            prepared: PathBuf::from("prepared"),
        }
    }
}

impl DatasetSection {
    pub fn load_options(&self) -> LoadOptions {
        let mut o = match self.format {
            RawFormat::Tsv => LoadOptions::new(Format::Tsv),
            RawFormat::Csv => LoadOptions::new(Format::Csv),
            RawFormat::Ml1m => LoadOptions {
                delimiter: "::".into(),
                time_col: Some(3),
                min_item_count: 5,
                ..LoadOptions::new(Format::Tsv)
            },
        };
        if let Some(d) = &self.delimiter {
            o.delimiter = d.clone();
        }
        o.user_col = self.user_col.unwrap_or(o.user_col);
        o.item_col = self.item_col.unwrap_or(o.item_col);
        if self.time_col.is_some() {
            o.time_col = self.time_col;
        }
        if self.file_order {
            o.time_col = None;
        }
        o.has_header = self.has_header;
        o.min_item_count = self.min_item_count.unwrap_or(o.min_item_count);
        o
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajSection {
    pub k: usize,
    pub n_max: usize,
}

impl Default for TrajSection {
    fn default() -> Self {
        TrajSection { k: 5, n_max: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d: usize,
    pub blocks: usize,
    pub heads: usize,
    pub dropout: f64,
    pub mask: MaskMode,
    pub cosine: bool,
    pub init_std: f64,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = DenoiserConfig::default();
        ModelSection {
            d: d.embed_dim,
            blocks: d.n_blocks,
            heads: d.n_heads,
            dropout: d.dropout,
            mask: d.mask_mode,
            cosine: d.cosine_scoring,
            init_std: d.init_std,
            precision: d.precision,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub lambda: f64,
    pub gamma: f64,
    pub reg_weight: f64,
    pub no_listpref: bool,
    pub no_simple: bool,
    pub no_reg: bool,
    pub trajectory_only: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        LossSection {
            lambda: w.lambda,
            gamma: w.gamma,
            reg_weight: w.reg_weight,
            no_listpref: false,
            no_simple: false,
            no_reg: false,
            trajectory_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_steps: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lr: t.learning_rate,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            seed: t.seed,
            eval_every: t.eval_every,
            eval_steps: t.eval_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferSection {
    /// One report row per entry.
    pub steps: Vec<usize>,
    pub exclude_previous: bool,
    pub seed: u64,
}

impl Default for InferSection {
    fn default() -> Self {
        InferSection { steps: vec![1], exclude_previous: false, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub topk: Vec<usize>,
    pub batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalSettings::default();
        EvalSection { topk: e.cutoffs, batch_size: e.batch_size }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub traj: TrajSection,
    pub model: ModelSection,
    pub diffusion: ScheduleConfig,
    pub loss: LossSection,
    pub train: TrainSection,
    pub infer: InferSection,
    pub eval: EvalSection,
    /// Dotted key to the list of values it takes; the sweep is the cartesian product.
    pub sweep: BTreeMap<String, Vec<Value>>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        Self::from_table(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml_str(&text)
    }

    /// Reads `path` if given, then applies `key=value` overrides in order.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p.display().to_string(), e))?;
                text.parse().map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_dotted(&mut table, key.trim(), parse_value(value.trim()))?;
        }
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.denoiser_config(1).validate()?;
        self.train_config().validate()?;
        self.diffusion.build()?;
        if self.infer.steps.is_empty() || self.infer.steps.iter().any(|&s| s == 0 || s > self.diffusion.steps) {
            return Err(Error::Config(format!(
                "infer.steps {:?} must be non-empty and within 1..={}",
                self.infer.steps, self.diffusion.steps
            )));
        }
        if self.eval.topk.is_empty() || self.eval.topk.contains(&0) || self.eval.batch_size == 0 {
            return Err(Error::Config("eval.topk and eval.batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn denoiser_config(&self, vocab_size: usize) -> DenoiserConfig {
        let m = &self.model;
        DenoiserConfig {
            embed_dim: m.d,
            n_blocks: m.blocks,
            n_heads: m.heads,
            dropout: m.dropout,
            mask_mode: m.mask,
            n_max: self.traj.n_max,
            k: self.traj.k,
            vocab_size,
            cosine_scoring: m.cosine,
            init_std: m.init_std,
            precision: m.precision,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let (l, t) = (&self.loss, &self.train);
        TrainConfig {
            learning_rate: t.lr,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            seed: t.seed,
            weights: LossWeights { lambda: l.lambda, gamma: l.gamma, reg_weight: l.reg_weight },
            ablation: Ablation { no_listpref: l.no_listpref, no_simple: l.no_simple, no_reg: l.no_reg },
            eval_every: t.eval_every,
            eval_steps: t.eval_steps,
            eval_cutoff: 5,
            trajectory_only: l.trajectory_only,
        }
    }

    pub fn eval_settings(&self, n_steps: usize) -> EvalSettings {
        EvalSettings {
            n_steps,
            cutoffs: self.eval.topk.clone(),
            batch_size: self.eval.batch_size,
            seed: self.infer.seed,
            exclude_previous: self.infer.exclude_previous,
        }
    }

    /// Hex sha256 over every setting that influences training. Sweep lists and
    /// inference/evaluation settings are excluded.
    pub fn hash(&self) -> Result<String> {
        let key = serde_json::json!({
            "dataset": self.dataset,
            "traj": self.traj,
            "model": self.model,
            "diffusion": self.diffusion,
            "loss": self.loss,
            "train": self.train,
        });
        let digest = Sha256::digest(serde_json::to_vec(&key)?);
        Ok(hex::encode(&digest[..8]))
    }

    /// One config per point of the sweep grid, in row-major key order; the
    /// config itself when no sweep is declared.
    pub fn expand_sweep(&self) -> Result<Vec<RunConfig>> {
        let mut base = Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        if let Value::Table(t) = &mut base {
            t.remove("sweep");
        }
        let mut points: Vec<Value> = vec![base];
        for (key, values) in &self.sweep {
            if values.is_empty() {
                return Err(Error::Config(format!("sweep key {key} has no values")));
            }
            let mut next = Vec::with_capacity(points.len() * values.len());
            for p in &points {
                for v in values {
                    let mut q = p.clone();
                    match &mut q {
                        Value::Table(t) => set_dotted(t, key, v.clone())?,
                        _ => unreachable!("config serializes to a table"),
                    }
                    next.push(q);
                }
            }
            points = next;
        }
        points
            .into_iter()
            .map(|p| match p {
                Value::Table(t) => Self::from_table(t),
                _ => unreachable!("config serializes to a table"),
            })
            .collect()
    }
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty key {key:?}")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {p} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_toml_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[loss]\ngamma = 0.8\n[traj]\nk = 3\n").unwrap();
        let cfg = RunConfig::resolve(Some(&path), &["loss.gamma=0.0".into(), "model.mask=prefix".into()]).unwrap();
        assert_eq!(cfg.loss.gamma, 0.0);
        assert_eq!(cfg.traj.k, 3);
        assert_eq!(cfg.model.mask, MaskMode::Prefix);
    }

    #[test]
    fn unknown_and_invalid_keys_rejected() {
        assert!(RunConfig::from_toml_str("[loss]\ngama = 0.1\n").is_err());
        assert!(RunConfig::from_toml_str("[loss]\ngamma = 1.5\n").is_err());
        assert!(RunConfig::resolve(None, &["infer.steps=[0]".into()]).is_err());
        assert!(RunConfig::resolve(None, &["nonsense".into()]).is_err());
    }

    #[test]
    fn hash_tracks_training_settings_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.eval.topk = vec![1];
        b.infer.steps = vec![1, 5];
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.loss.gamma = 0.8;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn sweep_is_cartesian() {
        let cfg = RunConfig::from_toml_str(
            "[sweep]\n\"loss.gamma\" = [0.0, 0.3, 0.8]\n\"train.seed\" = [1, 2]\n",
        )
        .unwrap();
        let runs = cfg.expand_sweep().unwrap();
        assert_eq!(runs.len(), 6);
        let hashes: std::collections::BTreeSet<_> = runs.iter().map(|r| r.hash().unwrap()).collect();
        assert_eq!(hashes.len(), 6);
        assert!(runs.iter().all(|r| r.sweep.is_empty()));
        assert_eq!(RunConfig::default().expand_sweep().unwrap().len(), 1);
    }

    #[test]
    fn ml1m_preset() {
        let cfg = RunConfig::resolve(None, &["dataset.format=\"ml1m\"".into()]).unwrap();
        let o = cfg.dataset.load_options();
        assert_eq!((o.delimiter.as_str(), o.time_col, o.min_item_count), ("::", Some(3), 5));
    }
}
