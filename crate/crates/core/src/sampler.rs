//! Iterative denoising from Gaussian noise to per-position Top-K item lists.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{batch_iterator, Batch, TrajectoryExample};
use crate::denoiser::{embed_examples, score_items, Denoise, LatentBatch};
use crate::error::{Error, Result};
use crate::metrics::{EvalAccumulator, EvalReport};
use crate::params::randn;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleConfig {
    /// Number of denoiser calls, strided over the training schedule.
    pub n_steps: usize,
    /// Length of each position's ranked list.
    pub top_k: usize,
    /// Drop earlier positions' top-1 items from later lists.
    pub exclude_previous: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub items: Vec<u32>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrajectorySample {
    /// `(B, k, M)` scores of the final denoised trajectory latents.
    pub scores: Tensor,
    /// `[example][position]`.
    pub ranked: Vec<Vec<RankedList>>,
}

/// The `top_k` highest-scoring items (ids are column + 1), ties broken by lower id.
pub fn top_k(scores: &[f64], top_k: usize, skip: &[u32]) -> RankedList {
    let mut idx: Vec<usize> = (0..scores.len())
        .filter(|&i| !skip.contains(&(i as u32 + 1)))
        .collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(top_k);
    RankedList {
        items: idx.iter().map(|&i| i as u32 + 1).collect(),
        scores: idx.iter().map(|&i| scores[i]).collect(),
    }
}

/// Denoises the trajectory slots of `batch` starting from standard Gaussian noise.
///
/// History slots hold the clean history embeddings at every step. Each step
/// predicts `x0_hat`, then re-noises its trajectory slots to the next strided step;
/// the final step returns `x0_hat` itself.
pub fn sample_trajectory<M: Denoise + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    batch: &Batch,
    cfg: &SampleConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrajectorySample> {
    let mcfg = model.config();
    if cfg.top_k == 0 || cfg.top_k > mcfg.vocab_size {
        return Err(Error::Config(format!(
            "top-K {} must be in [1, {}]",
            cfg.top_k, mcfg.vocab_size
        )));
    }
    let steps = schedule.inference_timesteps(cfg.n_steps)?;
    let table = model.item_table();
    let (history, _) = embed_examples(batch, table)?;
    let (b, n_max, k, d) = (batch.len(), batch.n_max, batch.k, mcfg.embed_dim);
    let (dtype, device) = (table.dtype(), table.device().clone());

    let mut z = randn(rng, &[b, k, d], dtype, &device)?;
    let mut z_hat = z.clone();
    for (i, &t) in steps.iter().enumerate() {
        let latent = LatentBatch {
            x_t: Tensor::cat(&[&history, &z], 1)?,
            t: vec![t; b],
            history_mask: batch.history_mask.clone(),
            n_max,
        };
        let x0_hat = model.denoise(&latent, &history)?;
        z_hat = x0_hat.narrow(1, n_max, k)?;
        let t_next = steps.get(i + 1).copied().unwrap_or(0);
        z = if t_next == 0 {
            z_hat.clone()
        } else {
            let noise = randn(rng, &[b, k, d], dtype, &device)?;
            schedule.step_to(&z_hat, t_next, &noise)?
        };
    }

    let scores = score_items(&z_hat, table, mcfg.cosine_scoring)?;
    let flat = scores.to_dtype(DType::F64)?.to_vec3::<f64>()?;
    let ranked = flat
        .iter()
        .map(|positions| {
            let mut chosen: Vec<u32> = Vec::new();
            positions
                .iter()
                .map(|row| {
                    let skip = if cfg.exclude_previous { chosen.as_slice() } else { &[] };
                    let list = top_k(row, cfg.top_k, skip);
                    if let Some(&first) = list.items.first() {
                        chosen.push(first);
                    }
                    list
                })
                .collect()
        })
        .collect();
    Ok(TrajectorySample { scores, ranked })
}

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub user_id: String,
    /// 1-based trajectory position.
    pub position: usize,
    pub items: Vec<u32>,
    pub scores: Vec<f64>,
    pub target: u32,
    /// Batch wall-clock divided across its examples.
    pub wall_clock_ms: f64,
}

#[derive(Debug, Clone)]
pub struct EvalSettings {
    pub n_steps: usize,
    pub cutoffs: Vec<usize>,
    pub batch_size: usize,
    pub seed: u64,
    pub exclude_previous: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            n_steps: 1,
            cutoffs: vec![5, 10, 20, 50, 100],
            batch_size: 256,
            seed: 0,
            exclude_previous: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub records: Vec<PredictionRecord>,
    /// Total time spent inside the sampler.
    pub elapsed: Duration,
}

/// Samples every example, accumulates metrics over full-vocabulary scores and
/// keeps one record per (example, position).
pub fn evaluate<M: Denoise + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    examples: &[TrajectoryExample],
    settings: &EvalSettings,
) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(Error::Argument("nothing to evaluate".into()));
    }
    let k = examples[0].target.len();
    let mut acc = EvalAccumulator::new(&settings.cutoffs, k)?;
    let cfg = SampleConfig {
        n_steps: settings.n_steps,
        top_k: acc.max_cutoff().min(model.config().vocab_size),
        exclude_previous: settings.exclude_previous,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut records = Vec::with_capacity(examples.len() * k);
    let mut elapsed = Duration::ZERO;
    for batch in batch_iterator(examples, settings.batch_size, false, 0)? {
        let start = Instant::now();
        let sample = sample_trajectory(model, schedule, &batch, &cfg, &mut rng)?;
        let spent = start.elapsed();
        elapsed += spent;
        let per_example_ms = spent.as_secs_f64() * 1e3 / batch.len() as f64;

        let scores = sample.scores.to_dtype(DType::F64)?.to_vec3::<f64>()?;
        for (row, lists) in sample.ranked.into_iter().enumerate() {
            let targets = &batch.target[row * k..(row + 1) * k];
            let items: Vec<&[u32]> = lists.iter().map(|l| l.items.as_slice()).collect();
            acc.add(targets, &items)?;
            for (j, &t) in targets.iter().enumerate() {
                acc.add_likelihood(&scores[row][j], t as usize - 1)?;
            }
            for (j, list) in lists.into_iter().enumerate() {
                records.push(PredictionRecord {
                    user_id: batch.users[row].clone(),
                    position: j + 1,
                    items: list.items,
                    scores: list.scores,
                    target: targets[j],
                    wall_clock_ms: per_example_ms,
                });
            }
        }
    }
    Ok(Evaluation {
        report: acc.finish()?,
        records,
        elapsed,
    })
}

/// Top-K predictions for a split; returns the records and total sampler time.
pub fn batch_predict<M: Denoise + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    examples: &[TrajectoryExample],
    n_steps: usize,
    top_k: usize,
    seed: u64,
) -> Result<(Vec<PredictionRecord>, Duration)> {
    let settings = EvalSettings {
        n_steps,
        cutoffs: vec![top_k],
        seed,
        ..EvalSettings::default()
    };
    let ev = evaluate(model, schedule, examples, &settings)?;
    Ok((ev.records, ev.elapsed))
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io("writing predictions", e))?;
    }
    w.flush().map_err(|e| Error::io("writing predictions", e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_orders_and_breaks_ties() {
        let l = top_k(&[0.5, 2.0, 0.5, -1.0], 3, &[]);
        assert_eq!(l.items, vec![2, 1, 3]);
        assert_eq!(l.scores, vec![2.0, 0.5, 0.5]);
        let l = top_k(&[0.5, 2.0, 0.5, -1.0], 2, &[2]);
        assert_eq!(l.items, vec![1, 3]);
    }
}
