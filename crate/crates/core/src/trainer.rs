//! Training loop: per-example step and noise sampling, the composite loss,
//! Adam updates of network and embedding parameters, and validation-driven
//! early stopping.

use std::path::PathBuf;

use candle_core::Tensor;
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{batch_iterator, Batch, Splits};
use crate::denoiser::{embed_examples, score_items, Denoise, LatentBatch, PreferenceTransformer};
use crate::error::{Error, Result};
use crate::losses::{list_pref_loss, reg_loss, scalar, simple_loss, LossWeights, RankingScores};
use crate::params::randn;
use crate::sampler::{evaluate, EvalSettings};
use crate::schedule::NoiseSchedule;

/// Loss terms switched off for ablations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub no_listpref: bool,
    pub no_simple: bool,
    pub no_reg: bool,
}

impl Ablation {
    /// Row label used for ablation tables.
    pub fn label(&self) -> &'static str {
        match (self.no_listpref, self.no_simple, self.no_reg) {
            (false, false, false) => "LPDO",
            (true, false, false) => "w/o-L_ListPref",
            (false, true, false) => "w/o-L_Simple",
            (false, false, true) => "w/o-L_Reg",
            _ => "custom",
        }
    }
}

/// Adam moment settings; fixed, recorded in run manifests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

pub const ADAM: AdamSettings = AdamSettings {
    beta1: 0.9,
    beta2: 0.999,
    eps: 1e-8,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub ablation: Ablation,
    pub eval_every: usize,
    /// Denoising steps used for validation sampling.
    pub eval_steps: usize,
    /// Validation is scored by SeqNDCG at this cutoff.
    pub eval_cutoff: usize,
    /// Reconstruct only the trajectory slots instead of the full concatenation.
    pub trajectory_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 256,
            max_epochs: 1000,
            patience: 5,
            seed: 0,
            weights: LossWeights::default(),
            ablation: Ablation::default(),
            eval_every: 1,
            eval_steps: 1,
            eval_cutoff: 5,
            trajectory_only: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.patience < 1 || self.batch_size < 1 || self.eval_every < 1 || self.eval_cutoff < 1 {
            return Err(Error::Config(
                "patience, batch_size, eval_every and eval_cutoff must be at least 1".into(),
            ));
        }
        self.weights.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub simple: f64,
    pub list_pref: f64,
    pub reg: f64,
    pub total: f64,
}

/// Graph-attached loss tensors of one forward pass.
pub struct LossTensors {
    pub simple: Tensor,
    pub list_pref: Tensor,
    pub reg: Tensor,
    pub total: Tensor,
    /// `(B, k, M)` item scores of the predicted trajectory.
    pub scores: Tensor,
}

impl LossTensors {
    pub fn values(&self) -> Result<LossComponents> {
        Ok(LossComponents {
            simple: scalar(&self.simple)?,
            list_pref: scalar(&self.list_pref)?,
            reg: scalar(&self.reg)?,
            total: scalar(&self.total)?,
        })
    }
}

/// Forward pass and composite loss for one batch. Draws one step and one noise
/// tensor per example, plus dropout masks, from `rng`.
pub fn compute_losses(
    model: &PreferenceTransformer,
    schedule: &NoiseSchedule,
    batch: &Batch,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossTensors> {
    let mcfg = model.config();
    let table = model.item_table();
    let (history, target) = embed_examples(batch, table)?;
    let x0 = Tensor::cat(&[&history, &target], 1)?;
    let (b, len, d) = x0.dims3()?;

    let ts: Vec<usize> = (0..b).map(|_| rng.random_range(1..=schedule.steps())).collect();
    let noise = randn(rng, &[b, len, d], x0.dtype(), x0.device())?;
    let x_t = schedule.q_sample_batch(&x0, &ts, &noise)?;
    let latent = LatentBatch {
        x_t,
        t: ts,
        history_mask: batch.history_mask.clone(),
        n_max: batch.n_max,
    };
    let x0_hat = model.denoise_train(&latent, &history, rng)?;

    let mut mask = Vec::with_capacity(b * len);
    for row in batch.history_mask.chunks(batch.n_max) {
        mask.extend(row.iter().map(|&m| m && !cfg.trajectory_only));
        mask.extend(std::iter::repeat_n(true, batch.k));
    }
    let simple = simple_loss(&x0_hat, &x0, &mask)?;
    let reg = reg_loss(&x0_hat, Some(&mask))?;
    let trajectory = x0_hat.narrow(1, batch.n_max, batch.k)?;
    let scores = score_items(&trajectory, table, mcfg.cosine_scoring)?;
    let ranking = RankingScores::new(scores.clone(), batch.target.clone())?;
    let list_pref = list_pref_loss(&ranking, cfg.weights.gamma)?;

    let total = total_loss(cfg, &simple, &list_pref, &reg)?;
    Ok(LossTensors {
        simple,
        list_pref,
        reg,
        total,
        scores,
    })
}

/// Weighted sum of the components the ablation keeps; ablated terms are not in the graph.
pub fn total_loss(cfg: &TrainConfig, simple: &Tensor, list_pref: &Tensor, reg: &Tensor) -> Result<Tensor> {
    let ab = &cfg.ablation;
    cfg.weights.combine(
        (!ab.no_simple).then_some(simple),
        (!ab.no_listpref).then_some(list_pref),
        (!ab.no_reg).then_some(reg),
    )
}

/// Adam over every model parameter with the fixed [`ADAM`] moments and no weight decay.
pub fn adam(model: &PreferenceTransformer, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        model.params().vars(),
        ParamsAdamW {
            lr,
            beta1: ADAM.beta1,
            beta2: ADAM.beta2,
            eps: ADAM.eps,
            weight_decay: 0.0,
        },
    )?)
}

/// One optimizer step over a batch.
pub fn train_step(
    model: &PreferenceTransformer,
    schedule: &NoiseSchedule,
    batch: &Batch,
    cfg: &TrainConfig,
    opt: &mut AdamW,
    rng: &mut ChaCha8Rng,
) -> Result<LossComponents> {
    let losses = compute_losses(model, schedule, batch, cfg, rng)?;
    let values = losses.values()?;
    if !values.total.is_finite() {
        return Err(Error::Numeric(format!("loss components {values:?}")));
    }
    opt.backward_step(&losses.total)?;
    Ok(values)
}

/// Patience counted in evaluation events.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    since_best: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observation {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            since_best: 0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Records a validation metric (higher is better). Non-finite values never improve.
    pub fn observe(&mut self, metric: f64) -> Observation {
        let improved = metric.is_finite() && self.best.is_none_or(|b| metric > b);
        if improved {
            self.best = Some(metric);
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        Observation {
            improved,
            stop: self.since_best >= self.patience,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    #[serde(rename = "L_simple")]
    pub l_simple: f64,
    #[serde(rename = "L_listpref")]
    pub l_listpref: f64,
    #[serde(rename = "L_reg")]
    pub l_reg: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean: LossComponents,
    /// Validation SeqNDCG, on evaluation epochs.
    pub valid_metric: Option<f64>,
    pub improved: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn steps_jsonl(&self) -> Result<String> {
        jsonl(&self.steps)
    }

    pub fn epochs_jsonl(&self) -> Result<String> {
        jsonl(&self.epochs)
    }

    /// `epoch,L_simple,L_listpref,L_reg,L_total,valid_metric` per epoch.
    pub fn loss_curve_csv(&self) -> String {
        let mut s = String::from("epoch,L_simple,L_listpref,L_reg,L_total,valid_metric\n");
        for e in &self.epochs {
            let metric = e.valid_metric.map(|m| format!("{m:.6}")).unwrap_or_default();
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{}\n",
                e.epoch, e.mean.simple, e.mean.list_pref, e.mean.reg, e.mean.total, metric
            ));
        }
        s
    }
}

fn jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Where and how a fit runs beyond its [`TrainConfig`].
#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// First epoch to run; nonzero when resuming.
    pub start_epoch: usize,
    /// Optimizer steps already taken, for log numbering.
    pub start_step: usize,
    pub vocab_hash: String,
    /// When set, `best.safetensors` and `last.safetensors` are kept up to date here.
    pub checkpoint_dir: Option<PathBuf>,
    /// Best checkpoint of an interrupted run; later evaluations must beat its metric.
    pub initial_best: Option<Checkpoint>,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub best: Checkpoint,
    pub log: TrainingLog,
    pub stopped_early: bool,
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains until `max_epochs` or until validation SeqNDCG stops improving for
/// `patience` evaluations. The model is left holding the best parameters.
pub fn fit(
    splits: &Splits,
    model: &PreferenceTransformer,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    opts: &FitOptions,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if splits.train.is_empty() {
        return Err(Error::Argument("training split is empty".into()));
    }
    if splits.valid.is_empty() {
        return Err(Error::Argument("validation split is empty".into()));
    }
    let mut opt = adam(model, cfg.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = opts.initial_best.clone();
    if let Some(m) = best.as_ref().and_then(|b| b.metric) {
        stopper.observe(m);
    }
    let mut log = TrainingLog::default();
    let mut step = opts.start_step;
    let mut stopped_early = false;
    let eval_settings = EvalSettings {
        n_steps: cfg.eval_steps,
        cutoffs: vec![cfg.eval_cutoff],
        batch_size: cfg.batch_size.max(64),
        seed: cfg.seed.wrapping_add(1),
        exclude_previous: false,
    };
    let save = |ckpt: &Checkpoint, name: &str| -> Result<()> {
        match &opts.checkpoint_dir {
            Some(dir) => ckpt.save(&dir.join(name)),
            None => Ok(()),
        }
    };

    for epoch in opts.start_epoch..cfg.max_epochs {
        let mut sum = LossComponents { simple: 0.0, list_pref: 0.0, reg: 0.0, total: 0.0 };
        let mut n = 0;
        for batch in batch_iterator(&splits.train, cfg.batch_size, true, epoch_seed(cfg.seed, epoch))? {
            let c = match train_step(model, schedule, &batch, cfg, &mut opt, &mut rng) {
                Ok(c) => c,
                Err(Error::Numeric(msg)) => {
                    log::error!("aborting at step {step}: {msg}");
                    let last_good = match (&opts.checkpoint_dir, &best) {
                        (Some(dir), Some(b)) => format!("{} (epoch {})", dir.join("best.safetensors").display(), b.epoch),
                        (None, Some(b)) => format!("in-memory snapshot from epoch {}", b.epoch),
                        (_, None) => "none".to_string(),
                    };
                    return Err(Error::NonFiniteLoss { step, last_good });
                }
                Err(e) => return Err(e),
            };
            log.steps.push(StepRecord {
                step,
                epoch,
                l_simple: c.simple,
                l_listpref: c.list_pref,
                l_reg: c.reg,
                l_total: c.total,
            });
            sum.simple += c.simple;
            sum.list_pref += c.list_pref;
            sum.reg += c.reg;
            sum.total += c.total;
            n += 1;
            step += 1;
        }
        let nf = n as f64;
        let mean = LossComponents {
            simple: sum.simple / nf,
            list_pref: sum.list_pref / nf,
            reg: sum.reg / nf,
            total: sum.total / nf,
        };

        let mut record = EpochRecord { epoch, mean, valid_metric: None, improved: false };
        let mut stop = false;
        if (epoch + 1 - opts.start_epoch) % cfg.eval_every == 0 {
            let ev = evaluate(model, schedule, &splits.valid, &eval_settings)?;
            let metric = ev.report.seq_ndcg_at(cfg.eval_cutoff).unwrap_or(f64::NAN);
            let obs = stopper.observe(metric);
            record.valid_metric = Some(metric);
            record.improved = obs.improved;
            if obs.improved {
                let ckpt = Checkpoint::capture(model, &opts.vocab_hash, epoch, Some(metric))?;
                save(&ckpt, "best.safetensors")?;
                best = Some(ckpt);
            }
            stop = obs.stop;
        }
        log::info!(
            "epoch {epoch}: L_total {:.4} (simple {:.4}, listpref {:.4}, reg {:.4}) valid {:?}",
            mean.total, mean.simple, mean.list_pref, mean.reg, record.valid_metric
        );
        log.epochs.push(record);
        save(&Checkpoint::capture(model, &opts.vocab_hash, epoch, stopper.best())?, "last.safetensors")?;
        if stop {
            stopped_early = true;
            break;
        }
    }

    let best = best.ok_or_else(|| {
        Error::TrainingFailure("no finite validation metric was produced".into())
    })?;
    model.params().restore(&best.params)?;
    Ok(FitOutcome { best, log, stopped_early })
}
