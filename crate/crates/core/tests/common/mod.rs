#![allow(dead_code)]

use lpdo::dataset::{filter_and_split, Splits};
use lpdo::denoiser::{DenoiserConfig, MaskMode, PreferenceTransformer};
use lpdo::losses::LossWeights;
use lpdo::schedule::NoiseSchedule;
use lpdo::synthetic::{planted_motifs, MotifConfig};
use lpdo::trainer::{fit, Ablation, FitOptions, FitOutcome, TrainConfig};

pub const TOY_N_MAX: usize = 10;
pub const TOY_K: usize = 2;

/// 500 users, 100 items, alternating two-item motifs.
pub fn toy_splits(seed: u64) -> Splits {
    let corpus = planted_motifs(&MotifConfig { seed, ..MotifConfig::default() }).unwrap();
    assert_eq!(corpus.vocab_size(), 100);
    Splits::from_examples(filter_and_split(&corpus, TOY_K, TOY_N_MAX).unwrap())
}

pub fn toy_model(seed: u64) -> PreferenceTransformer {
    let cfg = DenoiserConfig {
        embed_dim: 32,
        n_blocks: 2,
        n_heads: 2,
        dropout: 0.1,
        mask_mode: MaskMode::Causal,
        n_max: TOY_N_MAX,
        k: TOY_K,
        vocab_size: 100,
        init_std: 0.1,
        ..DenoiserConfig::default()
    };
    PreferenceTransformer::new(cfg, seed).unwrap()
}

pub fn toy_schedule() -> NoiseSchedule {
    NoiseSchedule::linear(20, 1e-4, 0.02).unwrap()
}

pub fn toy_train_config(seed: u64, gamma: f64, ablation: Ablation, epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.01,
        batch_size: 8,
        max_epochs: epochs,
        patience: epochs,
        seed,
        weights: LossWeights { gamma, ..LossWeights::default() },
        ablation,
        ..TrainConfig::default()
    }
}

pub fn train_toy(seed: u64, gamma: f64, ablation: Ablation, epochs: usize) -> (Splits, PreferenceTransformer, FitOutcome) {
    let splits = toy_splits(seed);
    let model = toy_model(seed);
    let cfg = toy_train_config(seed, gamma, ablation, epochs);
    let out = fit(&splits, &model, &toy_schedule(), &cfg, &FitOptions::default()).unwrap();
    (splits, model, out)
}
