//! Trains on a planted-motif corpus and reports held-out trajectory metrics.
//!
//! `cargo run --release --example train_toy -- [epochs] [gamma] [lr] [batch] [no_listpref] [init_std] [beta_end]`

use lpdo::dataset::{filter_and_split, Splits};
use lpdo::denoiser::{DenoiserConfig, MaskMode, PreferenceTransformer};
use lpdo::losses::LossWeights;
use lpdo::sampler::{evaluate, EvalSettings};
use lpdo::schedule::NoiseSchedule;
use lpdo::synthetic::{planted_motifs, MotifConfig};
use lpdo::trainer::{fit, Ablation, FitOptions, TrainConfig};

fn main() -> lpdo::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: &str| args.get(i).cloned().unwrap_or_else(|| default.to_string());
    let epochs: usize = arg(0, "10").parse().unwrap();
    let gamma: f64 = arg(1, "0.0").parse().unwrap();
    let lr: f64 = arg(2, "0.01").parse().unwrap();
    let batch: usize = arg(3, "8").parse().unwrap();
    let no_listpref: bool = arg(4, "false").parse().unwrap();
    let init_std: f64 = arg(5, "0.1").parse().unwrap();
    let beta_end: f64 = arg(6, "0.02").parse().unwrap();

    let corpus = planted_motifs(&MotifConfig::default())?;
    let n_max = 10;
    let splits = Splits::from_examples(filter_and_split(&corpus, 2, n_max)?);
    let model = PreferenceTransformer::new(
        DenoiserConfig {
            embed_dim: 32,
            n_blocks: 2,
            n_heads: 2,
            dropout: 0.1,
            mask_mode: MaskMode::Causal,
            n_max,
            k: 2,
            vocab_size: corpus.vocab_size(),
            init_std,
            ..DenoiserConfig::default()
        },
        0,
    )?;
    let schedule = NoiseSchedule::linear(20, 1e-4, beta_end)?;
    let cfg = TrainConfig {
        learning_rate: lr,
        batch_size: batch,
        max_epochs: epochs,
        patience: epochs,
        weights: LossWeights { gamma, ..LossWeights::default() },
        ablation: Ablation { no_listpref, ..Ablation::default() },
        ..TrainConfig::default()
    };
    let start = std::time::Instant::now();
    let out = fit(&splits, &model, &schedule, &cfg, &FitOptions::default())?;
    for e in &out.log.epochs {
        println!("epoch {} loss {:.4} valid SeqNDCG@5 {:?}", e.epoch, e.mean.total, e.valid_metric);
    }
    let ev = evaluate(&model, &schedule, &splits.test, &EvalSettings { cutoffs: vec![5, 10], ..EvalSettings::default() })?;
    println!("{}", ev.report.render_table());
    println!("test SeqMatch@5 {:.4} in {:.1?}", ev.report.seq_match_at(5).unwrap(), start.elapsed());
    Ok(())
}
