//! Trains a small model on planted motifs, saves and reloads its checkpoint,
//! then compares quality and latency across the number of denoising steps.
//!
//! `cargo run --release --example inference_steps`

use lpdo::checkpoint::Checkpoint;
use lpdo::dataset::{filter_and_split, Splits};
use lpdo::denoiser::{DenoiserConfig, MaskMode, PreferenceTransformer};
use lpdo::sampler::{evaluate, EvalSettings};
use lpdo::schedule::NoiseSchedule;
use lpdo::synthetic::{planted_motifs, MotifConfig};
use lpdo::trainer::{fit, FitOptions, TrainConfig};

fn main() -> lpdo::Result<()> {
    let corpus = planted_motifs(&MotifConfig { n_users: 300, ..MotifConfig::default() })?;
    let splits = Splits::from_examples(filter_and_split(&corpus, 2, 10)?);
    let cfg = DenoiserConfig { embed_dim: 32, n_blocks: 2, n_heads: 2, mask_mode: MaskMode::Causal, n_max: 10, k: 2, vocab_size: corpus.vocab_size(), ..DenoiserConfig::default() };
    let model = PreferenceTransformer::new(cfg, 0)?;
    let schedule = NoiseSchedule::linear(20, 1e-4, 0.02)?;
    let train = TrainConfig { learning_rate: 0.01, batch_size: 8, max_epochs: 6, ..TrainConfig::default() };
    let out = fit(&splits, &model, &schedule, &train, &FitOptions::default())?;
    println!("trained {} epochs, best valid SeqNDCG@5 {:.3}", out.log.epochs.len(), out.best.metric.unwrap_or(f64::NAN));

    let path = std::env::temp_dir().join("lpdo-inference-steps.safetensors");
    Checkpoint::capture(&model, &corpus.vocab_hash(), out.best.epoch, out.best.metric)?.save(&path)?;
    let restored = Checkpoint::load(&path)?.to_model(Some(&corpus.vocab_hash()))?;

    println!("{:>6} {:>12} {:>10}", "steps", "SeqMatch@5", "ms");
    for n_steps in [1, 2, 5, 10, 20] {
        let settings = EvalSettings { n_steps, cutoffs: vec![5], ..EvalSettings::default() };
        let ev = evaluate(&restored, &schedule, &splits.test, &settings)?;
        println!("{n_steps:>6} {:>12.3} {:>10.1}", ev.report.seq_match_at(5).unwrap(), ev.elapsed.as_secs_f64() * 1e3);
    }
    Ok(())
}
