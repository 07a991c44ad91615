mod common;

use common::*;
use lpdo::checkpoint::Checkpoint;
use lpdo::dataset::{batch_iterator, TrajectoryExample};
use lpdo::sampler::{evaluate, sample_trajectory, EvalSettings, SampleConfig};
use candle_core::{DType, Var};
use lpdo::losses::{list_pref_loss, RankingScores};
use lpdo::trainer::{adam, compute_losses, fit, total_loss, train_step, Ablation, FitOptions};
use lpdo::Error;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn no_listpref_leaves_scores_without_gradient() {
    let splits = toy_splits(0);
    let model = toy_model(0);
    let batch = batch_iterator(&splits.train, 8, false, 0).unwrap().next().unwrap();
    let cfg = toy_train_config(0, 0.3, Ablation::default(), 1);
    let l = compute_losses(&model, &toy_schedule(), &batch, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();

    // Re-root the components at leaf variables so their gradients are observable.
    let scores = Var::from_tensor(&l.scores.detach()).unwrap();
    let simple = Var::from_tensor(&l.simple.detach()).unwrap();
    let reg = Var::from_tensor(&l.reg.detach()).unwrap();
    let ranking = RankingScores::new(scores.as_tensor().clone(), batch.target.clone()).unwrap();
    let list_pref = list_pref_loss(&ranking, cfg.weights.gamma).unwrap();
    let grad_norm = |ablation: Ablation| -> f64 {
        let cfg = toy_train_config(0, 0.3, ablation, 1);
        let total = total_loss(&cfg, simple.as_tensor(), &list_pref, reg.as_tensor()).unwrap();
        let grads = total.backward().unwrap();
        grads
            .get(scores.as_tensor())
            .map(|g| g.abs().unwrap().sum_all().unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap())
            .unwrap_or(0.0)
    };
    assert_eq!(grad_norm(Ablation { no_listpref: true, ..Ablation::default() }), 0.0);
    assert!(grad_norm(Ablation::default()) > 0.0);
    assert!(grad_norm(Ablation { no_simple: true, no_reg: true, ..Ablation::default() }) > 0.0);
}

#[test]
fn ablated_total_drops_exactly_the_listwise_term() {
    let splits = toy_splits(0);
    let model = toy_model(0);
    let batch = batch_iterator(&splits.train, 8, false, 0).unwrap().next().unwrap();
    let ablated = toy_train_config(0, 0.3, Ablation { no_listpref: true, ..Ablation::default() }, 1);
    let full = toy_train_config(0, 0.3, Ablation::default(), 1);
    let a = compute_losses(&model, &toy_schedule(), &batch, &ablated, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let f = compute_losses(&model, &toy_schedule(), &batch, &full, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let (a, f) = (a.values().unwrap(), f.values().unwrap());
    assert_eq!(a.list_pref, f.list_pref);
    let w = full.weights;
    assert!((f.total - a.total - (1.0 - w.lambda) * f.list_pref).abs() < 1e-4 * f.total.abs());
}

#[test]
fn exploding_learning_rate_aborts_with_non_finite_loss() {
    let splits = toy_splits(0);
    let model = toy_model(0);
    let mut cfg = toy_train_config(0, 0.3, Ablation::default(), 3);
    cfg.learning_rate = 1e36;
    match fit(&splits, &model, &toy_schedule(), &cfg, &FitOptions::default()) {
        Err(Error::NonFiniteLoss { step, last_good }) => {
            assert!(step > 0);
            assert!(!last_good.is_empty());
            assert_eq!(Error::NonFiniteLoss { step, last_good }.exit_code(), 4);
        }
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training with lr 1e36 stayed finite"),
    }
}

#[test]
fn identical_seeds_give_identical_steps() {
    let splits = toy_splits(1);
    let cfg = toy_train_config(1, 0.3, Ablation::default(), 1);
    let run = || {
        let model = toy_model(1);
        let mut opt = adam(&model, cfg.learning_rate).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        batch_iterator(&splits.train, 32, true, 5)
            .unwrap()
            .take(4)
            .map(|b| train_step(&model, &toy_schedule(), &b, &cfg, &mut opt, &mut rng).unwrap().total)
            .collect::<Vec<f64>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn trained_toy_checkpoint_history_and_patience() {
    let (splits, model, out) = train_toy(0, 0.0, Ablation::default(), 6);
    let schedule = toy_schedule();

    // Checkpoint round trip reproduces validation metrics.
    let settings = EvalSettings { cutoffs: vec![5, 10], ..EvalSettings::default() };
    let before = evaluate(&model, &schedule, &splits.valid, &settings).unwrap().report;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.safetensors");
    out.best.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.epoch, out.best.epoch);
    assert_eq!(loaded.metric, out.best.metric);
    let restored = loaded.to_model(Some(&out.best.vocab_hash)).unwrap();
    let after = evaluate(&restored, &schedule, &splits.valid, &settings).unwrap().report;
    for (a, b) in before.seq_ndcg.iter().chain(&before.mean_hr).zip(after.seq_ndcg.iter().chain(&after.mean_hr)) {
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }
    assert!((before.ppl - after.ppl).abs() <= 1e-6 * before.ppl);
    assert!(matches!(loaded.to_model(Some("other")), Err(Error::VocabMismatch { .. })));

    // The model is left holding the best validation parameters.
    let best_metric = out.best.metric.unwrap();
    let settings5 = EvalSettings { cutoffs: vec![5], batch_size: 64, seed: 1, ..EvalSettings::default() };
    let now = evaluate(&model, &schedule, &splits.valid, &settings5).unwrap().report.seq_ndcg_at(5).unwrap();
    assert!((now - best_metric).abs() < 1e-9);
    let logged_best = out.log.epochs.iter().filter_map(|e| e.valid_metric).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(logged_best, best_metric);

    // Shuffling a user's history changes some top-1 prediction for most users.
    let cfg = SampleConfig { n_steps: 1, top_k: 1, exclude_previous: false };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let shuffled: Vec<TrajectoryExample> = splits
        .test
        .iter()
        .map(|e| {
            let mut e = e.clone();
            let start = e.history.iter().position(|&i| i != 0).unwrap();
            e.history[start..].shuffle(&mut rng);
            e
        })
        .collect();
    let top1 = |examples: &[TrajectoryExample]| -> Vec<Vec<u32>> {
        let mut out = Vec::new();
        for b in batch_iterator(examples, 128, false, 0).unwrap() {
            let s = sample_trajectory(&model, &schedule, &b, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            out.extend(s.ranked.into_iter().map(|l| l.into_iter().map(|r| r.items[0]).collect()));
        }
        out
    };
    let (orig, moved) = (top1(&splits.test), top1(&shuffled));
    let changed = orig.iter().zip(&moved).filter(|(a, b)| a != b).count();
    assert!(changed * 2 > orig.len(), "only {changed} of {} users changed", orig.len());
}

#[test]
fn patience_stops_a_stalled_run() {
    let splits = toy_splits(2);
    let model = toy_model(2);
    let mut cfg = toy_train_config(2, 0.3, Ablation::default(), 50);
    cfg.learning_rate = 1e-9;
    cfg.patience = 2;
    let out = fit(&splits, &model, &toy_schedule(), &cfg, &FitOptions::default()).unwrap();
    assert!(out.stopped_early);
    assert!(out.log.epochs.len() < 50);
    let tail = &out.log.epochs[out.log.epochs.len() - 2..];
    assert!(tail.iter().all(|e| !e.improved));
}
