//! How far a perturbation of one trajectory slot travels under each attention
//! mask: causal and prefix masks keep earlier slots fixed, bidirectional does not.
//!
//! `cargo run --release --example attention_masks`

use candle_core::{DType, Tensor};
use lpdo::dataset::{Batch, Split, TrajectoryExample};
use lpdo::denoiser::{embed_examples, Denoise, DenoiserConfig, LatentBatch, MaskMode, PreferenceTransformer};
use lpdo::params::randn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> lpdo::Result<()> {
    let (n_max, k) = (6, 3);
    let example = TrajectoryExample { user: "u".into(), split: Split::Test, history: vec![0, 3, 8, 1, 4, 9], target: vec![2, 5, 7] };
    let batch = Batch::from_examples(&[&example])?;
    for mode in [MaskMode::Causal, MaskMode::Prefix, MaskMode::Bidirectional] {
        let cfg = DenoiserConfig { embed_dim: 32, n_blocks: 2, n_heads: 4, mask_mode: mode, n_max, k, vocab_size: 10, ..DenoiserConfig::default() };
        let model = PreferenceTransformer::new(cfg, 0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (h, _) = embed_examples(&batch, model.item_table())?;
        let traj = randn(&mut rng, &[1, k, 32], model.dtype(), model.device())?;
        let x_t = Tensor::cat(&[&h, &traj], 1)?;
        let latent = LatentBatch { x_t: x_t.clone(), t: vec![10], history_mask: batch.history_mask.clone(), n_max };
        let base = model.denoise(&latent, &h)?;

        // Shift the last trajectory slot only.
        let last = n_max + k - 1;
        let bump = randn(&mut rng, &[1, 1, 32], model.dtype(), model.device())?;
        let moved = Tensor::cat(&[&x_t.narrow(1, 0, last)?, &(x_t.narrow(1, last, 1)? + bump)?], 1)?;
        let out = model.denoise(&LatentBatch { x_t: moved, ..latent }, &h)?;
        let diff = (out - base)?.abs()?.max_keepdim(2)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let cells: Vec<String> = diff.iter().map(|d| format!("{d:.0e}")).collect();
        println!("{mode:?}: per-slot change [{}]", cells.join(" "));
    }
    Ok(())
}
