//! Soft-ListMLE on a single score vector, and the trajectory loss over a batch
//! of per-position score rows, across the exclusion strength `gamma`.
//!
//! `cargo run --example listwise_loss`

use candle_core::{Device, Tensor};
use lpdo::losses::{list_pref_loss, scalar, soft_listmle, soft_listmle_grad, RankingScores};

fn main() -> lpdo::Result<()> {
    let scores = [2.0, 0.5, 1.0, -1.0];
    let ranking = [0, 2, 1];
    println!("{:>6} {:>10}  gradient", "gamma", "loss");
    for gamma in [0.0, 0.5, 1.0] {
        let loss = soft_listmle(&scores, &ranking, gamma)?;
        let grad = soft_listmle_grad(&scores, &ranking, gamma)?;
        let grad: Vec<String> = grad.iter().map(|g| format!("{g:+.3}")).collect();
        println!("{gamma:>6.1} {loss:>10.5}  [{}]", grad.join(", "));
    }

    // Two users, two future positions, five items; targets are 1-based item ids.
    let rows = Tensor::new(
        &[
            [[3.0f64, 0.1, 0.2, 0.0, -1.0], [0.2, 2.5, 0.0, 0.1, 0.3]],
            [[0.0, 0.0, 1.0, 0.5, 0.2], [0.0, 0.0, 2.0, 0.5, 0.2]],
        ],
        &Device::Cpu,
    )?;
    let ranking = RankingScores::new(rows, vec![1, 2, 3, 4])?;
    for gamma in [0.0, 0.5, 1.0] {
        println!("trajectory loss at gamma {gamma:.1}: {:.5}", scalar(&list_pref_loss(&ranking, gamma)?)?);
    }
    Ok(())
}
