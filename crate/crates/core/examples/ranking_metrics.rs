//! Trajectory metrics from ranked lists: per-position hits, their arithmetic and
//! geometric aggregates, exact sequence match and perplexity.
//!
//! `cargo run --example ranking_metrics`

use lpdo::metrics::{position_hit, position_ndcg, seq_match, EvalAccumulator};

fn main() -> lpdo::Result<()> {
    let lists = [vec![4u32, 7, 1], vec![2, 9, 3]];
    let targets = [7u32, 5];
    for (j, (t, l)) in targets.iter().zip(&lists).enumerate() {
        println!("position {}: hit@2 {} ndcg@2 {:.4}", j + 1, position_hit(*t, l, 2), position_ndcg(*t, l, 2));
    }
    println!("sequence match@2: {}", seq_match(&targets, &lists, 2)?);

    let mut acc = EvalAccumulator::new(&[1, 2, 3], 2)?;
    acc.add(&targets, &lists)?;
    acc.add(&[4, 3], &lists)?;
    acc.add(&[1, 2], &lists)?;
    for scores in [[0.1, 2.0, 0.3], [1.5, 0.2, 0.0]] {
        acc.add_likelihood(&scores, 1)?;
    }
    print!("{}", acc.finish()?.render_table());
    Ok(())
}
