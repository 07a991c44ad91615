//! Interaction log to fixed-length trajectory examples: dense id remapping,
//! chronological ordering, the validity threshold and the three-window split.
//!
//! `cargo run --example prepare_data`

use std::io::Cursor;

use lpdo::dataset::{filter_and_split, parse_interactions, validity_threshold, DatasetStats, LoadOptions, Splits};

fn main() -> lpdo::Result<()> {
    let k = 2;
    let mut log = String::new();
    for (user, len) in [("ana", 12), ("bo", 7), ("cy", 9)] {
        for t in 0..len {
            // user::item::rating::timestamp, written newest first.
            log.push_str(&format!("{user}::{}::5::{}\n", (t * 5 + user.len()) % 11, 1000 - t));
        }
    }
    let corpus = parse_interactions(Cursor::new(log), &LoadOptions { delimiter: "::".into(), time_col: Some(3), ..LoadOptions::default() })?;
    println!("{} users, {} items; sequences need more than {} actions", corpus.users.len(), corpus.vocab_size(), validity_threshold(k));

    let splits = Splits::from_examples(filter_and_split(&corpus, k, 6)?);
    for e in splits.all() {
        println!("{:<4} {:?} history {:?} -> target {:?}", e.user, e.split, e.history, e.target);
    }
    print!("{}", DatasetStats::compute(&corpus, &splits, k).render());
    Ok(())
}
