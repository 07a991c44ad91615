//! Run configuration from TOML: defaults, dotted overrides, the stable run hash
//! and expansion of a sweep grid into concrete runs.
//!
//! `cargo run --example config_sweep`

use lpdo::config::RunConfig;

const CONFIG: &str = r#"
[dataset]
path = "data/log.tsv"

[traj]
k = 3

[loss]
gamma = 0.2

[sweep]
"loss.gamma" = [0.0, 0.5, 1.0]
"model.blocks" = [1, 2]
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let base = RunConfig::from_toml_str(CONFIG)?;
    println!("base hash {} (k = {}, gamma = {})", base.hash()?, base.traj.k, base.loss.gamma);
    for run in base.expand_sweep()? {
        println!("  run {}: gamma {:.1}, blocks {}", run.hash()?, run.loss.gamma, run.model.blocks);
    }

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("run.toml");
    std::fs::write(&path, CONFIG)?;
    let tuned = RunConfig::resolve(Some(&path), &["train.lr=0.01".into(), "model.mask=\"prefix\"".into()])?;
    println!("override: lr {} mask {:?}; hash {}", tuned.train.lr, tuned.model.mask, tuned.hash()?);
    Ok(())
}

