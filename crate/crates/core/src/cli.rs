//! Command-line verbs over a run root directory.
//!
//! ```text
//! $LPDO_RUN_ROOT/
//!   prepared/            id_map.tsv, splits.jsonl, stats.json, stats.txt, prepare.json
//!   runs/<config hash>/  config.toml, manifest.json, train_log.jsonl, epochs.jsonl,
//!                        loss_curve.csv, checkpoints/{best,last}.safetensors,
//!                        eval/<split>_steps<n>.{txt,jsonl,csv}, eval/predictions_*.jsonl,
//!                        eval/summary.jsonl
//!   sweep_summary.csv
//! ```
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 unreadable or
//! malformed input, 3 no user survives the length filter, 4 non-finite loss or
//! scores, 5 checkpoint vocabulary differs from the prepared data.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{
    filter_and_split, load_interactions, read_id_map, read_manifest, vocab_hash, write_manifest, DatasetStats,
    Split, Splits,
};
use crate::denoiser::PreferenceTransformer;
use crate::error::{Error, Result};
use crate::sampler::{evaluate, write_predictions};
use crate::trainer::{fit, FitOptions, TrainingLog, ADAM};

pub const RUN_ROOT_ENV: &str = "LPDO_RUN_ROOT";

#[derive(Debug, Parser)]
#[command(name = "lpdo", version, about = "Listwise preference diffusion for trajectory prediction")]
pub struct Cli {
    /// Root for prepared data and runs; defaults to $LPDO_RUN_ROOT, then ./runs.
    #[arg(long, global = true)]
    pub run_root: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// TOML config file.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set loss.gamma=0.8`; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter, split and index a raw interaction log.
    Prepare(ConfigArgs),
    /// Train one configuration.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from the run's last checkpoint.
        #[arg(long)]
        resume: bool,
        /// Run directory; defaults to the one named by the config hash.
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Score a trained run on a split for every configured step count.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run directory; defaults to the one named by the config hash.
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Comma-separated denoising step counts; overrides `infer.steps`.
        #[arg(long, value_delimiter = ',')]
        steps: Vec<usize>,
        /// Comma-separated cutoffs; overrides `eval.topk`.
        #[arg(long, value_delimiter = ',')]
        topk: Vec<usize>,
    },
    /// Train and evaluate every point of the config's sweep grid.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Runs trained concurrently.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Collect evaluation summaries into one table.
    Report {
        /// Run directories; defaults to every run under the run root.
        runs: Vec<PathBuf>,
        /// Also write the table as CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run_root(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

pub fn execute(cli: &Cli) -> Result<()> {
    let root = run_root(cli.run_root.as_deref());
    match &cli.command {
        Command::Prepare(args) => {
            let cfg = args.resolve()?;
            let stats = prepare(&cfg, &root)?;
            print!("{}", stats.render());
        }
        Command::Train { config, resume, run } => {
            let cfg = config.resolve()?;
            let dir = match run {
                Some(r) => r.clone(),
                None => run_dir(&root, &cfg)?,
            };
            let out = train(&cfg, &root, &dir, *resume)?;
            println!("{}", out.run_dir.display());
        }
        Command::Evaluate { config, run, split, steps, topk } => {
            let mut cfg = config.resolve()?;
            if !steps.is_empty() {
                cfg.infer.steps = steps.clone();
            }
            if !topk.is_empty() {
                cfg.eval.topk = topk.clone();
            }
            cfg.validate()?;
            let split = parse_split(split)?;
            let run_dir = match run {
                Some(r) => r.clone(),
                None => run_dir(&root, &cfg)?,
            };
            for row in evaluate_run(&cfg, &root, &run_dir, split)? {
                println!("{}", serde_json::to_string(&row)?);
            }
        }
        Command::Sweep { config, workers } => {
            let cfg = config.resolve()?;
            let rows = sweep(&cfg, &root, *workers)?;
            print!("{}", render_rows(&rows));
        }
        Command::Report { runs, csv } => {
            let dirs = if runs.is_empty() { list_runs(&root)? } else { runs.clone() };
            let mut rows = Vec::new();
            for d in &dirs {
                rows.extend(read_summary(d)?);
            }
            print!("{}", render_rows(&rows));
            if let Some(path) = csv {
                write_file(path, &rows_csv(&rows))?;
            }
        }
    }
    Ok(())
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        RunConfig::resolve(self.config.as_deref(), &self.overrides)
    }
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "valid" => Ok(Split::Valid),
        "test" => Ok(Split::Test),
        other => Err(Error::Argument(format!("unknown split {other:?}"))),
    }
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Valid => "valid",
        Split::Test => "test",
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn prepared_dir(root: &Path, cfg: &RunConfig) -> PathBuf {
    root.join(&cfg.dataset.prepared)
}

pub fn run_dir(root: &Path, cfg: &RunConfig) -> Result<PathBuf> {
    Ok(root.join("runs").join(cfg.hash()?))
}

/// Provenance of a prepared-data directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareInfo {
    pub source: PathBuf,
    pub k: usize,
    pub n_max: usize,
    pub vocab_hash: String,
    /// sha256 of `splits.jsonl`.
    pub data_hash: String,
}

/// Reads the raw log named by `dataset.path` and writes the prepared directory.
pub fn prepare(cfg: &RunConfig, root: &Path) -> Result<DatasetStats> {
    let source = cfg
        .dataset
        .path
        .clone()
        .ok_or_else(|| Error::Config("dataset.path is not set".into()))?;
    let corpus = load_interactions(&source, &cfg.dataset.load_options())?;
    let splits = Splits::from_examples(filter_and_split(&corpus, cfg.traj.k, cfg.traj.n_max)?);
    let stats = DatasetStats::compute(&corpus, &splits, cfg.traj.k);

    let dir = prepared_dir(root, cfg);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    corpus.write_id_map(&dir.join("id_map.tsv"))?;
    let examples: Vec<_> = splits.all().cloned().collect();
    let manifest = dir.join("splits.jsonl");
    write_manifest(&manifest, &examples)?;
    write_file(&dir.join("stats.json"), &serde_json::to_string_pretty(&stats)?)?;
    write_file(&dir.join("stats.txt"), &stats.render())?;
    let info = PrepareInfo {
        source,
        k: cfg.traj.k,
        n_max: cfg.traj.n_max,
        vocab_hash: corpus.vocab_hash(),
        data_hash: file_hash(&manifest)?,
    };
    write_file(&dir.join("prepare.json"), &serde_json::to_string_pretty(&info)?)?;
    log::info!("prepared {} users into {}", stats.sequences_after, dir.display());
    Ok(stats)
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Prepared splits checked against the config's trajectory settings.
pub struct PreparedData {
    pub info: PrepareInfo,
    pub splits: Splits,
    pub vocab_size: usize,
}

pub fn load_prepared(root: &Path, cfg: &RunConfig) -> Result<PreparedData> {
    let dir = prepared_dir(root, cfg);
    let info: PrepareInfo = serde_json::from_str(&read_file(&dir.join("prepare.json"))?)?;
    if (info.k, info.n_max) != (cfg.traj.k, cfg.traj.n_max) {
        return Err(Error::Config(format!(
            "{} was prepared with k={}, n_max={}; config asks for k={}, n_max={}",
            dir.display(),
            info.k,
            info.n_max,
            cfg.traj.k,
            cfg.traj.n_max
        )));
    }
    let vocab = read_id_map(&dir.join("id_map.tsv"))?;
    let found = vocab_hash(&vocab);
    if found != info.vocab_hash {
        return Err(Error::VocabMismatch { expected: info.vocab_hash, found });
    }
    let splits = Splits::from_examples(read_manifest(&dir.join("splits.jsonl"))?);
    Ok(PreparedData { info, splits, vocab_size: vocab.len() })
}

/// Self-description of a run directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub config: RunConfig,
    pub label: String,
    pub data: PrepareInfo,
    pub adam: AdamRecord,
    pub n_parameters: usize,
    pub code_version: String,
    pub model_selection: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamRecord {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub best_epoch: usize,
    pub best_metric: Option<f64>,
}

/// Trains the config's run, writing everything under `dir`.
pub fn train(cfg: &RunConfig, root: &Path, dir: &Path, resume: bool) -> Result<TrainOutcome> {
    let data = load_prepared(root, cfg)?;
    let dir = dir.to_path_buf();
    let ckpt_dir = dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(ckpt_dir.display().to_string(), e))?;

    let (model, start_epoch, initial_best) = if resume {
        let last = Checkpoint::load(&ckpt_dir.join("last.safetensors"))?;
        let best = Checkpoint::load(&ckpt_dir.join("best.safetensors"))?;
        (last.to_model(Some(&data.info.vocab_hash))?, last.epoch + 1, Some(best))
    } else {
        (PreferenceTransformer::new(cfg.denoiser_config(data.vocab_size), cfg.model.seed)?, 0, None)
    };
    let tcfg = cfg.train_config();
    let manifest = RunManifest {
        config_hash: cfg.hash()?,
        config: cfg.clone(),
        label: tcfg.ablation.label().to_string(),
        data: data.info.clone(),
        adam: AdamRecord { beta1: ADAM.beta1, beta2: ADAM.beta2, eps: ADAM.eps, weight_decay: 0.0 },
        n_parameters: model.params().num_parameters(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        model_selection: format!("valid SeqNDCG@{}", tcfg.eval_cutoff),
    };
    write_file(&dir.join("config.toml"), &cfg.to_toml()?)?;
    write_file(&dir.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)?;

    let schedule = cfg.diffusion.build()?;
    let start_step = match resume {
        true => read_file(&dir.join("train_log.jsonl"))?.lines().filter(|l| !l.trim().is_empty()).count(),
        false => 0,
    };
    let opts = FitOptions {
        start_epoch,
        start_step,
        vocab_hash: data.info.vocab_hash.clone(),
        checkpoint_dir: Some(ckpt_dir),
        initial_best,
    };
    let out = fit(&data.splits, &model, &schedule, &tcfg, &opts)?;
    write_log(&dir, &out.log, resume)?;
    Ok(TrainOutcome { run_dir: dir, best_epoch: out.best.epoch, best_metric: out.best.metric })
}

fn write_log(dir: &Path, log: &TrainingLog, append: bool) -> Result<()> {
    let put = |name: &str, text: &str, skip_header: bool| -> Result<()> {
        let path = dir.join(name);
        let text = if skip_header { text.split_once('\n').map_or("", |(_, rest)| rest) } else { text };
        let mut f = OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
    };
    put("train_log.jsonl", &log.steps_jsonl()?, false)?;
    put("epochs.jsonl", &log.epochs_jsonl()?, false)?;
    put("loss_curve.csv", &log.loss_curve_csv(), append && dir.join("loss_curve.csv").exists())
}

/// One row of an evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run: String,
    pub label: String,
    pub gamma: f64,
    pub split: Split,
    pub n_steps: usize,
    pub cutoff: usize,
    pub mean_hr: f64,
    pub seq_hr: f64,
    pub mean_ndcg: f64,
    pub seq_ndcg: f64,
    pub seq_match: f64,
    pub ppl: f64,
    pub ln_ppl: f64,
    pub n_examples: usize,
    pub inference_seconds: f64,
}

/// Evaluates the run's best checkpoint for every `infer.steps` entry.
pub fn evaluate_run(cfg: &RunConfig, root: &Path, dir: &Path, split: Split) -> Result<Vec<SummaryRow>> {
    let data = load_prepared(root, cfg)?;
    let ckpt = Checkpoint::load(&dir.join("checkpoints").join("best.safetensors"))?;
    let model = ckpt.to_model(Some(&data.info.vocab_hash))?;
    let manifest: RunManifest = serde_json::from_str(&read_file(&dir.join("manifest.json"))?)?;
    let schedule = manifest.config.diffusion.build()?;
    let examples = data.splits.get(split);
    let eval_dir = dir.join("eval");
    let name = split_name(split);

    let mut rows = Vec::new();
    for &n in &cfg.infer.steps {
        if n > schedule.steps() {
            return Err(Error::Config(format!("{n} steps exceed the trained schedule of {}", schedule.steps())));
        }
        let ev = evaluate(&model, &schedule, examples, &cfg.eval_settings(n))?;
        let stem = format!("{name}_steps{n}");
        write_file(&eval_dir.join(format!("{stem}.txt")), &ev.report.render_table())?;
        write_file(&eval_dir.join(format!("{stem}.jsonl")), &ev.report.to_jsonl()?)?;
        write_file(&eval_dir.join(format!("{stem}_position_hr.csv")), &ev.report.position_hr_csv())?;
        write_predictions(&eval_dir.join(format!("predictions_{stem}.jsonl")), &ev.records)?;
        for r in ev.report.records() {
            rows.push(SummaryRow {
                run: manifest.config_hash.clone(),
                label: manifest.label.clone(),
                gamma: manifest.config.loss.gamma,
                split,
                n_steps: n,
                cutoff: r.cutoff,
                mean_hr: r.mean_hr,
                seq_hr: r.seq_hr,
                mean_ndcg: r.mean_ndcg,
                seq_ndcg: r.seq_ndcg,
                seq_match: r.seq_match,
                ppl: r.ppl,
                ln_ppl: r.ln_ppl,
                n_examples: r.n_examples,
                inference_seconds: ev.elapsed.as_secs_f64(),
            });
        }
    }
    let mut text = String::new();
    for r in &rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_file(&eval_dir.join("summary.jsonl"), &text)?;
    Ok(rows)
}

pub fn read_summary(dir: &Path) -> Result<Vec<SummaryRow>> {
    let path = dir.join("eval").join("summary.jsonl");
    read_file(&path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse { line: i + 1, msg: format!("{}: {e}", path.display()) })
        })
        .collect()
}

fn list_runs(root: &Path) -> Result<Vec<PathBuf>> {
    let runs = root.join("runs");
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(&runs)
        .map_err(|e| Error::io(runs.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("eval").join("summary.jsonl").exists())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Trains and evaluates every sweep point; failures are logged and skipped.
pub fn sweep(cfg: &RunConfig, root: &Path, workers: usize) -> Result<Vec<SummaryRow>> {
    let points = cfg.expand_sweep()?;
    let queue = Mutex::new(points.iter().enumerate());
    let results: Mutex<BTreeMap<usize, Vec<SummaryRow>>> = Mutex::new(BTreeMap::new());
    let failures = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, points.len()) {
            s.spawn(|| loop {
                let next = queue.lock().expect("queue lock").next();
                let Some((i, point)) = next else { break };
                let run = run_dir(root, point)
                    .and_then(|dir| train(point, root, &dir, false))
                    .and_then(|out| evaluate_run(point, root, &out.run_dir, Split::Test));
                match run {
                    Ok(rows) => {
                        results.lock().expect("results lock").insert(i, rows);
                    }
                    Err(e) => {
                        log::error!("sweep point {i} failed: {e}");
                        failures.lock().expect("failures lock").push((i, e));
                    }
                }
            });
        }
    });
    let rows: Vec<SummaryRow> = results.into_inner().expect("results lock").into_values().flatten().collect();
    write_file(&root.join("sweep_summary.csv"), &rows_csv(&rows))?;
    let failures = failures.into_inner().expect("failures lock");
    if let Some((_, first)) = failures.into_iter().next().filter(|_| rows.is_empty()) {
        return Err(first);
    }
    Ok(rows)
}

pub fn render_rows(rows: &[SummaryRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<17} {:<15} {:>5} {:>5} {:>4} {:>8} {:>8} {:>9} {:>9} {:>9} {:>9} {:>8}",
        "run", "label", "gamma", "steps", "K", "MeanHR", "SeqHR", "MeanNDCG", "SeqNDCG", "SeqMatch", "PPL", "infer_s"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<17} {:<15} {:>5.2} {:>5} {:>4} {:>8.4} {:>8.4} {:>9.4} {:>9.4} {:>9.4} {:>9.3} {:>8.3}",
            r.run, r.label, r.gamma, r.n_steps, r.cutoff, r.mean_hr, r.seq_hr, r.mean_ndcg, r.seq_ndcg,
            r.seq_match, r.ppl, r.inference_seconds
        );
    }
    s
}

pub fn rows_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from(
        "run,label,gamma,split,n_steps,cutoff,mean_hr,seq_hr,mean_ndcg,seq_ndcg,seq_match,ppl,ln_ppl,n_examples,inference_seconds\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{:.6}",
            r.run, r.label, r.gamma, split_name(r.split), r.n_steps, r.cutoff, r.mean_hr, r.seq_hr,
            r.mean_ndcg, r.seq_ndcg, r.seq_match, r.ppl, r.ln_ppl, r.n_examples, r.inference_seconds
        );
    }
    s
}
