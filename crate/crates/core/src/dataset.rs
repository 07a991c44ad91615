//! Interaction logs, item vocabulary and leave-one-out trajectory splits.
//!
//! Raw logs are delimiter-separated rows of `user, item, timestamp`. Items are
//! remapped to a contiguous range `1..=M` in order of first appearance; id 0 is
//! reserved for padding. For a trajectory length `k`, a user with more than
//! `1 + 3k` interactions yields three examples: the last `k` items are the test
//! target, the `k` before that the validation target, and the `k` before that the
//! training target. Each target's history is everything preceding it, truncated
//! to the most recent `n_max` items and left-padded with 0.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Padding item id. Never a prediction target.
pub const PAD: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Tsv,
    Csv,
}

impl Format {
    pub fn delimiter(self) -> &'static str {
        match self {
            Format::Tsv => "\t",
            Format::Csv => ",",
        }
    }
}

/// How to read a raw interaction file.
#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Column separator; may be multi-character (MovieLens uses `::`).
    pub delimiter: String,
    pub user_col: usize,
    pub item_col: usize,
    /// `None` means rows are already in chronological order; file order is the clock.
    pub time_col: Option<usize>,
    pub has_header: bool,
    /// Drop interactions with items seen fewer than this many times (single pass).
    pub min_item_count: usize,
}

impl LoadOptions {
    pub fn new(format: Format) -> Self {
        LoadOptions {
            delimiter: format.delimiter().to_string(),
            user_col: 0,
            item_col: 1,
            time_col: Some(2),
            has_header: false,
            min_item_count: 1,
        }
    }
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions::new(Format::Tsv)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub item: u32,
    pub timestamp: i64,
}

/// Per-user chronologically ordered interactions over a remapped vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionCorpus {
    pub users: Vec<String>,
    pub events: Vec<Vec<Event>>,
    /// `raw_items[id - 1]` is the raw token of remapped item `id`.
    pub raw_items: Vec<String>,
}

impl InteractionCorpus {
    /// Builds a corpus from already-ordered per-user raw item tokens.
    pub fn from_sequences<U, I>(sequences: impl IntoIterator<Item = (U, Vec<I>)>) -> Self
    where
        U: ToString,
        I: ToString,
    {
        let mut vocab = Vocab::default();
        let mut users = Vec::new();
        let mut events = Vec::new();
        for (user, items) in sequences {
            users.push(user.to_string());
            events.push(
                items
                    .iter()
                    .enumerate()
                    .map(|(i, it)| Event {
                        item: vocab.intern(&it.to_string()),
                        timestamp: i as i64,
                    })
                    .collect(),
            );
        }
        InteractionCorpus {
            users,
            events,
            raw_items: vocab.raw,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.raw_items.len()
    }

    pub fn n_actions(&self) -> usize {
        self.events.iter().map(Vec::len).sum()
    }

    pub fn sequence(&self, user: usize) -> Vec<u32> {
        self.events[user].iter().map(|e| e.item).collect()
    }

    /// Stable content hash of the id-mapping table.
    pub fn vocab_hash(&self) -> String {
        vocab_hash(&self.raw_items)
    }

    /// Writes the id mapping as `remapped<TAB>raw` lines.
    pub fn write_id_map(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(f);
        for (i, raw) in self.raw_items.iter().enumerate() {
            writeln!(w, "{}\t{}", i + 1, raw).map_err(|e| Error::io("writing id map", e))?;
        }
        w.flush().map_err(|e| Error::io("writing id map", e))
    }
}

pub fn vocab_hash(raw_items: &[String]) -> String {
    let mut h = Sha256::new();
    for raw in raw_items {
        h.update(raw.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Reads an id map written by [`InteractionCorpus::write_id_map`].
pub fn read_id_map(path: &Path) -> Result<Vec<String>> {
    let f = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut raw = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io("reading id map", e))?;
        let (id, tok) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: n + 1,
            msg: "expected `id<TAB>raw`".into(),
        })?;
        let id: usize = id.parse().map_err(|_| Error::Parse {
            line: n + 1,
            msg: format!("bad id {id:?}"),
        })?;
        if id != raw.len() + 1 {
            return Err(Error::Parse {
                line: n + 1,
                msg: format!("ids must be contiguous, got {id} after {}", raw.len()),
            });
        }
        raw.push(tok.to_string());
    }
    Ok(raw)
}

#[derive(Default)]
struct Vocab {
    ids: HashMap<String, u32>,
    raw: Vec<String>,
}

impl Vocab {
    fn intern(&mut self, tok: &str) -> u32 {
        if let Some(&id) = self.ids.get(tok) {
            return id;
        }
        self.raw.push(tok.to_string());
        let id = self.raw.len() as u32;
        self.ids.insert(tok.to_string(), id);
        id
    }
}

pub fn load_interactions(path: &Path, opts: &LoadOptions) -> Result<InteractionCorpus> {
    let f = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_interactions(BufReader::new(f), opts)
}

struct RawRow {
    user: String,
    item: String,
    timestamp: i64,
}

/// Parses interaction rows from any reader. Blank lines are skipped.
pub fn parse_interactions(reader: impl BufRead, opts: &LoadOptions) -> Result<InteractionCorpus> {
    if opts.delimiter.is_empty() {
        return Err(Error::Config("delimiter must not be empty".into()));
    }
    let needed = opts
        .user_col
        .max(opts.item_col)
        .max(opts.time_col.unwrap_or(0))
        + 1;
    let mut rows = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading line {}", n + 1), e))?;
        if (n == 0 && opts.has_header) || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.trim_end_matches('\r').split(opts.delimiter.as_str()).collect();
        if cols.len() < needed {
            return Err(Error::Parse {
                line: n + 1,
                msg: format!("expected at least {needed} columns, found {}", cols.len()),
            });
        }
        let user = cols[opts.user_col].trim();
        let item = cols[opts.item_col].trim();
        if user.is_empty() || item.is_empty() {
            return Err(Error::Parse {
                line: n + 1,
                msg: "empty user or item field".into(),
            });
        }
        let timestamp = match opts.time_col {
            Some(c) => cols[c].trim().parse::<i64>().map_err(|_| Error::Parse {
                line: n + 1,
                msg: format!("timestamp {:?} is not an integer", cols[c].trim()),
            })?,
            None => rows.len() as i64,
        };
        rows.push(RawRow {
            user: user.to_string(),
            item: item.to_string(),
            timestamp,
        });
    }
    if rows.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    if opts.min_item_count > 1 {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for r in &rows {
            *counts.entry(r.item.as_str()).or_default() += 1;
        }
        let keep: Vec<bool> = rows
            .iter()
            .map(|r| counts[r.item.as_str()] >= opts.min_item_count)
            .collect();
        let mut it = keep.into_iter();
        rows.retain(|_| it.next().unwrap());
        if rows.is_empty() {
            return Err(Error::EmptyCorpus);
        }
    }

    let mut vocab = Vocab::default();
    let mut user_index: HashMap<String, usize> = HashMap::new();
    let mut users = Vec::new();
    let mut events: Vec<Vec<Event>> = Vec::new();
    for r in rows {
        let item = vocab.intern(&r.item);
        let u = *user_index.entry(r.user.clone()).or_insert_with(|| {
            users.push(r.user.clone());
            events.push(Vec::new());
            users.len() - 1
        });
        events[u].push(Event {
            item,
            timestamp: r.timestamp,
        });
    }
    // Stable: ties keep file order.
    for ev in &mut events {
        ev.sort_by_key(|e| e.timestamp);
    }
    Ok(InteractionCorpus {
        users,
        events,
        raw_items: vocab.raw,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// One (history, target trajectory) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryExample {
    pub user: String,
    pub split: Split,
    /// Exactly `n_max` ids, left-padded with [`PAD`].
    pub history: Vec<u32>,
    /// Exactly `k` ids, none of them [`PAD`].
    pub target: Vec<u32>,
}

impl TrajectoryExample {
    pub fn history_len(&self) -> usize {
        self.history.iter().filter(|&&i| i != PAD).count()
    }
}

/// Minimum raw sequence length (exclusive) for a user to be kept.
pub fn validity_threshold(k: usize) -> usize {
    1 + 3 * k
}

pub fn filter_and_split(
    corpus: &InteractionCorpus,
    k: usize,
    n_max: usize,
) -> Result<Vec<TrajectoryExample>> {
    if k == 0 || n_max == 0 {
        return Err(Error::Config(format!(
            "k and n_max must be positive (k={k}, n_max={n_max})"
        )));
    }
    let threshold = validity_threshold(k);
    let mut out = Vec::new();
    for (u, user) in corpus.users.iter().enumerate() {
        let seq = corpus.sequence(u);
        let len = seq.len();
        if len <= threshold {
            continue;
        }
        for (split, back) in [(Split::Train, 3), (Split::Valid, 2), (Split::Test, 1)] {
            let end = len - (back - 1) * k;
            let start = end - k;
            let hist = &seq[start.saturating_sub(n_max)..start];
            let mut history = vec![PAD; n_max - hist.len()];
            history.extend_from_slice(hist);
            out.push(TrajectoryExample {
                user: user.clone(),
                split,
                history,
                target: seq[start..end].to_vec(),
            });
        }
    }
    if out.is_empty() {
        return Err(Error::EmptySplit { threshold, k });
    }
    Ok(out)
}

/// Examples partitioned by split, each in user order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<TrajectoryExample>,
    pub valid: Vec<TrajectoryExample>,
    pub test: Vec<TrajectoryExample>,
}

impl Splits {
    pub fn from_examples(examples: Vec<TrajectoryExample>) -> Self {
        let mut s = Splits::default();
        for ex in examples {
            match ex.split {
                Split::Train => s.train.push(ex),
                Split::Valid => s.valid.push(ex),
                Split::Test => s.test.push(ex),
            }
        }
        s
    }

    pub fn get(&self, split: Split) -> &[TrajectoryExample] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &TrajectoryExample> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }
}

/// Dataset statistics before and after the validity filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub trajectory_length: usize,
    pub sequences_before: usize,
    pub sequences_after: usize,
    pub items: usize,
    pub actions: usize,
    pub average_length: f64,
}

impl DatasetStats {
    pub fn compute(corpus: &InteractionCorpus, splits: &Splits, k: usize) -> Self {
        let before = corpus.users.len();
        DatasetStats {
            trajectory_length: k,
            sequences_before: before,
            sequences_after: splits.test.len(),
            items: corpus.vocab_size(),
            actions: corpus.n_actions(),
            average_length: corpus.n_actions() as f64 / before.max(1) as f64,
        }
    }

    pub fn render(&self) -> String {
        format!(
            "trajectory length   {}\n# sequence (before)  {}\n# sequence (after)   {}\n# items             {}\n# actions           {}\naverage length      {:.2}\n",
            self.trajectory_length,
            self.sequences_before,
            self.sequences_after,
            self.items,
            self.actions,
            self.average_length
        )
    }
}

/// Writes the split manifest: one JSON record per line.
pub fn write_manifest(path: &Path, examples: &[TrajectoryExample]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(f);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n").map_err(|e| Error::io("writing manifest", e))?;
    }
    w.flush().map_err(|e| Error::io("writing manifest", e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<TrajectoryExample>> {
    let f = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io("reading manifest", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: n + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// A padded mini-batch in row-major flat layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub users: Vec<String>,
    /// `len * n_max` ids.
    pub history: Vec<u32>,
    /// `true` where `history` holds a real item.
    pub history_mask: Vec<bool>,
    /// `len * k` ids.
    pub target: Vec<u32>,
    pub n_max: usize,
    pub k: usize,
}

impl Batch {
    pub fn from_examples(examples: &[&TrajectoryExample]) -> Result<Self> {
        let first = examples
            .first()
            .ok_or_else(|| Error::Argument("cannot batch zero examples".into()))?;
        let (n_max, k) = (first.history.len(), first.target.len());
        let mut b = Batch {
            users: Vec::with_capacity(examples.len()),
            history: Vec::with_capacity(examples.len() * n_max),
            history_mask: Vec::with_capacity(examples.len() * n_max),
            target: Vec::with_capacity(examples.len() * k),
            n_max,
            k,
        };
        for ex in examples {
            if ex.history.len() != n_max || ex.target.len() != k {
                return Err(Error::Shape(format!(
                    "example for user {} has history {} / target {}, batch expects {n_max} / {k}",
                    ex.user,
                    ex.history.len(),
                    ex.target.len()
                )));
            }
            b.users.push(ex.user.clone());
            b.history.extend_from_slice(&ex.history);
            b.history_mask.extend(ex.history.iter().map(|&i| i != PAD));
            b.target.extend_from_slice(&ex.target);
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

/// Single-consumer iterator over one epoch of batches.
pub struct BatchIter<'a> {
    examples: &'a [TrajectoryExample],
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

pub fn batch_iterator(
    examples: &[TrajectoryExample],
    batch_size: usize,
    shuffle: bool,
    seed: u64,
) -> Result<BatchIter<'_>> {
    if batch_size < 1 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if examples.is_empty() {
        return Err(Error::Argument("no examples to batch".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(BatchIter {
        examples,
        order,
        batch_size,
        pos: 0,
    })
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let refs: Vec<&TrajectoryExample> = self.order[self.pos..end]
            .iter()
            .map(|&i| &self.examples[i])
            .collect();
        self.pos = end;
        // Examples out of one split always share n_max and k.
        Some(Batch::from_examples(&refs).expect("examples from one split share a shape"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tsv(rows: &str) -> Result<InteractionCorpus> {
        parse_interactions(rows.as_bytes(), &LoadOptions::new(Format::Tsv))
    }

    #[test]
    fn remaps_by_first_appearance() {
        let c = tsv("u1\ta\t1\nu1\tb\t2\nu1\ta\t3\n").unwrap();
        assert_eq!(c.vocab_size(), 2);
        assert_eq!(c.sequence(0), vec![1, 2, 1]);
        assert_eq!(c.raw_items, vec!["a", "b"]);
    }

    #[test]
    fn sorts_by_timestamp_with_stable_ties() {
        let c = tsv("u\tx\t30\nu\ty\t10\nu\tz\t20\nu\tw\t10\n").unwrap();
        let raw: Vec<&str> = c.sequence(0).iter().map(|&i| c.raw_items[i as usize - 1].as_str()).collect();
        assert_eq!(raw, vec!["y", "w", "z", "x"]);
    }

    #[test]
    fn malformed_row_names_line() {
        let err = tsv("u\ta\t1\nu\tb\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = tsv("u\ta\tnoon\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(tsv("").unwrap_err(), Error::EmptyCorpus));
        assert!(matches!(tsv("\n\n").unwrap_err(), Error::EmptyCorpus));
    }

    #[test]
    fn movielens_style_rows() {
        let opts = LoadOptions {
            delimiter: "::".into(),
            time_col: Some(3),
            ..LoadOptions::default()
        };
        let c = parse_interactions("1::1193::5::978300760\n1::661::3::978302109\n2::1193::4::978298413\n".as_bytes(), &opts).unwrap();
        assert_eq!(c.users, vec!["1", "2"]);
        assert_eq!(c.vocab_size(), 2);
        assert_eq!(c.sequence(1), vec![1]);
    }

    #[test]
    fn min_item_count_drops_rare_items() {
        let opts = LoadOptions {
            min_item_count: 2,
            ..LoadOptions::default()
        };
        let c = parse_interactions("u\ta\t1\nu\tb\t2\nv\ta\t1\n".as_bytes(), &opts).unwrap();
        assert_eq!(c.raw_items, vec!["a"]);
        assert_eq!(c.n_actions(), 2);
    }

    #[test]
    fn header_and_no_timestamp() {
        let opts = LoadOptions {
            delimiter: ",".into(),
            time_col: None,
            has_header: true,
            ..LoadOptions::default()
        };
        let c = parse_interactions("user,item\nu,b\nu,a\n".as_bytes(), &opts).unwrap();
        assert_eq!(c.raw_items, vec!["b", "a"]);
        assert_eq!(c.sequence(0), vec![1, 2]);
    }

    fn corpus_of_len(len: usize) -> InteractionCorpus {
        InteractionCorpus::from_sequences([("u", (1..=len).collect::<Vec<_>>())])
    }

    #[test]
    fn threshold_is_strict() {
        let k = 2;
        let err = filter_and_split(&corpus_of_len(1 + 3 * k), k, 50).unwrap_err();
        assert!(matches!(err, Error::EmptySplit { threshold: 7, k: 2 }));
        assert_eq!(filter_and_split(&corpus_of_len(2 + 3 * k), k, 50).unwrap().len(), 3);
    }

    #[test]
    fn split_windows_for_k2() {
        // Sequence 1..=8, k=2: train targets (3,4), valid (5,6), test (7,8).
        let ex = filter_and_split(&corpus_of_len(8), 2, 4).unwrap();
        assert_eq!(ex[0].split, Split::Train);
        assert_eq!(ex[0].target, vec![3, 4]);
        assert_eq!(ex[0].history, vec![0, 0, 1, 2]);
        assert_eq!(ex[1].split, Split::Valid);
        assert_eq!(ex[1].target, vec![5, 6]);
        assert_eq!(ex[1].history, vec![1, 2, 3, 4]);
        assert_eq!(ex[2].split, Split::Test);
        assert_eq!(ex[2].target, vec![7, 8]);
        assert_eq!(ex[2].history, vec![3, 4, 5, 6]);
    }

    #[test]
    fn zero_k_rejected() {
        assert!(matches!(filter_and_split(&corpus_of_len(9), 0, 5), Err(Error::Config(_))));
    }

    #[test]
    fn batch_sizes_and_order() {
        let c = InteractionCorpus::from_sequences((0..10).map(|u| (u, (0..9).map(|i| u * 100 + i).collect::<Vec<_>>())));
        let splits = Splits::from_examples(filter_and_split(&c, 2, 3).unwrap());
        let sizes: Vec<usize> = batch_iterator(&splits.test, 4, true, 1).unwrap().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);

        let users = |seed, shuffle| -> Vec<String> {
            batch_iterator(&splits.test, 4, shuffle, seed).unwrap().flat_map(|b| b.users).collect()
        };
        assert_eq!(users(7, true), users(7, true));
        let in_order: Vec<String> = splits.test.iter().map(|e| e.user.clone()).collect();
        assert_eq!(users(7, false), in_order);
        let mut shuffled = users(7, true);
        shuffled.sort();
        let mut sorted = in_order.clone();
        sorted.sort();
        assert_eq!(shuffled, sorted);
        assert!(matches!(batch_iterator(&splits.test, 0, false, 0), Err(Error::Config(_))));
    }

    #[test]
    fn batch_mask_marks_padding() {
        let ex = filter_and_split(&corpus_of_len(8), 2, 4).unwrap();
        let b = Batch::from_examples(&[&ex[0]]).unwrap();
        assert_eq!(b.history_mask, vec![false, false, true, true]);
    }

    #[test]
    fn id_map_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = tsv("u\tzz\t1\nu\t17\t2\nv\tq\t0\n").unwrap();
        let p = dir.path().join("ids.tsv");
        c.write_id_map(&p).unwrap();
        assert_eq!(read_id_map(&p).unwrap(), c.raw_items);
        assert_eq!(vocab_hash(&read_id_map(&p).unwrap()), c.vocab_hash());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ex = filter_and_split(&corpus_of_len(12), 3, 5).unwrap();
        let p = dir.path().join("splits.jsonl");
        write_manifest(&p, &ex).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), ex);
    }
}
