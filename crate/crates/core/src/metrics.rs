//! Trajectory metrics: position-wise HR/NDCG, their arithmetic (Mean) and
//! geometric (Seq) means over positions, SeqMatch and perplexity.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn rank_of(target: u32, ranked: &[u32], cutoff: usize) -> Option<usize> {
    ranked.iter().take(cutoff).position(|&i| i == target).map(|p| p + 1)
}

/// 1 iff `target` is among the first `cutoff` entries of `ranked`.
pub fn position_hit(target: u32, ranked: &[u32], cutoff: usize) -> u8 {
    rank_of(target, ranked, cutoff).is_some() as u8
}

/// `1 / log2(rank + 1)` when the target ranks within `cutoff`, else 0.
pub fn position_ndcg(target: u32, ranked: &[u32], cutoff: usize) -> f64 {
    rank_of(target, ranked, cutoff).map_or(0.0, |r| 1.0 / ((r + 1) as f64).log2())
}

/// 1 iff every position's target appears in that position's top-`cutoff` list.
pub fn seq_match<L: AsRef<[u32]>>(targets: &[u32], lists: &[L], cutoff: usize) -> Result<u8> {
    if targets.len() != lists.len() {
        return Err(Error::Argument(format!(
            "{} targets but {} candidate lists",
            targets.len(),
            lists.len()
        )));
    }
    Ok(targets
        .iter()
        .zip(lists)
        .all(|(&t, l)| position_hit(t, l.as_ref(), cutoff) == 1) as u8)
}

/// Arithmetic and geometric mean of per-position rates.
pub fn aggregate(rates: &[f64]) -> Result<(f64, f64)> {
    if rates.is_empty() {
        return Err(Error::Argument("no positions to aggregate".into()));
    }
    let n = rates.len() as f64;
    let mean = rates.iter().sum::<f64>() / n;
    let geo = if rates.iter().any(|&r| r == 0.0) {
        0.0
    } else {
        (rates.iter().map(|r| r.ln()).sum::<f64>() / n).exp()
    };
    Ok((mean, geo))
}

/// Negative log softmax probability of `target` (0-based column) under `scores`.
pub fn nll(scores: &[f64], target: usize) -> Result<f64> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("score vector has non-finite entries".into()));
    }
    let shift = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = scores.iter().map(|s| (s - shift).exp()).sum::<f64>().ln() + shift;
    Ok(lse - scores[target])
}

/// `(exp(mean NLL), mean NLL)` over rows of full-vocabulary scores.
pub fn perplexity<R: AsRef<[f64]>>(rows: &[R], targets: &[usize]) -> Result<(f64, f64)> {
    if rows.len() != targets.len() || rows.is_empty() {
        return Err(Error::Argument(format!(
            "{} score rows for {} targets",
            rows.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (row, &t) in rows.iter().zip(targets) {
        total += nll(row.as_ref(), t)?;
    }
    let ln_ppl = total / rows.len() as f64;
    Ok((ln_ppl.exp(), ln_ppl))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cutoffs: Vec<usize>,
    /// `[cutoff][position]`.
    pub per_position_hr: Vec<Vec<f64>>,
    pub per_position_ndcg: Vec<Vec<f64>>,
    pub mean_hr: Vec<f64>,
    pub seq_hr: Vec<f64>,
    pub mean_ndcg: Vec<f64>,
    pub seq_ndcg: Vec<f64>,
    pub seq_match: Vec<f64>,
    pub ppl: f64,
    pub ln_ppl: f64,
    pub n_examples: usize,
}

/// One line of the machine-readable report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub cutoff: usize,
    pub mean_hr: f64,
    pub seq_hr: f64,
    pub mean_ndcg: f64,
    pub seq_ndcg: f64,
    pub seq_match: f64,
    pub ppl: f64,
    pub ln_ppl: f64,
    pub n_examples: usize,
    pub per_position_hr: Vec<f64>,
}

impl EvalReport {
    fn index(&self, cutoff: usize) -> Option<usize> {
        self.cutoffs.iter().position(|&c| c == cutoff)
    }

    pub fn seq_ndcg_at(&self, cutoff: usize) -> Option<f64> {
        self.index(cutoff).map(|i| self.seq_ndcg[i])
    }

    pub fn seq_hr_at(&self, cutoff: usize) -> Option<f64> {
        self.index(cutoff).map(|i| self.seq_hr[i])
    }

    pub fn seq_match_at(&self, cutoff: usize) -> Option<f64> {
        self.index(cutoff).map(|i| self.seq_match[i])
    }

    pub fn records(&self) -> Vec<ReportRecord> {
        self.cutoffs
            .iter()
            .enumerate()
            .map(|(i, &cutoff)| ReportRecord {
                cutoff,
                mean_hr: self.mean_hr[i],
                seq_hr: self.seq_hr[i],
                mean_ndcg: self.mean_ndcg[i],
                seq_ndcg: self.seq_ndcg[i],
                seq_match: self.seq_match[i],
                ppl: self.ppl,
                ln_ppl: self.ln_ppl,
                n_examples: self.n_examples,
                per_position_hr: self.per_position_hr[i].clone(),
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in self.records() {
            out.push_str(&serde_json::to_string(&r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>6} {:>9} {:>9} {:>10} {:>10} {:>10}",
            "K", "MeanHR", "SeqHR", "MeanNDCG", "SeqNDCG", "SeqMatch"
        );
        for r in self.records() {
            let _ = writeln!(
                s,
                "{:>6} {:>9.4} {:>9.4} {:>10.4} {:>10.4} {:>10.4}",
                r.cutoff, r.mean_hr, r.seq_hr, r.mean_ndcg, r.seq_ndcg, r.seq_match
            );
        }
        let _ = writeln!(s, "PPL {:.4}  ln(PPL) {:.4}  n={}", self.ppl, self.ln_ppl, self.n_examples);
        s
    }

    /// Position-wise HR curves: header `position,HR@K1,HR@K2,...`.
    pub fn position_hr_csv(&self) -> String {
        let mut s = String::from("position");
        for c in &self.cutoffs {
            let _ = write!(s, ",HR@{c}");
        }
        s.push('\n');
        let k = self.per_position_hr.first().map_or(0, Vec::len);
        for j in 0..k {
            let _ = write!(s, "{}", j + 1);
            for row in &self.per_position_hr {
                let _ = write!(s, ",{:.6}", row[j]);
            }
            s.push('\n');
        }
        s
    }
}

/// Streaming accumulator of per-example hits, NDCG gains and likelihoods.
#[derive(Debug, Clone)]
pub struct EvalAccumulator {
    cutoffs: Vec<usize>,
    k: usize,
    hits: Vec<Vec<u64>>,
    gains: Vec<Vec<f64>>,
    matches: Vec<u64>,
    nll_sum: f64,
    nll_count: usize,
    n: usize,
}

impl EvalAccumulator {
    pub fn new(cutoffs: &[usize], k: usize) -> Result<Self> {
        if cutoffs.is_empty() || cutoffs.contains(&0) || k == 0 {
            return Err(Error::Config("cutoffs and trajectory length must be positive".into()));
        }
        Ok(EvalAccumulator {
            cutoffs: cutoffs.to_vec(),
            k,
            hits: vec![vec![0; k]; cutoffs.len()],
            gains: vec![vec![0.0; k]; cutoffs.len()],
            matches: vec![0; cutoffs.len()],
            nll_sum: 0.0,
            nll_count: 0,
            n: 0,
        })
    }

    pub fn max_cutoff(&self) -> usize {
        self.cutoffs.iter().copied().max().unwrap_or(0)
    }

    /// Adds one example: its `k` targets and `k` ranked lists (best first).
    pub fn add<L: AsRef<[u32]>>(&mut self, targets: &[u32], lists: &[L]) -> Result<()> {
        if targets.len() != self.k || lists.len() != self.k {
            return Err(Error::Argument(format!(
                "expected {} positions, got {} targets / {} lists",
                self.k,
                targets.len(),
                lists.len()
            )));
        }
        for (c, &cutoff) in self.cutoffs.iter().enumerate() {
            for (j, (&t, l)) in targets.iter().zip(lists).enumerate() {
                self.hits[c][j] += position_hit(t, l.as_ref(), cutoff) as u64;
                self.gains[c][j] += position_ndcg(t, l.as_ref(), cutoff);
            }
            self.matches[c] += seq_match(targets, lists, cutoff)? as u64;
        }
        self.n += 1;
        Ok(())
    }

    /// Adds the full-vocabulary scores of one position (`targets` 0-based).
    pub fn add_likelihood(&mut self, scores: &[f64], target: usize) -> Result<()> {
        self.nll_sum += nll(scores, target)?;
        self.nll_count += 1;
        Ok(())
    }

    pub fn finish(&self) -> Result<EvalReport> {
        if self.n == 0 {
            return Err(Error::Argument("no examples evaluated".into()));
        }
        let n = self.n as f64;
        let per_position_hr: Vec<Vec<f64>> =
            self.hits.iter().map(|r| r.iter().map(|&h| h as f64 / n).collect()).collect();
        let per_position_ndcg: Vec<Vec<f64>> =
            self.gains.iter().map(|r| r.iter().map(|g| g / n).collect()).collect();
        let (mut mean_hr, mut seq_hr, mut mean_ndcg, mut seq_ndcg) = (vec![], vec![], vec![], vec![]);
        for c in 0..self.cutoffs.len() {
            let (m, g) = aggregate(&per_position_hr[c])?;
            mean_hr.push(m);
            seq_hr.push(g);
            let (m, g) = aggregate(&per_position_ndcg[c])?;
            mean_ndcg.push(m);
            seq_ndcg.push(g);
        }
        let (ppl, ln_ppl) = if self.nll_count > 0 {
            let ln = self.nll_sum / self.nll_count as f64;
            (ln.exp(), ln)
        } else {
            (f64::NAN, f64::NAN)
        };
        Ok(EvalReport {
            cutoffs: self.cutoffs.clone(),
            per_position_hr,
            per_position_ndcg,
            mean_hr,
            seq_hr,
            mean_ndcg,
            seq_ndcg,
            seq_match: self.matches.iter().map(|&m| m as f64 / n).collect(),
            ppl,
            ln_ppl,
            n_examples: self.n,
        })
    }
}
