//! Training objectives: latent reconstruction, the output-norm regularizer,
//! Soft-ListMLE and the listwise trajectory loss built on it.
//!
//! For a ranking `pi` over a candidate set `C`, Soft-ListMLE is
//!
//! ```text
//! -sum_r log( exp(s[pi_r]) / ((1 - gamma) * Z_r + gamma * Z) )
//! ```
//!
//! where `Z_r` sums `exp(s)` over `C` minus the items ranked before `r`, and `Z`
//! sums over all of `C`. `gamma = 0` is the Plackett-Luce likelihood; `gamma = 1`
//! is a sum of independent softmax cross-entropies.
//!
//! The trajectory loss applies this per position: position `j` of a trajectory
//! scores every item with its own score vector, and its denominator excludes the
//! ground-truth items of positions `1..j`.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Share of the reconstruction term; the listwise term gets `1 - lambda`.
    pub lambda: f64,
    /// Softening of the exclusion denominators.
    pub gamma: f64,
    pub reg_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.1,
            gamma: 0.3,
            reg_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} not in [0, 1]", self.lambda)));
        }
        check_gamma(self.gamma)?;
        if self.reg_weight.is_nan() || self.reg_weight < 0.0 {
            return Err(Error::Config(format!("reg_weight {} is negative", self.reg_weight)));
        }
        Ok(())
    }

    /// Weighted total of whichever components are present; `None` drops a term.
    pub fn combine(&self, simple: Option<&Tensor>, list_pref: Option<&Tensor>, reg: Option<&Tensor>) -> Result<Tensor> {
        let terms: Vec<Tensor> = [
            simple.map(|t| t * self.lambda),
            list_pref.map(|t| t * (1.0 - self.lambda)),
            reg.map(|t| t * self.reg_weight),
        ]
        .into_iter()
        .flatten()
        .collect::<std::result::Result<_, _>>()?;
        let mut it = terms.into_iter();
        let first = it
            .next()
            .ok_or_else(|| Error::Config("every loss component is disabled".into()))?;
        it.try_fold(first, |acc, t| Ok((acc + t)?))
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("gamma {gamma} not in [0, 1]")));
    }
    Ok(())
}

/// `lambda * simple + (1 - lambda) * list_pref + reg_weight * reg`.
pub fn lpdo_loss(simple: f64, list_pref: f64, reg: f64, weights: &LossWeights) -> f64 {
    weights.lambda * simple + (1.0 - weights.lambda) * list_pref + weights.reg_weight * reg
}

fn position_weights(mask: &[bool], like: &Tensor) -> Result<(Tensor, usize)> {
    let (b, len) = (like.dim(0)?, like.dim(1)?);
    if mask.len() != b * len {
        return Err(Error::Shape(format!(
            "mask of {} entries for {b}x{len} positions",
            mask.len()
        )));
    }
    let live = mask.iter().filter(|&&m| m).count();
    if live == 0 {
        return Err(Error::Argument("every position is masked; mean is undefined".into()));
    }
    let w: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let w = Tensor::from_vec(w, (b, len, 1), like.device())?.to_dtype(like.dtype())?;
    Ok((w, live))
}

/// Mean squared error over unmasked `(batch, position)` slots and all dimensions.
/// Inputs are `(B, L, d)`; `mask` has `B * L` entries.
pub fn simple_loss(predicted: &Tensor, target: &Tensor, mask: &[bool]) -> Result<Tensor> {
    if predicted.dims() != target.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", predicted.dims(), target.dims())));
    }
    let (w, live) = position_weights(mask, predicted)?;
    let d = predicted.dim(D::Minus1)?;
    let sq = (predicted - target)?.sqr()?.broadcast_mul(&w)?;
    Ok((sq.sum_all()? / (live * d) as f64)?)
}

/// Mean of squared denoiser outputs over unmasked slots; a single-step
/// estimate of the prior-matching norm penalty.
pub fn reg_loss(predicted: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    match mask {
        None => Ok(predicted.sqr()?.mean_all()?),
        Some(mask) => {
            let (w, live) = position_weights(mask, predicted)?;
            let d = predicted.dim(D::Minus1)?;
            Ok((predicted.sqr()?.broadcast_mul(&w)?.sum_all()? / (live * d) as f64)?)
        }
    }
}

/// Per-position item scores with their ground-truth trajectory.
#[derive(Debug, Clone)]
pub struct RankingScores {
    /// `(B, k, M)`; column `i` scores item id `i + 1`.
    pub scores: Tensor,
    /// `B * k` item ids in `1..=M`.
    pub targets: Vec<u32>,
}

impl RankingScores {
    pub fn new(scores: Tensor, targets: Vec<u32>) -> Result<Self> {
        let (b, k, m) = scores.dims3()?;
        if targets.len() != b * k {
            return Err(Error::Shape(format!("{} targets for {b}x{k} positions", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t == 0 || t as usize > m) {
            return Err(Error::Vocabulary { id: bad, vocab_size: m });
        }
        Ok(RankingScores { scores, targets })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.scores.dims3().expect("validated in new")
    }

    /// `(B, k, M)` flags: item `i` at position `j` is a ground truth of an earlier
    /// position (each id at most once) and is not position `j`'s own target.
    fn exclusions(&self) -> Vec<f64> {
        let (b, k, m) = self.dims();
        let mut out = vec![0.0; b * k * m];
        for row in 0..b {
            let tgt = &self.targets[row * k..(row + 1) * k];
            for j in 0..k {
                let base = (row * k + j) * m;
                for &prev in &tgt[..j] {
                    if prev != tgt[j] {
                        out[base + prev as usize - 1] = 1.0;
                    }
                }
            }
        }
        out
    }
}

/// Batch mean of the per-trajectory listwise loss.
pub fn list_pref_loss(ranking: &RankingScores, gamma: f64) -> Result<Tensor> {
    check_gamma(gamma)?;
    let (b, k, m) = ranking.dims();
    let s = &ranking.scores;
    let dev = s.device();
    // Excluded items keep weight gamma; ln 0 becomes a large finite negative so
    // the weighted log-sum-exp never subtracts nearly equal sums.
    let floor = match s.dtype() {
        DType::F64 => -1e300,
        _ => -1e30,
    };
    let log_w: Vec<f64> = ranking
        .exclusions()
        .into_iter()
        .map(|x| if x == 0.0 { 0.0 } else if gamma > 0.0 { gamma.ln() } else { floor })
        .collect();
    let log_w = Tensor::from_vec(log_w, (b, k, m), dev)?.to_dtype(s.dtype())?;
    let idx: Vec<u32> = ranking.targets.iter().map(|&t| t - 1).collect();
    let idx = Tensor::from_vec(idx, (b, k, 1), dev)?;

    let weighted = (s + log_w)?;
    let shift = weighted.max_keepdim(D::Minus1)?.detach();
    let lse = weighted.broadcast_sub(&shift)?.exp()?.sum(D::Minus1)?.log()?;
    let numer = s.broadcast_sub(&shift)?.gather(&idx, D::Minus1)?.squeeze(D::Minus1)?;
    let per_pos = (lse - numer)?;
    Ok((per_pos.sum_all()? / b as f64)?)
}

/// Reference per-position Soft-ListMLE on plain slices: `rows[j]` scores the
/// candidates for rank `j`, `ranking[j]` indexes the chosen candidate.
///
/// Repeated candidates are excluded from later denominators once and never from
/// their own rank's denominator.
pub fn positional_soft_listmle(rows: &[&[f64]], ranking: &[usize], gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    if rows.len() != ranking.len() {
        return Err(Error::Shape(format!("{} score rows for {} ranks", rows.len(), ranking.len())));
    }
    let mut loss = 0.0;
    for (r, (row, &pick)) in rows.iter().zip(ranking).enumerate() {
        if pick >= row.len() {
            return Err(Error::Index(format!("rank {r} picks {pick} of {} candidates", row.len())));
        }
        let mut weight = vec![1.0; row.len()];
        for &prev in &ranking[..r] {
            if prev != pick {
                weight[prev] = gamma;
            }
        }
        let shift = row
            .iter()
            .zip(&weight)
            .filter(|(_, &w)| w > 0.0)
            .map(|(s, w)| s + w.ln())
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().zip(&weight).map(|(s, w)| w * (s - shift).exp()).sum();
        loss += denom.ln() - (row[pick] - shift);
    }
    Ok(loss)
}

fn check_distinct(ranking: &[usize], n: usize) -> Result<()> {
    if ranking.len() > n {
        return Err(Error::Argument(format!("ranking of {} over {n} candidates", ranking.len())));
    }
    for (i, a) in ranking.iter().enumerate() {
        if ranking[..i].contains(a) {
            return Err(Error::Argument(format!("candidate {a} ranked twice")));
        }
    }
    Ok(())
}

/// Soft-ListMLE of one score vector over the candidate set; `ranking` lists
/// distinct candidate indices, best first.
pub fn soft_listmle(scores: &[f64], ranking: &[usize], gamma: f64) -> Result<f64> {
    check_distinct(ranking, scores.len())?;
    let rows = vec![scores; ranking.len()];
    positional_soft_listmle(&rows, ranking, gamma)
}

/// Analytic gradient of [`soft_listmle`] with respect to `scores`:
/// `dL/ds_i = sum_r (w_ri * exp(s_i) / D_r - [i == pi_r])` with `w_ri = 1` for
/// items still in the pool at rank `r` and `gamma` otherwise.
pub fn soft_listmle_grad(scores: &[f64], ranking: &[usize], gamma: f64) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    check_distinct(ranking, scores.len())?;
    let shift = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - shift).exp()).collect();
    let mut grad = vec![0.0; scores.len()];
    let mut in_pool = vec![true; scores.len()];
    for &pick in ranking {
        let w: Vec<f64> = in_pool.iter().map(|&p| if p { 1.0 } else { gamma }).collect();
        let denom: f64 = w.iter().zip(&e).map(|(w, e)| w * e).sum();
        for i in 0..scores.len() {
            grad[i] += w[i] * e[i] / denom;
        }
        grad[pick] -= 1.0;
        in_pool[pick] = false;
    }
    Ok(grad)
}

/// Scalar value of a 0-d loss tensor.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
