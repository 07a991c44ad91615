//! Linear noise schedule and the closed-form Gaussian algebra of the forward process.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Serializable schedule parameters, as stored in run manifests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Per-step `beta`, `alpha = 1 - beta` and cumulative `alpha_bar` tables.
///
/// Steps are 1-based. `alpha_bar(0) == 1`, so the last reverse step needs no
/// special case.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            let span = (beta_end - beta_start) / (steps - 1) as f64;
            (0..steps).map(|i| beta_start + span * i as f64).collect()
        };
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule {
            config: ScheduleConfig {
                steps,
                beta_start,
                beta_end,
            },
            betas,
            alpha_bars,
        })
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Signal-to-noise ratio `alpha_bar / (1 - alpha_bar)`.
    pub fn snr(&self, t: usize) -> f64 {
        let ab = self.alpha_bar(t);
        ab / (1.0 - ab)
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Index(format!(
                "diffusion step {t} outside [1, {}]",
                self.steps()
            )));
        }
        Ok(())
    }

    /// `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * noise`.
    pub fn q_sample(&self, x0: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
        self.check_step(t)?;
        same_shape(x0, noise)?;
        let ab = self.alpha_bar(t);
        Ok(((x0 * ab.sqrt())? + (noise * (1.0 - ab).sqrt())?)?)
    }

    /// [`q_sample`](Self::q_sample) with one step per leading-axis row.
    pub fn q_sample_batch(&self, x0: &Tensor, ts: &[usize], noise: &Tensor) -> Result<Tensor> {
        same_shape(x0, noise)?;
        if x0.dim(0)? != ts.len() {
            return Err(Error::Shape(format!(
                "{} step indices for batch of {}",
                ts.len(),
                x0.dim(0)?
            )));
        }
        for &t in ts {
            self.check_step(t)?;
        }
        let signal: Vec<f64> = ts.iter().map(|&t| self.alpha_bar(t).sqrt()).collect();
        let noise_scale: Vec<f64> = ts.iter().map(|&t| (1.0 - self.alpha_bar(t)).sqrt()).collect();
        let signal = per_row(&signal, x0)?;
        let noise_scale = per_row(&noise_scale, x0)?;
        Ok((x0.broadcast_mul(&signal)? + noise.broadcast_mul(&noise_scale)?)?)
    }

    /// One reverse update from step `t` to `t - 1` given the denoiser's estimate
    /// `x0_hat`: `sqrt(alpha_bar_{t-1}) * x0_hat + sqrt(1 - alpha_bar_{t-1}) * noise`.
    /// At `t == 1` the noise is ignored and `x0_hat` is returned.
    pub fn posterior_step(
        &self,
        x_t: &Tensor,
        x0_hat: &Tensor,
        t: usize,
        noise: &Tensor,
    ) -> Result<Tensor> {
        self.check_step(t)?;
        same_shape(x_t, x0_hat)?;
        self.step_to(x0_hat, t - 1, noise)
    }

    /// Re-noises `x0_hat` to an arbitrary earlier step; used for strided sampling.
    pub fn step_to(&self, x0_hat: &Tensor, t_prev: usize, noise: &Tensor) -> Result<Tensor> {
        if t_prev > self.steps() {
            return Err(Error::Index(format!("step {t_prev} beyond schedule")));
        }
        if t_prev == 0 {
            return Ok(x0_hat.clone());
        }
        same_shape(x0_hat, noise)?;
        let ab = self.alpha_bar(t_prev);
        Ok(((x0_hat * ab.sqrt())? + (noise * (1.0 - ab).sqrt())?)?)
    }

    /// Evenly strided, strictly decreasing subset of `1..=T` of length `n_steps`,
    /// always starting at `T`.
    pub fn inference_timesteps(&self, n_steps: usize) -> Result<Vec<usize>> {
        let t_max = self.steps();
        if n_steps == 0 || n_steps > t_max {
            return Err(Error::Config(format!(
                "inference steps must be in [1, {t_max}], got {n_steps}"
            )));
        }
        Ok((0..n_steps)
            .map(|i| ((n_steps - i) * t_max).div_ceil(n_steps))
            .collect())
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Column of per-row coefficients broadcastable against `like`.
fn per_row(values: &[f64], like: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1usize; like.rank()];
    shape[0] = values.len();
    Ok(Tensor::from_slice(values, shape, like.device())?.to_dtype(like.dtype())?)
}
