//! Listwise preference diffusion for multi-step user behavior trajectory prediction.
//!
//! A user's history and the next `k` items are embedded and concatenated into one
//! latent sequence, noised by a linear-schedule forward process, and denoised by a
//! transformer conditioned on the clean history. Denoised trajectory slots score
//! the item vocabulary; training mixes latent reconstruction with a listwise
//! Plackett-Luce objective over the ground-truth trajectory.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod sampler;
pub mod schedule;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
