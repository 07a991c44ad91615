//! The preference causal transformer: denoises the concatenated
//! `[history | trajectory]` latent, conditioned on the clean history through
//! cross-attention, and scores items against denoised trajectory slots.

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::Linear;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Batch;
use crate::error::{Error, Result};
use crate::params::ParamStore;

const MASKED: f64 = -1e9;

/// Attention pattern over the `n_max + k` token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Token `p` sees tokens `<= p`.
    Causal,
    /// Bidirectional among history slots, causal over trajectory slots.
    Prefix,
    Bidirectional,
}

impl std::str::FromStr for MaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "causal" => Ok(MaskMode::Causal),
            "prefix" => Ok(MaskMode::Prefix),
            "bidirectional" => Ok(MaskMode::Bidirectional),
            other => Err(Error::Config(format!("unknown mask mode {other:?}"))),
        }
    }
}

impl MaskMode {
    fn allows(self, query: usize, key: usize, n_max: usize) -> bool {
        match self {
            MaskMode::Causal => key <= query,
            MaskMode::Bidirectional => true,
            MaskMode::Prefix if query < n_max => key < n_max,
            MaskMode::Prefix => key <= query,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub mask_mode: MaskMode,
    pub n_max: usize,
    pub k: usize,
    /// Number of real items `M`; the embedding table has `M + 1` rows.
    pub vocab_size: usize,
    /// Score with cosine similarity instead of the inner product.
    pub cosine_scoring: bool,
    /// Standard deviation of the item-embedding initialization.
    pub init_std: f64,
    pub precision: Precision,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            embed_dim: 128,
            n_blocks: 4,
            n_heads: 4,
            dropout: 0.1,
            mask_mode: MaskMode::Causal,
            n_max: 50,
            k: 5,
            vocab_size: 1,
            cosine_scoring: false,
            init_std: 0.1,
            precision: Precision::F32,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let d = self.embed_dim;
        if d == 0 || self.n_heads == 0 || d % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {d} must be a positive multiple of n_heads {}",
                self.n_heads
            )));
        }
        if self.n_blocks == 0 || self.k == 0 || self.n_max == 0 || self.vocab_size == 0 {
            return Err(Error::Config(
                "n_blocks, k, n_max and vocab_size must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if self.init_std.is_nan() || self.init_std <= 0.0 {
            return Err(Error::Config("init_std must be positive".into()));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.n_max + self.k
    }
}

/// Noised latents for one denoiser call.
#[derive(Debug, Clone)]
pub struct LatentBatch {
    /// `(batch, n_max + k, d)`.
    pub x_t: Tensor,
    /// Diffusion step per example.
    pub t: Vec<usize>,
    /// `(batch * n_max)` flags, `true` for real history items.
    pub history_mask: Vec<bool>,
    /// Index of the first trajectory slot.
    pub n_max: usize,
}

/// A network that predicts clean latents from noised ones.
pub trait Denoise {
    fn config(&self) -> &DenoiserConfig;

    /// Item embedding table, `(M + 1, d)`; row 0 is padding.
    fn item_table(&self) -> &Tensor;

    /// Evaluation-mode prediction of `X_0`, same shape as `latent.x_t`.
    fn denoise(&self, latent: &LatentBatch, history: &Tensor) -> Result<Tensor>;
}

/// Sinusoidal embedding of a diffusion step: component `2i` is
/// `sin(t / 10000^(2i/d))`, component `2i + 1` the matching cosine.
pub fn sinusoidal_time_embedding(t: f64, d: usize) -> Vec<f64> {
    (0..d)
        .map(|c| {
            let freq = 10000f64.powf(-((c / 2 * 2) as f64) / d as f64);
            if c % 2 == 0 {
                (t * freq).sin()
            } else {
                (t * freq).cos()
            }
        })
        .collect()
}

/// Looks up `(history, target)` latents for a batch: `(B, n_max, d)` and `(B, k, d)`.
pub fn embed_examples(batch: &Batch, table: &Tensor) -> Result<(Tensor, Tensor)> {
    let rows = table.dim(0)?;
    let d = table.dim(1)?;
    for &id in batch.history.iter().chain(&batch.target) {
        if id as usize >= rows {
            return Err(Error::Vocabulary {
                id,
                vocab_size: rows - 1,
            });
        }
    }
    let lookup = |ids: &[u32], width: usize| -> Result<Tensor> {
        let idx = Tensor::from_slice(ids, ids.len(), table.device())?;
        Ok(table.index_select(&idx, 0)?.reshape((batch.len(), width, d))?)
    };
    Ok((lookup(&batch.history, batch.n_max)?, lookup(&batch.target, batch.k)?))
}

/// Scores every real item against each trajectory latent: `(B, k, d) -> (B, k, M)`.
/// The padding row is never scored.
pub fn score_items(latents: &Tensor, table: &Tensor, cosine: bool) -> Result<Tensor> {
    let m = table.dim(0)? - 1;
    let items = table.narrow(0, 1, m)?;
    if cosine {
        let items = l2_normalize(&items)?;
        let latents = l2_normalize(latents)?;
        Ok(latents.broadcast_matmul(&items.t()?)?)
    } else {
        Ok(latents.broadcast_matmul(&items.t()?)?)
    }
}

fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = t.abs()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !s.is_finite() {
        return Err(Error::Numeric(format!("{what} contains NaN or infinite entries")));
    }
    Ok(())
}

struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    fn new(params: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            weight: params.constant(&format!("{name}.weight"), &[d], 1.0)?,
            bias: params.constant(&format!("{name}.bias"), &[d], 0.0)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

fn linear(params: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Result<Linear> {
    let w = params.normal(&format!("{name}.weight"), &[d_out, d_in], 1.0 / (d_in as f64).sqrt(), rng)?;
    let b = params.constant(&format!("{name}.bias"), &[d_out], 0.0)?;
    Ok(Linear::new(w, Some(b)))
}

/// Inverted dropout driven by an explicit RNG.
fn dropout(x: &Tensor, p: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
    match rng {
        Some(rng) if p > 0.0 => {
            let keep = 1.0 / (1.0 - p);
            let mask: Vec<f64> = (0..x.elem_count())
                .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                .collect();
            let mask = Tensor::from_vec(mask, x.dims(), x.device())?.to_dtype(x.dtype())?;
            Ok((x * mask)?)
        }
        _ => Ok(x.clone()),
    }
}

struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    n_heads: usize,
}

impl Attention {
    fn new(params: &mut ParamStore, name: &str, d: usize, n_heads: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Attention {
            q: linear(params, &format!("{name}.q"), d, d, rng)?,
            k: linear(params, &format!("{name}.k"), d, d, rng)?,
            v: linear(params, &format!("{name}.v"), d, d, rng)?,
            o: linear(params, &format!("{name}.o"), d, d, rng)?,
            n_heads,
        })
    }

    /// `mask` is additive, `(B, 1, Lq, Lk)`.
    fn forward(
        &self,
        queries: &Tensor,
        keys: &Tensor,
        mask: &Tensor,
        p_drop: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor> {
        let (b, lq, d) = queries.dims3()?;
        let lk = keys.dim(1)?;
        let dh = d / self.n_heads;
        let heads = |x: Tensor, len: usize| -> Result<Tensor> {
            Ok(x.reshape((b, len, self.n_heads, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = heads(self.q.forward(queries)?, lq)?;
        let k = heads(self.k.forward(keys)?, lk)?;
        let v = heads(self.v.forward(keys)?, lk)?;
        let logits = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (dh as f64).sqrt()))?;
        let weights = candle_nn::ops::softmax(&logits.broadcast_add(mask)?, D::Minus1)?;
        let weights = dropout(&weights, p_drop, rng)?;
        let out = weights.matmul(&v)?.transpose(1, 2)?.reshape((b, lq, d))?;
        Ok(self.o.forward(&out)?)
    }
}

struct Block {
    norm_self: LayerNorm,
    self_attn: Attention,
    norm_cross: LayerNorm,
    cross_attn: Attention,
    norm_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

impl Block {
    fn new(params: &mut ParamStore, name: &str, cfg: &DenoiserConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.embed_dim;
        Ok(Block {
            norm_self: LayerNorm::new(params, &format!("{name}.norm_self"), d)?,
            self_attn: Attention::new(params, &format!("{name}.self_attn"), d, cfg.n_heads, rng)?,
            norm_cross: LayerNorm::new(params, &format!("{name}.norm_cross"), d)?,
            cross_attn: Attention::new(params, &format!("{name}.cross_attn"), d, cfg.n_heads, rng)?,
            norm_ff: LayerNorm::new(params, &format!("{name}.norm_ff"), d)?,
            ff_in: linear(params, &format!("{name}.ff_in"), d, 4 * d, rng)?,
            ff_out: linear(params, &format!("{name}.ff_out"), 4 * d, d, rng)?,
        })
    }

    fn forward(
        &self,
        x: &Tensor,
        history: &Tensor,
        masks: &Masks,
        p: f64,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor> {
        let h = self.norm_self.forward(x)?;
        let h = self.self_attn.forward(&h, &h, &masks.self_attn, p, rng.as_deref_mut())?;
        let x = (x + dropout(&h, p, rng.as_deref_mut())?)?;

        let h = self.norm_cross.forward(&x)?;
        let h = self.cross_attn.forward(&h, history, &masks.cross_attn, p, rng.as_deref_mut())?;
        let x = (x + dropout(&h, p, rng.as_deref_mut())?)?;

        let h = self.ff_out.forward(&self.ff_in.forward(&self.norm_ff.forward(&x)?)?.gelu()?)?;
        Ok((x + dropout(&h, p, rng)?)?)
    }
}

struct Masks {
    self_attn: Tensor,
    cross_attn: Tensor,
}

/// Transformer denoiser with learned item, position and step embeddings.
pub struct PreferenceTransformer {
    cfg: DenoiserConfig,
    params: ParamStore,
    item_emb: Tensor,
    pos_emb: Tensor,
    time_in: Linear,
    time_out: Linear,
    blocks: Vec<Block>,
    norm_out: LayerNorm,
    out: Linear,
}

impl PreferenceTransformer {
    pub fn new(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new(cfg.precision.dtype(), Device::Cpu);
        let d = cfg.embed_dim;
        let item_emb = params.normal("item_emb", &[cfg.vocab_size + 1, d], cfg.init_std, &mut rng)?;
        let pos_emb = params.normal("pos_emb", &[cfg.seq_len(), d], 0.1, &mut rng)?;
        let time_in = linear(&mut params, "time.in", d, d, &mut rng)?;
        let time_out = linear(&mut params, "time.out", d, d, &mut rng)?;
        let blocks = (0..cfg.n_blocks)
            .map(|i| Block::new(&mut params, &format!("block{i}"), &cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let norm_out = LayerNorm::new(&mut params, "norm_out", d)?;
        let out = linear(&mut params, "out", d, d, &mut rng)?;
        Ok(PreferenceTransformer {
            cfg,
            params,
            item_emb,
            pos_emb,
            time_in,
            time_out,
            blocks,
            norm_out,
            out,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    /// Training-mode forward pass with dropout drawn from `rng`.
    pub fn denoise_train(&self, latent: &LatentBatch, history: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        self.forward(latent, history, Some(rng))
    }

    fn time_embedding(&self, ts: &[usize]) -> Result<Tensor> {
        let d = self.cfg.embed_dim;
        let flat: Vec<f64> = ts.iter().flat_map(|&t| sinusoidal_time_embedding(t as f64, d)).collect();
        let raw = Tensor::from_vec(flat, (ts.len(), d), self.device())?.to_dtype(self.dtype())?;
        let h = self.time_in.forward(&raw)?.silu()?;
        Ok(self.time_out.forward(&h)?)
    }

    fn masks(&self, batch: usize, history_mask: &[bool]) -> Result<Masks> {
        let (n_max, len) = (self.cfg.n_max, self.cfg.seq_len());
        let mut self_mask = Vec::with_capacity(batch * len * len);
        let mut cross_mask = Vec::with_capacity(batch * len * n_max);
        for b in 0..batch {
            let real = &history_mask[b * n_max..(b + 1) * n_max];
            for q in 0..len {
                for k in 0..len {
                    let key_live = k >= n_max || real[k] || k == q;
                    let ok = key_live && self.cfg.mask_mode.allows(q, k, n_max);
                    self_mask.push(if ok { 0.0 } else { MASKED });
                }
                cross_mask.extend(real.iter().map(|&r| if r { 0.0 } else { MASKED }));
            }
        }
        let dev = self.device();
        Ok(Masks {
            self_attn: Tensor::from_vec(self_mask, (batch, 1, len, len), dev)?.to_dtype(self.dtype())?,
            cross_attn: Tensor::from_vec(cross_mask, (batch, 1, len, n_max), dev)?.to_dtype(self.dtype())?,
        })
    }

    fn forward(&self, latent: &LatentBatch, history: &Tensor, mut rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let (b, len, d) = latent.x_t.dims3()?;
        let cfg = &self.cfg;
        if len != cfg.seq_len() || d != cfg.embed_dim || latent.n_max != cfg.n_max {
            return Err(Error::Shape(format!(
                "latent ({b}, {len}, {d}) with boundary {} does not fit config (n_max={}, k={}, d={})",
                latent.n_max, cfg.n_max, cfg.k, cfg.embed_dim
            )));
        }
        if history.dims() != [b, cfg.n_max, d] {
            return Err(Error::Shape(format!("history latents {:?}", history.dims())));
        }
        if latent.t.len() != b || latent.history_mask.len() != b * cfg.n_max {
            return Err(Error::Shape("step or mask length does not match batch".into()));
        }
        if !latent.history_mask.chunks(cfg.n_max).all(|row| row.iter().any(|&r| r)) {
            return Err(Error::Argument("every example needs at least one history item".into()));
        }
        ensure_finite(&latent.x_t, "noised latent")?;
        ensure_finite(history, "history latent")?;

        let p = if rng.is_some() { cfg.dropout } else { 0.0 };
        let masks = self.masks(b, &latent.history_mask)?;
        let temb = self.time_embedding(&latent.t)?.unsqueeze(1)?;
        let mut x = latent
            .x_t
            .to_dtype(self.dtype())?
            .broadcast_add(&self.pos_emb.unsqueeze(0)?)?
            .broadcast_add(&temb)?;
        x = dropout(&x, p, rng.as_deref_mut())?;
        let hist_pos = self.pos_emb.narrow(0, 0, cfg.n_max)?.unsqueeze(0)?;
        let history = history.to_dtype(self.dtype())?.broadcast_add(&hist_pos)?;
        for block in &self.blocks {
            x = block.forward(&x, &history, &masks, p, rng.as_deref_mut())?;
        }
        Ok(self.out.forward(&self.norm_out.forward(&x)?)?)
    }
}

impl Denoise for PreferenceTransformer {
    fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    fn item_table(&self) -> &Tensor {
        &self.item_emb
    }

    fn denoise(&self, latent: &LatentBatch, history: &Tensor) -> Result<Tensor> {
        self.forward(latent, history, None)
    }
}
