//! Radar Diffusion Transformer: the denoiser that maps `(x_t, y, t)` to an
//! estimate of the clean segment.
//!
//! Both sequences are cut into `N` patches and embedded as tokens with
//! their own positional encodings. Each block applies timestep-modulated
//! layer norms in front of self-attention over the noisy-state tokens,
//! banded cross-attention onto the observation tokens, and a feed-forward
//! layer; every branch rejoins the residual stream through a gate that
//! starts at zero. A final modulated norm and a linear head turn tokens
//! back into patches.

mod checkpoint;
pub mod ops;
pub mod small;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{self, Denoiser, DiffusionError};
use crate::rng;

pub use checkpoint::{load_checkpoint, read_checkpoint_header, save_checkpoint, CheckpointHeader, CHECKPOINT_VERSION};
use ops::{AttnShape, Scalar, Span};

#[derive(Debug, Error)]
pub enum RdtError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid timestep {0}")]
    InvalidTimestep(usize),
    #[error("attention row {0} has every key masked")]
    FullyMaskedRow(usize),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = RdtError> = std::result::Result<T, E>;

/// Structural switches for the ablation variants.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub no_self_attn: bool,
    pub no_condition: bool,
    pub concat_condition: bool,
    pub no_band_mask: bool,
}

/// Named ablation variants.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    #[default]
    None,
    /// No self-attention.
    V1,
    /// Observation ignored.
    V2,
    /// Observation tokens concatenated to the noisy-state tokens, no cross-attention.
    V3,
    /// Cross-attention without the band mask.
    V4,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::None, Ablation::V1, Ablation::V2, Ablation::V3, Ablation::V4];

    pub fn flags(self) -> AblationFlags {
        let mut f = AblationFlags::default();
        match self {
            Ablation::None => {}
            Ablation::V1 => f.no_self_attn = true,
            Ablation::V2 => f.no_condition = true,
            Ablation::V3 => f.concat_condition = true,
            Ablation::V4 => f.no_band_mask = true,
        }
        f
    }

    pub fn from_flags(flags: AblationFlags) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.flags() == flags)
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::V1 => "v1",
            Ablation::V2 => "v2",
            Ablation::V3 => "v3",
            Ablation::V4 => "v4",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = RdtError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| RdtError::InvalidConfig(format!("unknown ablation '{s}' (expected none, v1, v2, v3 or v4)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RdtConfig {
    pub seq_len: usize,
    pub num_tokens: usize,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub band_radius: usize,
    pub timestep_embed_dim: usize,
    pub ablation: AblationFlags,
}

impl Default for RdtConfig {
    fn default() -> Self {
        Self {
            seq_len: 400,
            num_tokens: 20,
            hidden_dim: 256,
            num_blocks: 2,
            num_heads: 4,
            band_radius: 1,
            timestep_embed_dim: 256,
            ablation: AblationFlags::default(),
        }
    }
}

impl RdtConfig {
    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation.flags();
        self
    }

    pub fn patch_len(&self) -> usize {
        self.seq_len / self.num_tokens
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(RdtError::InvalidConfig(m.into()));
        if self.seq_len == 0 || self.num_tokens == 0 || self.hidden_dim == 0 || self.num_heads == 0 {
            return bad("sizes must be positive");
        }
        if self.seq_len % self.num_tokens != 0 {
            return bad("num_tokens must divide seq_len");
        }
        if self.hidden_dim % self.num_heads != 0 {
            return bad("num_heads must divide hidden_dim");
        }
        if self.timestep_embed_dim < 2 || self.timestep_embed_dim % 2 != 0 {
            return bad("timestep_embed_dim must be even and at least 2");
        }
        if self.ablation.concat_condition && self.ablation.no_condition {
            return bad("concat_condition and no_condition are mutually exclusive");
        }
        Ok(())
    }

    /// Number of scalar parameters of a model with this config.
    pub fn param_count(&self) -> usize {
        build_layout(self).2
    }

    /// Ablation variant these flags correspond to, if any.
    pub fn variant(&self) -> Option<Ablation> {
        Ablation::from_flags(self.ablation)
    }

    fn uses_cond(&self) -> bool {
        !self.ablation.no_condition
    }

    fn has_cross(&self) -> bool {
        !self.ablation.no_condition && !self.ablation.concat_condition
    }

    fn tokens_per_sample(&self) -> usize {
        if self.ablation.concat_condition {
            2 * self.num_tokens
        } else {
            self.num_tokens
        }
    }

    fn cross_span(&self) -> Span {
        if self.ablation.no_band_mask {
            Span::All
        } else {
            Span::Band(self.band_radius)
        }
    }
}

/// Additive attention mask: `0` where `|i - j| <= u`, `-inf` elsewhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BandMask {
    pub n: usize,
    pub radius: usize,
}

impl BandMask {
    pub fn allows(&self, i: usize, j: usize) -> bool {
        i.abs_diff(j) <= self.radius
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        if self.allows(i, j) {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }

    pub fn to_matrix(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|i| (0..self.n).map(|j| self.value(i, j)).collect()).collect()
    }
}

pub fn banded_mask(n: usize, radius: usize) -> BandMask {
    BandMask { n, radius }
}

/// `softmax(q k^T / sqrt(d_head) + mask) v` per head, heads concatenated.
/// `q`, `k`, `v` are `n×d` row-major; no projections are applied.
pub fn masked_cross_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n: usize,
    d: usize,
    mask: &BandMask,
    heads: usize,
) -> Result<Vec<f64>> {
    if heads == 0 || d % heads != 0 {
        return Err(RdtError::InvalidConfig("heads must divide d".into()));
    }
    for m in [q, k, v] {
        if m.len() != n * d {
            return Err(RdtError::LengthMismatch { expected: n * d, got: m.len() });
        }
    }
    if mask.n != n {
        return Err(RdtError::LengthMismatch { expected: n, got: mask.n });
    }
    if let Some(i) = (0..n).find(|&i| !(0..n).any(|j| mask.allows(i, j))) {
        return Err(RdtError::FullyMaskedRow(i));
    }
    let shape = AttnShape {
        n,
        m: n,
        heads,
        head_dim: d / heads,
        q_stride: d,
        kv_stride: d,
        span: Span::Band(mask.radius),
    };
    let mut probs = vec![0.0; heads * n * n];
    let mut out = vec![0.0; n * d];
    ops::attention(shape, q, k, v, &mut probs, &mut out);
    Ok(out)
}

/// Attention weights of [`masked_cross_attention`], `heads×n×n`.
pub fn cross_attention_weights(q: &[f64], k: &[f64], n: usize, d: usize, mask: &BandMask, heads: usize) -> Result<Vec<f64>> {
    let shape = AttnShape {
        n,
        m: n,
        heads,
        head_dim: d / heads,
        q_stride: d,
        kv_stride: d,
        span: Span::Band(mask.radius),
    };
    if q.len() != n * d || k.len() != n * d {
        return Err(RdtError::LengthMismatch { expected: n * d, got: q.len().min(k.len()) });
    }
    let mut probs = vec![0.0; heads * n * n];
    let mut out = vec![0.0; n * d];
    ops::attention(shape, q, k, k, &mut probs, &mut out);
    Ok(probs)
}

/// Sinusoidal features of a timestep, cosines first.
pub fn timestep_features(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.cos();
        out[half + i] = arg.sin();
    }
    out
}

/// Location of one tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    offset: usize,
    len: usize,
}

impl Slot {
    fn of<'a, T>(self, buf: &'a [T]) -> &'a [T] {
        &buf[self.offset..self.offset + self.len]
    }
}

/// Mutable views of a weight and the bias stored right after it.
fn wb_mut<T>(buf: &mut [T], w: Slot, b: Slot) -> (&mut [T], &mut [T]) {
    assert!(w.offset + w.len <= b.offset);
    let (head, tail) = buf.split_at_mut(b.offset);
    (&mut head[w.offset..w.offset + w.len], &mut tail[..b.len])
}

#[derive(Debug, Clone, Copy)]
struct Lin {
    w: Slot,
    b: Slot,
    din: usize,
    dout: usize,
}

impl Lin {
    fn forward<T: Scalar>(&self, p: &[T], x: &[T], rows: usize) -> Vec<T> {
        let mut y = vec![T::zero(); rows * self.dout];
        ops::linear(x, rows, self.din, self.w.of(p), self.b.of(p), self.dout, &mut y);
        y
    }

    fn backward<T: Scalar>(&self, p: &[T], g: &mut [T], x: &[T], dy: &[T], rows: usize, dx: Option<&mut [T]>) {
        let (dw, db) = wb_mut(g, self.w, self.b);
        ops::linear_backward(x, dy, rows, self.din, self.dout, self.w.of(p), dw, db, dx);
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Zero,
    Xavier,
    Normal(f64),
}

#[derive(Debug, Clone)]
struct BlockSlots {
    modulation: Lin,
    qkv: Option<(Lin, Lin)>,
    cross: Option<(Lin, Lin, Lin)>,
    ff: (Lin, Lin),
    mod_dim: usize,
    sa_at: usize,
    ca_at: usize,
    ff_at: usize,
}

#[derive(Debug, Clone)]
struct Slots {
    main_embed: Lin,
    cond_embed: Option<Lin>,
    pos_main: Slot,
    pos_cond: Option<Slot>,
    t1: Lin,
    t2: Lin,
    blocks: Vec<BlockSlots>,
    final_mod: Lin,
    head: Lin,
}

struct LayoutBuilder {
    tensors: Vec<TensorSpec>,
    inits: Vec<Init>,
    len: usize,
}

impl LayoutBuilder {
    fn tensor(&mut self, name: String, shape: Vec<usize>, init: Init) -> Slot {
        let len = shape.iter().product();
        let slot = Slot { offset: self.len, len };
        self.tensors.push(TensorSpec { name, offset: self.len, shape });
        self.inits.push(init);
        self.len += len;
        slot
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize, w_init: Init) -> Lin {
        let w = self.tensor(format!("{name}.weight"), vec![din, dout], w_init);
        let b = self.tensor(format!("{name}.bias"), vec![dout], Init::Zero);
        Lin { w, b, din, dout }
    }
}

fn build_layout(cfg: &RdtConfig) -> (Vec<TensorSpec>, Vec<Init>, usize, Slots) {
    let (d, p, n, e) = (cfg.hidden_dim, cfg.patch_len(), cfg.num_tokens, cfg.timestep_embed_dim);
    let mut lb = LayoutBuilder { tensors: Vec::new(), inits: Vec::new(), len: 0 };
    let main_embed = lb.linear("embed.main", p, d, Init::Xavier);
    let cond_embed = cfg.uses_cond().then(|| lb.linear("embed.cond", p, d, Init::Xavier));
    let pos_main = lb.tensor("pos.main".into(), vec![n, d], Init::Normal(0.02));
    let pos_cond = cfg.uses_cond().then(|| lb.tensor("pos.cond".into(), vec![n, d], Init::Normal(0.02)));
    let t1 = lb.linear("time.fc1", e, d, Init::Normal(0.02));
    let t2 = lb.linear("time.fc2", d, d, Init::Normal(0.02));
    let mut blocks = Vec::new();
    for k in 0..cfg.num_blocks {
        let has_sa = !cfg.ablation.no_self_attn;
        let has_ca = cfg.has_cross();
        let mut at = 0;
        let mut next = |on: bool| {
            let here = at;
            if on {
                at += 3 * d;
            }
            here
        };
        let sa_at = next(has_sa);
        let ca_at = next(has_ca);
        let ff_at = next(true);
        let mod_dim = at;
        let modulation = lb.linear(&format!("block{k}.modulation"), d, mod_dim, Init::Zero);
        let qkv = has_sa.then(|| {
            (
                lb.linear(&format!("block{k}.self_attn.qkv"), d, 3 * d, Init::Xavier),
                lb.linear(&format!("block{k}.self_attn.out"), d, d, Init::Xavier),
            )
        });
        let cross = has_ca.then(|| {
            (
                lb.linear(&format!("block{k}.cross_attn.q"), d, d, Init::Xavier),
                lb.linear(&format!("block{k}.cross_attn.kv"), d, 2 * d, Init::Xavier),
                lb.linear(&format!("block{k}.cross_attn.out"), d, d, Init::Xavier),
            )
        });
        let ff = (
            lb.linear(&format!("block{k}.ffn.fc1"), d, 4 * d, Init::Xavier),
            lb.linear(&format!("block{k}.ffn.fc2"), 4 * d, d, Init::Xavier),
        );
        blocks.push(BlockSlots { modulation, qkv, cross, ff, mod_dim, sa_at, ca_at, ff_at });
    }
    let final_mod = lb.linear("final.modulation", d, 2 * d, Init::Zero);
    let head = lb.linear("final.head", d, p, Init::Xavier);
    let slots = Slots { main_embed, cond_embed, pos_main, pos_cond, t1, t2, blocks, final_mod, head };
    (lb.tensors, lb.inits, lb.len, slots)
}

/// Which input stream a patch embedding belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Main,
    Cond,
}

/// The denoiser network with its parameters in one flat vector.
#[derive(Debug, Clone)]
pub struct RdtModel<T: Scalar = f32> {
    config: RdtConfig,
    tensors: Vec<TensorSpec>,
    slots: Slots,
    params: Vec<T>,
    /// Per-timestep modulation vectors (each block, then the final norm).
    time_table: HashMap<usize, Vec<Vec<T>>>,
}

#[derive(Default)]
struct BlockCache<T> {
    xhat1: Vec<T>,
    rstd1: Vec<T>,
    h1: Vec<T>,
    qkv: Vec<T>,
    p_sa: Vec<T>,
    o_sa: Vec<T>,
    a_sa: Vec<T>,
    xhat2: Vec<T>,
    rstd2: Vec<T>,
    h2: Vec<T>,
    q_ca: Vec<T>,
    kv_ca: Vec<T>,
    p_ca: Vec<T>,
    o_ca: Vec<T>,
    a_ca: Vec<T>,
    xhat3: Vec<T>,
    rstd3: Vec<T>,
    h3: Vec<T>,
    f1: Vec<T>,
    g: Vec<T>,
    f2: Vec<T>,
    modv: Vec<T>,
}

struct Cache<T> {
    b: usize,
    tfeat: Vec<T>,
    t1: Vec<T>,
    a1: Vec<T>,
    temb: Vec<T>,
    c: Vec<T>,
    condn: Vec<T>,
    rstd_c: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    fmod: Vec<T>,
    xhat_f: Vec<T>,
    rstd_f: Vec<T>,
    hf: Vec<T>,
    out: Vec<T>,
}

impl<T: Scalar> RdtModel<T> {
    /// Freshly initialized model. Linear weights are Xavier-uniform, the
    /// timestep MLP and positional encodings are `N(0, 0.02^2)`, biases and
    /// all modulation projections are zero.
    pub fn new(config: RdtConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (tensors, inits, len, slots) = build_layout(&config);
        let mut rng = rng::stream(seed, "rdt/init");
        let mut params = vec![T::zero(); len];
        for (spec, init) in tensors.iter().zip(&inits) {
            let dst = &mut params[spec.range()];
            match *init {
                Init::Zero => {}
                Init::Xavier => {
                    let (fi, fo) = (spec.shape[0], spec.shape[1]);
                    let a = (6.0 / (fi + fo) as f64).sqrt();
                    for v in dst {
                        *v = T::of(rng.random_range(-a..a));
                    }
                }
                Init::Normal(sd) => {
                    let dist = Normal::new(0.0, sd).expect("positive std");
                    for v in dst {
                        *v = T::of(dist.sample(&mut rng));
                    }
                }
            }
        }
        Ok(Self { config, tensors, slots, params, time_table: HashMap::new() })
    }

    /// Wraps an existing parameter vector laid out as [`RdtModel::tensors`].
    pub fn from_params(config: RdtConfig, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        let (tensors, _, len, slots) = build_layout(&config);
        if params.len() != len {
            return Err(RdtError::LengthMismatch { expected: len, got: params.len() });
        }
        Ok(Self { config, tensors, slots, params, time_table: HashMap::new() })
    }

    pub fn config(&self) -> &RdtConfig {
        &self.config
    }

    /// Named tensors in parameter order.
    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    /// Mutable parameters. Drops any precomputed timestep conditioning.
    pub fn params_mut(&mut self) -> &mut [T] {
        self.time_table.clear();
        &mut self.params
    }

    /// Precomputes the timestep conditioning of `steps` so that inference
    /// at those timesteps skips the timestep MLP and modulation layers.
    pub fn precompute_timesteps(&mut self, steps: &[usize]) {
        for &t in steps {
            if t == 0 || self.time_table.contains_key(&t) {
                continue;
            }
            let (_, _, _, temb) = self.time_mlp(&[t]);
            let c: Vec<T> = temb.iter().map(|&v| ops::silu(v)).collect();
            let mut mods: Vec<Vec<T>> = self.slots.blocks.iter().map(|b| b.modulation.forward(&self.params, &c, 1)).collect();
            mods.push(self.slots.final_mod.forward(&self.params, &c, 1));
            self.time_table.insert(t, mods);
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    /// Same network in another precision.
    pub fn cast<U: Scalar>(&self) -> RdtModel<U> {
        RdtModel {
            config: self.config.clone(),
            tensors: self.tensors.clone(),
            slots: self.slots.clone(),
            params: self.params.iter().map(|v| U::of(v.f64())).collect(),
            time_table: HashMap::new(),
        }
    }

    /// Embeds one length-`l` sequence as `N×d` tokens, positional encoding
    /// included.
    pub fn patchify(&self, seq: &[T], stream: Stream) -> Result<Vec<T>> {
        self.check_len(seq.len(), self.config.seq_len)?;
        let (embed, pos) = match stream {
            Stream::Main => (self.slots.main_embed, self.slots.pos_main),
            Stream::Cond => match (self.slots.cond_embed, self.slots.pos_cond) {
                (Some(e), Some(p)) => (e, p),
                _ => return Err(RdtError::InvalidConfig("this variant has no observation stream".into())),
            },
        };
        Ok(self.embed(seq, 1, embed, pos))
    }

    /// Output head on each token, patches concatenated in token order.
    pub fn unpatchify(&self, tokens: &[T]) -> Result<Vec<T>> {
        let d = self.config.hidden_dim;
        if tokens.len() % d != 0 || tokens.len() / d != self.config.num_tokens {
            return Err(RdtError::LengthMismatch { expected: self.config.num_tokens * d, got: tokens.len() });
        }
        Ok(self.slots.head.forward(&self.params, tokens, tokens.len() / d))
    }

    /// Timestep embedding `t_emb` (length `d`).
    pub fn timestep_embed(&self, t: usize) -> Vec<T> {
        let (_, _, _, temb) = self.time_mlp(&[t]);
        temb
    }

    /// One block on a single sample's `N×d` tokens. `cond` holds the raw
    /// observation tokens from [`RdtModel::patchify`].
    pub fn block_forward(&self, index: usize, main: &[T], cond: &[T], t_emb: &[T]) -> Result<Vec<T>> {
        let d = self.config.hidden_dim;
        let n = self.config.tokens_per_sample();
        if index >= self.slots.blocks.len() {
            return Err(RdtError::InvalidConfig(format!("no block {index}")));
        }
        self.check_len(main.len(), n * d)?;
        self.check_len(t_emb.len(), d)?;
        let mut condn = Vec::new();
        if self.config.has_cross() {
            self.check_len(cond.len(), self.config.num_tokens * d)?;
            condn = vec![T::zero(); cond.len()];
            let mut r = vec![T::zero(); self.config.num_tokens];
            ops::layer_norm(cond, d, &mut condn, &mut r);
        }
        let c: Vec<T> = t_emb.iter().map(|&v| ops::silu(v)).collect();
        let modv = self.slots.blocks[index].modulation.forward(&self.params, &c, 1);
        let mut x = main.to_vec();
        self.run_block(index, &mut x, &condn, None, modv, 1);
        Ok(x)
    }

    /// Clean-segment estimate for one input.
    pub fn forward(&self, x_t: &[T], y: &[T], t: usize) -> Result<Vec<T>> {
        self.forward_batch(x_t, y, &[t])
    }

    /// Batched forward pass. `x_t` and `y` hold `B` sequences back to back.
    pub fn forward_batch(&self, x_t: &[T], y: &[T], t: &[usize]) -> Result<Vec<T>> {
        Ok(self.forward_cached(x_t, y, t, true, None)?.out)
    }

    /// Precomputes everything that depends only on the observation `y`.
    pub fn condition(&self, y: &[T]) -> Result<Conditioning<T>> {
        let cfg = &self.config;
        let (d, nt) = (cfg.hidden_dim, cfg.num_tokens);
        self.check_len(y.len(), cfg.seq_len)?;
        let cond = match (self.slots.cond_embed, self.slots.pos_cond) {
            (Some(e), Some(pos)) => self.embed(y, 1, e, pos),
            _ => Vec::new(),
        };
        let (mut condn, mut kv) = (Vec::new(), Vec::new());
        if cfg.has_cross() {
            condn = vec![T::zero(); cond.len()];
            let mut r = vec![T::zero(); nt];
            ops::layer_norm(&cond, d, &mut condn, &mut r);
            for bs in &self.slots.blocks {
                if let Some((_, wkv, _)) = &bs.cross {
                    kv.push(wkv.forward(&self.params, &condn, nt));
                }
            }
        }
        Ok(Conditioning { y: y.to_vec(), cond, condn, kv })
    }

    /// [`RdtModel::forward`] for the observation held by `cond`.
    pub fn forward_conditioned(&self, cond: &Conditioning<T>, x_t: &[T], t: usize) -> Result<Vec<T>> {
        Ok(self.forward_cached(x_t, &cond.y, &[t], true, Some(cond))?.out)
    }

    /// Batch loss `mean_b ||f(x_t, y, t) - x0||^2`.
    pub fn loss(&self, x_t: &[T], y: &[T], t: &[usize], x0: &[T]) -> Result<T> {
        let out = self.forward_batch(x_t, y, t)?;
        self.check_len(x0.len(), out.len())?;
        Ok(sq_err(&out, x0) / T::of(t.len() as f64))
    }

    /// Batch loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, x_t: &[T], y: &[T], t: &[usize], x0: &[T]) -> Result<(T, Vec<T>)> {
        let cache = self.forward_cached(x_t, y, t, false, None)?;
        self.check_len(x0.len(), cache.out.len())?;
        let inv_b = T::of(1.0 / t.len() as f64);
        let loss = sq_err(&cache.out, x0) * inv_b;
        let dout: Vec<T> = cache.out.iter().zip(x0).map(|(&o, &x)| T::of(2.0) * (o - x) * inv_b).collect();
        let grad = self.backward(&cache, x_t, y, t, &dout);
        Ok((loss, grad))
    }

    fn check_len(&self, got: usize, expected: usize) -> Result<()> {
        if got == expected {
            Ok(())
        } else {
            Err(RdtError::LengthMismatch { expected, got })
        }
    }

    fn embed(&self, seqs: &[T], b: usize, embed: Lin, pos: Slot) -> Vec<T> {
        let (n, d) = (self.config.num_tokens, self.config.hidden_dim);
        let mut tok = embed.forward(&self.params, seqs, b * n);
        let pos = pos.of(&self.params);
        for sample in tok.chunks_exact_mut(n * d) {
            for (v, &p) in sample.iter_mut().zip(pos) {
                *v = *v + p;
            }
        }
        tok
    }

    fn time_mlp(&self, t: &[usize]) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
        let e = self.config.timestep_embed_dim;
        let tfeat: Vec<T> = t.iter().flat_map(|&t| timestep_features(t, e)).map(T::of).collect();
        let t1 = self.slots.t1.forward(&self.params, &tfeat, t.len());
        let a1: Vec<T> = t1.iter().map(|&v| ops::silu(v)).collect();
        let temb = self.slots.t2.forward(&self.params, &a1, t.len());
        (tfeat, t1, a1, temb)
    }

    fn forward_cached(&self, x_t: &[T], y: &[T], t: &[usize], use_table: bool, pre: Option<&Conditioning<T>>) -> Result<Cache<T>> {
        let cfg = &self.config;
        let (l, d, nt) = (cfg.seq_len, cfg.hidden_dim, cfg.num_tokens);
        let b = t.len();
        if b == 0 {
            return Err(RdtError::LengthMismatch { expected: 1, got: 0 });
        }
        self.check_len(x_t.len(), b * l)?;
        self.check_len(y.len(), b * l)?;
        if let Some(&bad) = t.iter().find(|&&t| t == 0) {
            return Err(RdtError::InvalidTimestep(bad));
        }
        let p = &self.params;
        let tabled = use_table && t.iter().all(|t| self.time_table.contains_key(t));
        let (tfeat, t1, a1, temb, c) = if tabled {
            Default::default()
        } else {
            let (tfeat, t1, a1, temb) = self.time_mlp(t);
            let c: Vec<T> = temb.iter().map(|&v| ops::silu(v)).collect();
            (tfeat, t1, a1, temb, c)
        };
        let gather = |k: usize| -> Vec<T> { t.iter().flat_map(|t| self.time_table[t][k].iter().copied()).collect() };

        let main = self.embed(x_t, b, self.slots.main_embed, self.slots.pos_main);
        let cond = match (pre, self.slots.cond_embed, self.slots.pos_cond) {
            (Some(pre), ..) => pre.cond.clone(),
            (None, Some(e), Some(pos)) => self.embed(y, b, e, pos),
            _ => Vec::new(),
        };
        let n = cfg.tokens_per_sample();
        let mut x = if cfg.ablation.concat_condition {
            let mut x = Vec::with_capacity(b * n * d);
            for (m, c) in main.chunks_exact(nt * d).zip(cond.chunks_exact(nt * d)) {
                x.extend_from_slice(m);
                x.extend_from_slice(c);
            }
            x
        } else {
            main
        };
        let (mut condn, mut rstd_c) = (Vec::new(), Vec::new());
        if let Some(pre) = pre {
            condn = pre.condn.clone();
        } else if cfg.has_cross() {
            condn = vec![T::zero(); cond.len()];
            rstd_c = vec![T::zero(); b * nt];
            ops::layer_norm(&cond, d, &mut condn, &mut rstd_c);
        }
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for k in 0..cfg.num_blocks {
            let modv = if tabled { gather(k) } else { self.slots.blocks[k].modulation.forward(p, &c, b) };
            let kv = pre.and_then(|pre| pre.kv.get(k)).map(Vec::as_slice);
            blocks.push(self.run_block(k, &mut x, &condn, kv, modv, b));
        }
        let rows = b * n;
        let fmod = if tabled { gather(cfg.num_blocks) } else { self.slots.final_mod.forward(p, &c, b) };
        let mut xhat_f = vec![T::zero(); rows * d];
        let mut rstd_f = vec![T::zero(); rows];
        ops::layer_norm(&x, d, &mut xhat_f, &mut rstd_f);
        let mut hf = vec![T::zero(); rows * d];
        ops::modulate(&xhat_f, n, d, &fmod, 2 * d, 0, d, &mut hf);
        let patches = self.slots.head.forward(p, &hf, rows);
        let out = if cfg.ablation.concat_condition {
            patches.chunks_exact(n * cfg.patch_len()).flat_map(|s| s[..l].iter().copied()).collect()
        } else {
            patches
        };
        Ok(Cache { b, tfeat, t1, a1, temb, c, condn, rstd_c, blocks, fmod, xhat_f, rstd_f, hf, out })
    }

    fn run_block(&self, k: usize, x: &mut [T], condn: &[T], kv: Option<&[T]>, modv: Vec<T>, b: usize) -> BlockCache<T> {
        let cfg = &self.config;
        let p = &self.params;
        let bs = &self.slots.blocks[k];
        let (d, nt, n) = (cfg.hidden_dim, cfg.num_tokens, cfg.tokens_per_sample());
        let rows = b * n;
        let md = bs.mod_dim;
        let mut bc = BlockCache::<T> { modv, ..Default::default() };
        let norm = |x: &[T], at: usize, xhat: &mut Vec<T>, rstd: &mut Vec<T>, h: &mut Vec<T>, modv: &[T]| {
            *xhat = vec![T::zero(); rows * d];
            *rstd = vec![T::zero(); rows];
            *h = vec![T::zero(); rows * d];
            ops::layer_norm(x, d, xhat, rstd);
            ops::modulate(xhat, n, d, modv, md, at, at + d, h);
        };
        let heads = cfg.num_heads;
        if let Some((qkv, out)) = &bs.qkv {
            norm(x, bs.sa_at, &mut bc.xhat1, &mut bc.rstd1, &mut bc.h1, &bc.modv);
            bc.qkv = qkv.forward(p, &bc.h1, rows);
            let shape = AttnShape { n, m: n, heads, head_dim: d / heads, q_stride: 3 * d, kv_stride: 3 * d, span: Span::All };
            bc.p_sa = vec![T::zero(); b * heads * n * n];
            bc.o_sa = vec![T::zero(); rows * d];
            for s in 0..b {
                let q = &bc.qkv[s * n * 3 * d..(s + 1) * n * 3 * d];
                ops::attention(
                    shape,
                    q,
                    &q[d..],
                    &q[2 * d..],
                    &mut bc.p_sa[s * heads * n * n..(s + 1) * heads * n * n],
                    &mut bc.o_sa[s * n * d..(s + 1) * n * d],
                );
            }
            bc.a_sa = out.forward(p, &bc.o_sa, rows);
            ops::gated_add(x, &bc.a_sa, n, d, &bc.modv, md, bs.sa_at + 2 * d);
        }
        if let Some((wq, wkv, out)) = &bs.cross {
            norm(x, bs.ca_at, &mut bc.xhat2, &mut bc.rstd2, &mut bc.h2, &bc.modv);
            bc.q_ca = wq.forward(p, &bc.h2, rows);
            bc.kv_ca = match kv {
                Some(kv) => kv.to_vec(),
                None => wkv.forward(p, condn, b * nt),
            };
            let shape =
                AttnShape { n, m: nt, heads, head_dim: d / heads, q_stride: d, kv_stride: 2 * d, span: cfg.cross_span() };
            bc.p_ca = vec![T::zero(); b * heads * n * nt];
            bc.o_ca = vec![T::zero(); rows * d];
            for s in 0..b {
                let kv = &bc.kv_ca[s * nt * 2 * d..(s + 1) * nt * 2 * d];
                ops::attention(
                    shape,
                    &bc.q_ca[s * n * d..(s + 1) * n * d],
                    kv,
                    &kv[d..],
                    &mut bc.p_ca[s * heads * n * nt..(s + 1) * heads * n * nt],
                    &mut bc.o_ca[s * n * d..(s + 1) * n * d],
                );
            }
            bc.a_ca = out.forward(p, &bc.o_ca, rows);
            ops::gated_add(x, &bc.a_ca, n, d, &bc.modv, md, bs.ca_at + 2 * d);
        }
        let (fc1, fc2) = &bs.ff;
        norm(x, bs.ff_at, &mut bc.xhat3, &mut bc.rstd3, &mut bc.h3, &bc.modv);
        bc.f1 = fc1.forward(p, &bc.h3, rows);
        bc.g = vec![T::zero(); bc.f1.len()];
        ops::gelu_slice(&bc.f1, &mut bc.g);
        bc.f2 = fc2.forward(p, &bc.g, rows);
        ops::gated_add(x, &bc.f2, n, d, &bc.modv, md, bs.ff_at + 2 * d);
        bc
    }

    fn backward(&self, cache: &Cache<T>, x_t: &[T], y: &[T], t: &[usize], dout: &[T]) -> Vec<T> {
        let cfg = &self.config;
        let p = &self.params;
        let (d, nt, n, pl, l) = (cfg.hidden_dim, cfg.num_tokens, cfg.tokens_per_sample(), cfg.patch_len(), cfg.seq_len);
        let b = cache.b;
        let rows = b * n;
        let mut g = vec![T::zero(); p.len()];

        let dpatches = if cfg.ablation.concat_condition {
            let mut dp = vec![T::zero(); rows * pl];
            for (dst, src) in dp.chunks_exact_mut(n * pl).zip(dout.chunks_exact(l)) {
                dst[..l].copy_from_slice(src);
            }
            dp
        } else {
            dout.to_vec()
        };
        let mut dhf = vec![T::zero(); rows * d];
        self.slots.head.backward(p, &mut g, &cache.hf, &dpatches, rows, Some(&mut dhf));
        let mut dfmod = vec![T::zero(); b * 2 * d];
        let mut dxhat = vec![T::zero(); rows * d];
        ops::modulate_backward(&cache.xhat_f, &dhf, n, d, &cache.fmod, &mut dfmod, 2 * d, 0, d, &mut dxhat);
        let mut dx = vec![T::zero(); rows * d];
        ops::layer_norm_backward(&cache.xhat_f, &cache.rstd_f, &dxhat, d, &mut dx);
        let mut dc = vec![T::zero(); b * d];
        self.slots.final_mod.backward(p, &mut g, &cache.c, &dfmod, b, Some(&mut dc));

        let mut dcondn = vec![T::zero(); cache.condn.len()];
        for k in (0..cfg.num_blocks).rev() {
            let bs = &self.slots.blocks[k];
            let bc = &cache.blocks[k];
            let md = bs.mod_dim;
            let mut dmod = vec![T::zero(); b * md];
            let mut dbranch = vec![T::zero(); rows * d];
            let mut dh = vec![T::zero(); rows * d];
            // Shared tail of each sublayer: modulated norm back into dx.
            let norm_back = |dh: &[T], xhat: &[T], rstd: &[T], at: usize, dmod: &mut [T], dx: &mut [T]| {
                let mut dxhat = vec![T::zero(); rows * d];
                ops::modulate_backward(xhat, dh, n, d, &bc.modv, dmod, md, at, at + d, &mut dxhat);
                ops::layer_norm_backward(xhat, rstd, &dxhat, d, dx);
            };

            let (fc1, fc2) = &bs.ff;
            ops::gated_add_backward(&dx, &bc.f2, n, d, &bc.modv, &mut dmod, md, bs.ff_at + 2 * d, &mut dbranch);
            let mut dgel = vec![T::zero(); rows * 4 * d];
            fc2.backward(p, &mut g, &bc.g, &dbranch, rows, Some(&mut dgel));
            ops::gelu_backward(&bc.f1, &mut dgel);
            fc1.backward(p, &mut g, &bc.h3, &dgel, rows, Some(&mut dh));
            norm_back(&dh, &bc.xhat3, &bc.rstd3, bs.ff_at, &mut dmod, &mut dx);

            if let Some((wq, wkv, out)) = &bs.cross {
                ops::gated_add_backward(&dx, &bc.a_ca, n, d, &bc.modv, &mut dmod, md, bs.ca_at + 2 * d, &mut dbranch);
                let mut do_ca = vec![T::zero(); rows * d];
                out.backward(p, &mut g, &bc.o_ca, &dbranch, rows, Some(&mut do_ca));
                let shape = AttnShape {
                    n,
                    m: nt,
                    heads: cfg.num_heads,
                    head_dim: cfg.head_dim(),
                    q_stride: d,
                    kv_stride: 2 * d,
                    span: cfg.cross_span(),
                };
                let mut dq = vec![T::zero(); rows * d];
                let mut dkv = vec![T::zero(); b * nt * 2 * d];
                let pn = cfg.num_heads * n * nt;
                for s in 0..b {
                    let kv = &bc.kv_ca[s * nt * 2 * d..(s + 1) * nt * 2 * d];
                    ops::attention_backward(
                        shape,
                        &bc.q_ca[s * n * d..(s + 1) * n * d],
                        kv,
                        &kv[d..],
                        &bc.p_ca[s * pn..(s + 1) * pn],
                        &do_ca[s * n * d..(s + 1) * n * d],
                        &mut dq[s * n * d..(s + 1) * n * d],
                        &mut dkv[s * nt * 2 * d..(s + 1) * nt * 2 * d],
                        0,
                        d,
                    );
                }
                wkv.backward(p, &mut g, &cache.condn, &dkv, b * nt, Some(&mut dcondn));
                dh.fill(T::zero());
                wq.backward(p, &mut g, &bc.h2, &dq, rows, Some(&mut dh));
                norm_back(&dh, &bc.xhat2, &bc.rstd2, bs.ca_at, &mut dmod, &mut dx);
            }

            if let Some((qkv, out)) = &bs.qkv {
                ops::gated_add_backward(&dx, &bc.a_sa, n, d, &bc.modv, &mut dmod, md, bs.sa_at + 2 * d, &mut dbranch);
                let mut do_sa = vec![T::zero(); rows * d];
                out.backward(p, &mut g, &bc.o_sa, &dbranch, rows, Some(&mut do_sa));
                let shape = AttnShape {
                    n,
                    m: n,
                    heads: cfg.num_heads,
                    head_dim: cfg.head_dim(),
                    q_stride: 3 * d,
                    kv_stride: 3 * d,
                    span: Span::All,
                };
                let mut dqkv = vec![T::zero(); rows * 3 * d];
                let mut dq = vec![T::zero(); rows * 3 * d];
                let pn = cfg.num_heads * n * n;
                for s in 0..b {
                    let at = s * n * 3 * d..(s + 1) * n * 3 * d;
                    let q = &bc.qkv[at.clone()];
                    ops::attention_backward(
                        shape,
                        q,
                        &q[d..],
                        &q[2 * d..],
                        &bc.p_sa[s * pn..(s + 1) * pn],
                        &do_sa[s * n * d..(s + 1) * n * d],
                        &mut dq[at.clone()],
                        &mut dqkv[at],
                        d,
                        2 * d,
                    );
                }
                for (a, &q) in dqkv.iter_mut().zip(&dq) {
                    *a = *a + q;
                }
                dh.fill(T::zero());
                qkv.backward(p, &mut g, &bc.h1, &dqkv, rows, Some(&mut dh));
                norm_back(&dh, &bc.xhat1, &bc.rstd1, bs.sa_at, &mut dmod, &mut dx);
            }
            bs.modulation.backward(p, &mut g, &cache.c, &dmod, b, Some(&mut dc));
        }

        // Token gradients back to the embeddings.
        let (dmain, dcond) = if cfg.ablation.concat_condition {
            let mut dm = Vec::with_capacity(b * nt * d);
            let mut dcn = Vec::with_capacity(b * nt * d);
            for s in dx.chunks_exact(n * d) {
                dm.extend_from_slice(&s[..nt * d]);
                dcn.extend_from_slice(&s[nt * d..]);
            }
            (dm, dcn)
        } else if cfg.has_cross() {
            let mut dcn = vec![T::zero(); b * nt * d];
            ops::layer_norm_backward(&cache.condn, &cache.rstd_c, &dcondn, d, &mut dcn);
            (dx, dcn)
        } else {
            (dx, Vec::new())
        };
        self.embed_backward(&mut g, x_t, &dmain, self.slots.main_embed, self.slots.pos_main, b);
        if let (Some(e), Some(pos)) = (self.slots.cond_embed, self.slots.pos_cond) {
            self.embed_backward(&mut g, y, &dcond, e, pos, b);
        }

        let dtemb: Vec<T> = dc.iter().zip(&cache.temb).map(|(&g, &v)| g * ops::silu_grad(v)).collect();
        let mut da1 = vec![T::zero(); b * d];
        self.slots.t2.backward(p, &mut g, &cache.a1, &dtemb, b, Some(&mut da1));
        let dt1: Vec<T> = da1.iter().zip(&cache.t1).map(|(&g, &v)| g * ops::silu_grad(v)).collect();
        self.slots.t1.backward(p, &mut g, &cache.tfeat, &dt1, t.len(), None);
        g
    }

    fn embed_backward(&self, g: &mut [T], seqs: &[T], dtok: &[T], embed: Lin, pos: Slot, b: usize) {
        let (n, d) = (self.config.num_tokens, self.config.hidden_dim);
        embed.backward(&self.params, g, seqs, dtok, b * n, None);
        let gp = &mut g[pos.offset..pos.offset + pos.len];
        for s in dtok.chunks_exact(n * d) {
            for (a, &v) in gp.iter_mut().zip(s) {
                *a = *a + v;
            }
        }
    }
}

fn sq_err<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

fn to_scalar<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::of(x)).collect()
}

impl<T: Scalar> Denoiser for RdtModel<T> {
    fn denoise(&self, x_t: &[f64], y: &[f64], t: usize) -> diffusion::Result<Vec<f64>> {
        let out = self
            .forward(&to_scalar(x_t), &to_scalar(y), t)
            .map_err(|e| DiffusionError::Denoiser(e.to_string()))?;
        Ok(out.iter().map(|v| v.f64()).collect())
    }

    fn denoise_batch(&self, x_t: &[Vec<f64>], y: &[&[f64]], t: &[usize]) -> diffusion::Result<Vec<Vec<f64>>> {
        let xs: Vec<T> = x_t.iter().flat_map(|x| x.iter().map(|&v| T::of(v))).collect();
        let ys: Vec<T> = y.iter().flat_map(|y| y.iter().map(|&v| T::of(v))).collect();
        let out = self.forward_batch(&xs, &ys, t).map_err(|e| DiffusionError::Denoiser(e.to_string()))?;
        Ok(out.chunks_exact(self.config.seq_len).map(|c| c.iter().map(|v| v.f64()).collect()).collect())
    }
}

/// Observation-dependent state of one segment, reusable across the steps
/// of a reverse chain.
#[derive(Debug, Clone)]
pub struct Conditioning<T> {
    y: Vec<T>,
    cond: Vec<T>,
    condn: Vec<T>,
    kv: Vec<Vec<T>>,
}

/// Denoiser bound to one observation. Calls with any other `y` fall back to
/// the plain model.
#[derive(Debug, Clone)]
pub struct Conditioned<'a, T: Scalar = f32> {
    model: &'a RdtModel<T>,
    y: Vec<f64>,
    state: Conditioning<T>,
}

impl<'a, T: Scalar> Conditioned<'a, T> {
    pub fn new(model: &'a RdtModel<T>, y: &[f64]) -> Result<Self> {
        Ok(Self { model, y: y.to_vec(), state: model.condition(&to_scalar(y))? })
    }
}

impl<T: Scalar> Denoiser for Conditioned<'_, T> {
    fn denoise(&self, x_t: &[f64], y: &[f64], t: usize) -> diffusion::Result<Vec<f64>> {
        if y != self.y.as_slice() {
            return self.model.denoise(x_t, y, t);
        }
        let out = self
            .model
            .forward_conditioned(&self.state, &to_scalar(x_t), t)
            .map_err(|e| DiffusionError::Denoiser(e.to_string()))?;
        Ok(out.iter().map(|v| v.f64()).collect())
    }
}

/// Standard-normal vector, handy for probes.
pub fn gaussian_vec<T: Scalar>(len: usize, rng: &mut rng::Rng) -> Vec<T> {
    (0..len).map(|_| T::of(StandardNormal.sample(rng))).collect()
}
