//! A small pre-norm decoder-only transformer (RoPE, causal attention,
//! gated-SiLU MLP) with a hidden-state tap at every layer boundary.
//!
//! Tensor layout (all matrices multiply from the right, `x · W`):
//!
//! | name                         | shape          |
//! |------------------------------|----------------|
//! | `embed.tok`                  | `[vocab, E]`   |
//! | `layers.{i}.norm_attn`       | `[E]`          |
//! | `layers.{i}.attn.{wq,wk,wv,wo}` | `[E, E]`    |
//! | `layers.{i}.norm_mlp`        | `[E]`          |
//! | `layers.{i}.mlp.{w_gate,w_up}` | `[E, H]`     |
//! | `layers.{i}.mlp.w_down`      | `[H, E]`       |
//! | `final_norm`                 | `[E]`          |
//! | `lm_head`                    | `[E, vocab]`   |

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, META_CONFIG_JSON, META_MODEL_ID};
use crate::error::{Error, Result};
use crate::tensor::{matmul, rms_norm, Tensor};

pub const PAD: u32 = 256;
pub const BOS: u32 = 257;
pub const EOS: u32 = 258;

fn default_vocab() -> usize {
    259
}
fn default_rope_base() -> f32 {
    10_000.0
}
fn default_norm_eps() -> f32 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f32,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f32,
}

impl Default for ModelConfig {
    /// The bench model: E=64, 4 layers.
    fn default() -> Self {
        Self {
            vocab_size: default_vocab(),
            embed_dim: 64,
            num_layers: 4,
            num_heads: 4,
            mlp_hidden: 128,
            max_seq_len: 128,
            rope_base: default_rope_base(),
            norm_eps: default_norm_eps(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("mlp_hidden", self.mlp_hidden),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Input(format!("model config: {name} must be >= 1")));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Input(format!(
                "model config: embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Input(format!(
                "model config: head dimension {} must be even for rotary encoding",
                self.head_dim()
            )));
        }
        if !(self.rope_base > 0.0) || !(self.norm_eps >= 0.0) {
            return Err(Error::Input("model config: rope_base must be > 0 and norm_eps >= 0".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Hidden-state taps per forward pass (embedding output plus one per block).
    pub fn num_taps(&self) -> usize {
        self.num_layers + 1
    }

    /// Every tensor the architecture needs, in canonical order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (v, e, h) = (self.vocab_size, self.embed_dim, self.mlp_hidden);
        let mut out = vec![("embed.tok".to_owned(), vec![v, e])];
        for i in 0..self.num_layers {
            let p = format!("layers.{i}");
            out.push((format!("{p}.norm_attn"), vec![e]));
            for w in ["wq", "wk", "wv", "wo"] {
                out.push((format!("{p}.attn.{w}"), vec![e, e]));
            }
            out.push((format!("{p}.norm_mlp"), vec![e]));
            out.push((format!("{p}.mlp.w_gate"), vec![e, h]));
            out.push((format!("{p}.mlp.w_up"), vec![e, h]));
            out.push((format!("{p}.mlp.w_down"), vec![h, e]));
        }
        out.push(("final_norm".to_owned(), vec![e]));
        out.push(("lm_head".to_owned(), vec![e, v]));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// Stamps `model_id` and `config_json` into checkpoint metadata.
pub fn stamp_metadata(ckpt: &mut Checkpoint, cfg: &ModelConfig, model_id: &str) {
    ckpt.set_metadata(META_MODEL_ID, model_id);
    ckpt.set_metadata(META_CONFIG_JSON, cfg.to_json());
}

/// Random initialization: embeddings ~ N(0, 1), norm gains 1, projection
/// matrices ~ N(0, scale² / fan_in).
pub fn init_checkpoint(cfg: &ModelConfig, seed: u64, scale: f32, model_id: &str) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ckpt = Checkpoint::new();
    for (name, shape) in cfg.tensor_shapes() {
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = if shape.len() == 1 {
            vec![1.0; numel]
        } else {
            let std = if name == "embed.tok" {
                1.0
            } else {
                scale / (shape[0] as f32).sqrt()
            };
            let dist = Normal::new(0.0f32, std).expect("valid std");
            (0..numel).map(|_| dist.sample(&mut rng)).collect()
        };
        ckpt.insert(name, Tensor::new(shape, data)?)?;
    }
    stamp_metadata(&mut ckpt, cfg, model_id);
    Ok(ckpt)
}

/// A checkpoint whose every parameter is zero.
pub fn zero_checkpoint(cfg: &ModelConfig, model_id: &str) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut ckpt = Checkpoint::new();
    for (name, shape) in cfg.tensor_shapes() {
        ckpt.insert(name, Tensor::zeros(&shape)?)?;
    }
    stamp_metadata(&mut ckpt, cfg, model_id);
    Ok(ckpt)
}

/// Byte-level tokenizer: `[BOS] + bytes + [EOS]`, truncated to
/// `max_seq_len` from the right so BOS survives.
pub fn tokenize(text: &str, cfg: &ModelConfig) -> Result<Vec<u32>> {
    if text.trim().is_empty() {
        return Err(Error::Input("cannot tokenize empty text".into()));
    }
    let mut ids = Vec::with_capacity(text.len() + 2);
    ids.push(BOS);
    ids.extend(text.bytes().map(u32::from));
    ids.push(EOS);
    ids.truncate(cfg.max_seq_len);
    Ok(ids)
}

/// `[BOS] + bytes` with no EOS, for generation.
pub fn encode_prompt(text: &str, cfg: &ModelConfig) -> Result<Vec<u32>> {
    if text.trim().is_empty() {
        return Err(Error::Input("cannot encode an empty prompt".into()));
    }
    let mut ids = Vec::with_capacity(text.len() + 1);
    ids.push(BOS);
    ids.extend(text.bytes().map(u32::from));
    ids.truncate(cfg.max_seq_len);
    Ok(ids)
}

/// Residual-stream values: index 0 is the embedding output, index `i` the
/// output of block `i` (before the final norm).
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates(pub Vec<Tensor>);

impl HiddenStates {
    pub fn layers(&self) -> &[Tensor] {
        &self.0
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub hidden: HiddenStates,
    /// `RMSNorm_final(x)`, the input to `lm_head`.
    pub features: Tensor,
}

struct Block<'a> {
    norm_attn: &'a Tensor,
    wq: &'a Tensor,
    wk: &'a Tensor,
    wv: &'a Tensor,
    wo: &'a Tensor,
    norm_mlp: &'a Tensor,
    w_gate: &'a Tensor,
    w_up: &'a Tensor,
    w_down: &'a Tensor,
}

/// Shape-checked view of a checkpoint as a runnable model.
pub struct Model<'a> {
    cfg: ModelConfig,
    embed: &'a Tensor,
    blocks: Vec<Block<'a>>,
    final_norm: &'a Tensor,
    lm_head: &'a Tensor,
    rope: Vec<(f64, f64)>,
}

impl<'a> Model<'a> {
    pub fn new(ckpt: &'a Checkpoint, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        for (name, shape) in cfg.tensor_shapes() {
            let t = ckpt.tensor(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "tensor `{name}` has shape {:?}, config expects {shape:?}",
                    t.shape()
                )));
            }
        }
        let get = |n: String| ckpt.tensor(&n);
        let blocks = (0..cfg.num_layers)
            .map(|i| -> Result<Block<'a>> {
                Ok(Block {
                    norm_attn: get(format!("layers.{i}.norm_attn"))?,
                    wq: get(format!("layers.{i}.attn.wq"))?,
                    wk: get(format!("layers.{i}.attn.wk"))?,
                    wv: get(format!("layers.{i}.attn.wv"))?,
                    wo: get(format!("layers.{i}.attn.wo"))?,
                    norm_mlp: get(format!("layers.{i}.norm_mlp"))?,
                    w_gate: get(format!("layers.{i}.mlp.w_gate"))?,
                    w_up: get(format!("layers.{i}.mlp.w_up"))?,
                    w_down: get(format!("layers.{i}.mlp.w_down"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            rope: rope_table(cfg),
            cfg: cfg.clone(),
            embed: ckpt.tensor("embed.tok")?,
            blocks,
            final_norm: ckpt.tensor("final_norm")?,
            lm_head: ckpt.tensor("lm_head")?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn forward(&self, tokens: &[u32]) -> Result<ForwardOutput> {
        let cfg = &self.cfg;
        let e = cfg.embed_dim;
        if tokens.is_empty() {
            return Err(Error::Input("forward needs at least one token".into()));
        }
        if tokens.len() > cfg.max_seq_len {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                cfg.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let mut data = Vec::with_capacity(tokens.len() * e);
        for &t in tokens {
            data.extend_from_slice(self.embed.row(t as usize));
        }
        let mut x = Tensor::new(vec![tokens.len(), e], data)?;
        let mut hidden = Vec::with_capacity(cfg.num_taps());
        hidden.push(x.clone());
        for block in &self.blocks {
            let h = rms_norm(&x, block.norm_attn, cfg.norm_eps)?;
            let attn = self.attention(block, &h)?;
            add_in_place(&mut x, &matmul(&attn, block.wo)?);

            let h = rms_norm(&x, block.norm_mlp, cfg.norm_eps)?;
            let gate = matmul(&h, block.w_gate)?;
            let mut up = matmul(&h, block.w_up)?;
            for (u, &g) in up.data_mut().iter_mut().zip(gate.data()) {
                *u *= silu(g);
            }
            add_in_place(&mut x, &matmul(&up, block.w_down)?);
            hidden.push(x.clone());
        }
        let features = rms_norm(&x, self.final_norm, cfg.norm_eps)?;
        let logits = matmul(&features, self.lm_head)?;
        Ok(ForwardOutput {
            logits,
            hidden: HiddenStates(hidden),
            features,
        })
    }

    fn attention(&self, block: &Block<'_>, h: &Tensor) -> Result<Tensor> {
        let cfg = &self.cfg;
        let (n, e, d) = (h.num_rows(), cfg.embed_dim, cfg.head_dim());
        let mut q = matmul(h, block.wq)?;
        let mut k = matmul(h, block.wk)?;
        let v = matmul(h, block.wv)?;
        for t in [&mut q, &mut k] {
            apply_rope(t.data_mut(), n, cfg.num_heads, d, &self.rope);
        }
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = vec![0f32; n * e];
        let mut scores = Vec::with_capacity(n);
        let mut acc = vec![0f64; d];
        for head in 0..cfg.num_heads {
            let off = head * d;
            for t in 0..n {
                let qt = &q.data()[t * e + off..t * e + off + d];
                scores.clear();
                for s in 0..=t {
                    let ks = &k.data()[s * e + off..s * e + off + d];
                    let dot: f64 = qt.iter().zip(ks).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
                    scores.push(dot * scale);
                }
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for sc in scores.iter_mut() {
                    *sc = (*sc - max).exp();
                    total += *sc;
                }
                acc.iter_mut().for_each(|a| *a = 0.0);
                for (s, &p) in scores.iter().enumerate() {
                    let vs = &v.data()[s * e + off..s * e + off + d];
                    for (a, &vv) in acc.iter_mut().zip(vs) {
                        *a += p / total * f64::from(vv);
                    }
                }
                for (slot, &a) in out[t * e + off..t * e + off + d].iter_mut().zip(&acc) {
                    *slot = a as f32;
                }
            }
        }
        Tensor::new(vec![n, e], out)
    }
}

/// Runs one sequence through the model.
pub fn forward(ckpt: &Checkpoint, cfg: &ModelConfig, tokens: &[u32]) -> Result<(Tensor, HiddenStates)> {
    let out = Model::new(ckpt, cfg)?.forward(tokens)?;
    Ok((out.logits, out.hidden))
}

fn silu(x: f32) -> f32 {
    let x = f64::from(x);
    (x / (1.0 + (-x).exp())) as f32
}

fn add_in_place(x: &mut Tensor, y: &Tensor) {
    for (a, &b) in x.data_mut().iter_mut().zip(y.data()) {
        *a += b;
    }
}

/// `(cos, sin)` per `(position, frequency)`, frequencies `base^(-2j/d)`.
fn rope_table(cfg: &ModelConfig) -> Vec<(f64, f64)> {
    let d = cfg.head_dim();
    let half = d / 2;
    let mut table = Vec::with_capacity(cfg.max_seq_len * half);
    for pos in 0..cfg.max_seq_len {
        for j in 0..half {
            let freq = f64::from(cfg.rope_base).powf(-2.0 * j as f64 / d as f64);
            let angle = pos as f64 * freq;
            table.push((angle.cos(), angle.sin()));
        }
    }
    table
}

/// Non-interleaved rotary encoding: dimension `j` pairs with `j + d/2`.
fn apply_rope(data: &mut [f32], n: usize, heads: usize, d: usize, table: &[(f64, f64)]) {
    let half = d / 2;
    let e = heads * d;
    for pos in 0..n {
        for h in 0..heads {
            let base = pos * e + h * d;
            for j in 0..half {
                let (cos, sin) = table[pos * half + j];
                let a = f64::from(data[base + j]);
                let b = f64::from(data[base + j + half]);
                data[base + j] = (a * cos - b * sin) as f32;
                data[base + j + half] = (a * sin + b * cos) as f32;
            }
        }
    }
}
