//! Synthetic task experts.
//!
//! An expert is the base model plus a deterministic low-rank perturbation
//! whose per-group norm grows linearly with depth, followed by a ridge
//! readout that refits `lm_head` on the task's training answers. The
//! perturbation makes deeper layers diverge more between experts; the
//! readout makes each expert actually solve its task.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bench::tasks::Sample;
use crate::checkpoint::{build_layer_index, Checkpoint, LayerGroupIndex, META_MODEL_ID};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertOptions {
    /// Deepest group's perturbation norm, relative to the median base group norm.
    pub strength: f64,
    pub rank: usize,
    /// Ridge penalty pulling the refitted head toward the perturbed one.
    pub ridge: f64,
    /// Target logit for the correct next token.
    pub margin: f64,
}

impl Default for ExpertOptions {
    fn default() -> Self {
        Self {
            strength: 0.3,
            rank: 2,
            ridge: 1.0,
            margin: 10.0,
        }
    }
}

fn name_hash(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// `‖θ_g‖_F` for every group.
pub fn group_norms(ckpt: &Checkpoint, index: &LayerGroupIndex) -> Result<Vec<f64>> {
    index
        .groups
        .iter()
        .map(|g| {
            g.names
                .iter()
                .map(|n| ckpt.tensor(n).map(|t| t.frobenius().powi(2)))
                .sum::<Result<f64>>()
                .map(f64::sqrt)
        })
        .collect()
}

/// `‖θ_g^a − θ_g^b‖_F` for every group.
pub fn group_delta_norms(a: &Checkpoint, b: &Checkpoint, index: &LayerGroupIndex) -> Result<Vec<f64>> {
    index
        .groups
        .iter()
        .map(|g| {
            let mut total = 0f64;
            for n in &g.names {
                let (x, y) = (a.tensor(n)?, b.tensor(n)?);
                if x.shape() != y.shape() {
                    return Err(Error::Compatibility(format!("tensor `{n}` differs in shape")));
                }
                total += x
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&p, &q)| (f64::from(p) - f64::from(q)).powi(2))
                    .sum::<f64>();
            }
            Ok(total.sqrt())
        })
        .collect()
}

fn low_rank(shape: &[usize], rank: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match shape {
        [n] => (0..*n).map(|_| StandardNormal.sample(rng)).collect(),
        [r, c] => {
            let u: Vec<f64> = (0..r * rank).map(|_| StandardNormal.sample(rng)).collect();
            let v: Vec<f64> = (0..c * rank).map(|_| StandardNormal.sample(rng)).collect();
            let mut out = vec![0f64; r * c];
            for i in 0..*r {
                for j in 0..*c {
                    out[i * c + j] = (0..rank).map(|k| u[i * rank + k] * v[j * rank + k]).sum();
                }
            }
            out
        }
        _ => unreachable!("checkpoint tensors are vectors or matrices"),
    }
}

/// `base + δ`, with `‖δ_g‖_F = strength · (g + 1) / G · median_g ‖θ_g^base‖_F`.
pub fn gen_synthetic_expert(base: &Checkpoint, task: &str, strength: f64, seed: u64) -> Result<Checkpoint> {
    gen_synthetic_expert_with(base, task, strength, 2, seed)
}

pub fn gen_synthetic_expert_with(base: &Checkpoint, task: &str, strength: f64, rank: usize, seed: u64) -> Result<Checkpoint> {
    if !(strength >= 0.0 && strength.is_finite()) {
        return Err(Error::Input(format!("strength must be >= 0, got {strength}")));
    }
    if rank == 0 {
        return Err(Error::Input("perturbation rank must be >= 1".into()));
    }
    let cfg = base.config()?;
    let index = build_layer_index(base, &cfg)?;
    let mut out = base.clone();
    out.set_metadata(META_MODEL_ID, format!("expert-{task}"));
    if strength == 0.0 {
        return Ok(out);
    }
    let mut norms = group_norms(base, &index)?;
    norms.sort_by(f64::total_cmp);
    let median = norms[norms.len() / 2];
    let groups = index.num_groups() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(task));
    for g in &index.groups {
        let target = strength * (g.id as f64 + 1.0) / groups * median;
        let deltas: Vec<Vec<f64>> = g
            .names
            .iter()
            .map(|n| Ok(low_rank(base.tensor(n)?.shape(), rank, &mut rng)))
            .collect::<Result<_>>()?;
        let raw: f64 = deltas.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        let scale = if raw > 0.0 { target / raw } else { 0.0 };
        for (n, d) in g.names.iter().zip(deltas) {
            let t = base.tensor(n)?;
            let data = t
                .data()
                .iter()
                .zip(d)
                .map(|(&b, dv)| (f64::from(b) + scale * dv) as f32)
                .collect();
            out.replace(n, Tensor::new(t.shape().to_vec(), data)?)?;
        }
    }
    Ok(out)
}

/// Refits `lm_head` by ridge regression of one-hot answer targets on the
/// final-normed features at every answer position:
/// `W = (XᵀX + λI)⁻¹ (XᵀT + λ W₀)`.
pub fn fit_task_head(ckpt: &Checkpoint, cfg: &ModelConfig, train: &[Sample], ridge: f64, margin: f64) -> Result<Checkpoint> {
    if train.is_empty() {
        return Err(Error::Input("cannot fit a head on an empty training split".into()));
    }
    if !(ridge > 0.0 && ridge.is_finite()) {
        return Err(Error::Input(format!("ridge must be > 0, got {ridge}")));
    }
    let model = Model::new(ckpt, cfg)?;
    let (e, v) = (cfg.embed_dim, cfg.vocab_size);
    let mut xtx = DMatrix::<f64>::zeros(e, e);
    let w0 = ckpt.tensor("lm_head")?;
    let mut rhs = DMatrix::<f64>::from_row_slice(e, v, &w0.data().iter().map(|&x| f64::from(x)).collect::<Vec<_>>()) * ridge;
    for s in train {
        let (tokens, first) = s.teacher_forced(cfg)?;
        let out = model.forward(&tokens[..tokens.len() - 1])?;
        for pos in first - 1..tokens.len() - 1 {
            let x: Vec<f64> = out.features.row(pos).iter().map(|&f| f64::from(f)).collect();
            let target = tokens[pos + 1] as usize;
            for i in 0..e {
                for j in 0..e {
                    xtx[(i, j)] += x[i] * x[j];
                }
                rhs[(i, target)] += margin * x[i];
            }
        }
    }
    for i in 0..e {
        xtx[(i, i)] += ridge;
    }
    let chol = xtx
        .cholesky()
        .ok_or_else(|| Error::NumericDomain("ridge system is not positive definite".into()))?;
    let w = chol.solve(&rhs);
    let mut data = Vec::with_capacity(e * v);
    for i in 0..e {
        for j in 0..v {
            data.push(w[(i, j)] as f32);
        }
    }
    let mut out = ckpt.clone();
    out.replace("lm_head", Tensor::new(vec![e, v], data)?)?;
    Ok(out)
}

/// Perturbed body plus task readout.
pub fn build_expert(base: &Checkpoint, cfg: &ModelConfig, task: &str, train: &[Sample], opts: &ExpertOptions, seed: u64) -> Result<Checkpoint> {
    let perturbed = gen_synthetic_expert_with(base, task, opts.strength, opts.rank, seed)?;
    fit_task_head(&perturbed, cfg, train, opts.ridge, opts.margin)
}
