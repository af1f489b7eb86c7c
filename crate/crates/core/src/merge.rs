//! Per-layer merge weights and parameter interpolation.
//!
//! [`recall_weights`] turns a similarity table into one softmax-normalized
//! weight vector per layer group, anchored on the newest model. [`merge`]
//! applies any such plan: every tensor in group `g` becomes the
//! `w_g`-weighted sum of the corresponding tensors. The baselines
//! (uniform averaging, task arithmetic, DARE and loss-weighted averaging)
//! live alongside.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::tasks::Sample;
use crate::checkpoint::{Checkpoint, LayerGroupIndex, META_CONFIG_JSON, META_MODEL_ID};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::similarity::{Metric, SimilarityTable};
use crate::tensor::{softmax, Tensor};

pub const META_PLAN_HASH: &str = "plan_hash";
const WEIGHT_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    Recall,
    Uniform,
    TaskVector,
    Dare,
    LossWeighted,
}

impl std::str::FromStr for MergeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recall" => Ok(Self::Recall),
            "uniform" => Ok(Self::Uniform),
            "task_vector" | "task-vector" => Ok(Self::TaskVector),
            "dare" => Ok(Self::Dare),
            "loss_weighted" | "loss-weighted" => Ok(Self::LossWeighted),
            other => Err(Error::Input(format!("unknown merge method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MergeHyper {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anchor: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metric: Option<Metric>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub euclidean_flip: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambdas: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dare_drop_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub losses: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergePlan {
    pub method: MergeMethod,
    pub include_base: bool,
    /// Participating model ids, in the order `weights` refers to.
    pub models: Vec<String>,
    /// `weights[g][q]`: weight of model `q` in layer group `g`.
    pub weights: Vec<Vec<f64>>,
    pub hyper: MergeHyper,
}

impl MergePlan {
    /// The same weight vector for every one of `groups` groups.
    pub fn global(method: MergeMethod, models: Vec<String>, w: Vec<f64>, groups: usize) -> Self {
        Self {
            method,
            include_base: true,
            models,
            weights: vec![w; groups],
            hyper: MergeHyper::default(),
        }
    }

    pub fn uniform(models: Vec<String>, groups: usize) -> Self {
        let n = models.len();
        Self::global(MergeMethod::Uniform, models, vec![1.0 / n as f64; n], groups)
    }

    /// Every group vector has one weight per model and sums to one.
    pub fn check_normalized(&self) -> Result<()> {
        for (g, w) in self.weights.iter().enumerate() {
            if w.len() != self.models.len() {
                return Err(Error::Completeness(format!(
                    "group {g} has {} weights for {} models",
                    w.len(),
                    self.models.len()
                )));
            }
            let s: f64 = w.iter().sum();
            if (s - 1.0).abs() > WEIGHT_SUM_TOL || w.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericDomain(format!("group {g} weights sum to {s}, not 1")));
            }
        }
        Ok(())
    }

    /// SHA-256 of the plan's JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("plan serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallOptions {
    pub include_base: bool,
    /// Divides the similarity scores before the softmax. 1 reproduces the plain weighting.
    pub temperature: f64,
    /// Use `1 - value` for the Euclidean metric, so closer models weigh more.
    pub euclidean_flip: bool,
}

impl Default for RecallOptions {
    fn default() -> Self {
        Self {
            include_base: true,
            temperature: 1.0,
            euclidean_flip: true,
        }
    }
}

/// Score fed to the softmax; larger always means closer.
pub fn merge_signal(metric: Metric, value: f64, euclidean_flip: bool) -> f64 {
    match metric {
        Metric::Euclidean if euclidean_flip => 1.0 - value,
        Metric::Mmd => -value,
        _ => value,
    }
}

/// `w_i^q = softmax_q(S_i^{anchor, q})` for every layer `i`; group `g` takes
/// layer `g`'s weights.
///
/// `base` names the original model in the table; when `include_base` is off
/// it is dropped from the participants before normalizing.
pub fn recall_weights(table: &SimilarityTable, anchor: &str, base: Option<&str>, opts: &RecallOptions) -> Result<MergePlan> {
    table.check_complete()?;
    if !(opts.temperature > 0.0 && opts.temperature.is_finite()) {
        return Err(Error::Input(format!("temperature must be > 0, got {}", opts.temperature)));
    }
    let a = table.model_index(anchor)?;
    let base_idx = base.map(|b| table.model_index(b)).transpose()?;
    if !opts.include_base && base_idx == Some(a) {
        return Err(Error::Input("the anchor cannot be excluded as the base model".into()));
    }
    let participants: Vec<usize> = (0..table.models.len())
        .filter(|&q| opts.include_base || Some(q) != base_idx)
        .collect();
    let weights = (0..table.num_layers())
        .map(|layer| {
            let scores: Vec<f64> = participants
                .iter()
                .map(|&q| merge_signal(table.metric, table.get(layer, a, q), opts.euclidean_flip) / opts.temperature)
                .collect();
            softmax(&scores)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MergePlan {
        method: MergeMethod::Recall,
        include_base: opts.include_base,
        models: participants.iter().map(|&q| table.models[q].clone()).collect(),
        weights,
        hyper: MergeHyper {
            anchor: Some(anchor.to_owned()),
            base: base.map(str::to_owned),
            metric: Some(table.metric),
            sigma: table.metric.uses_sigma().then_some(table.sigma),
            temperature: Some(opts.temperature),
            euclidean_flip: (table.metric == Metric::Euclidean).then_some(opts.euclidean_flip),
            ..Default::default()
        },
    })
}

fn check_compatible(ckpts: &[&Checkpoint]) -> Result<()> {
    let Some(first) = ckpts.first() else {
        return Err(Error::Input("nothing to merge".into()));
    };
    for (i, c) in ckpts.iter().enumerate().skip(1) {
        if c.len() != first.len() {
            return Err(Error::Compatibility(format!(
                "checkpoint {i} has {} tensors, checkpoint 0 has {}",
                c.len(),
                first.len()
            )));
        }
        for ((na, ta), (nb, tb)) in first.iter().zip(c.iter()) {
            if na != nb {
                return Err(Error::Compatibility(format!(
                    "checkpoint {i} has tensor `{nb}` where checkpoint 0 has `{na}`"
                )));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::Compatibility(format!(
                    "tensor `{na}`: shape {:?} in checkpoint {i}, {:?} in checkpoint 0",
                    tb.shape(),
                    ta.shape()
                )));
            }
        }
    }
    Ok(())
}

fn output_metadata(out: &mut Checkpoint, template: &Checkpoint, model_id: &str, plan: Option<&MergePlan>) {
    if let Some(cfg) = template.metadata().get(META_CONFIG_JSON) {
        out.set_metadata(META_CONFIG_JSON, cfg.clone());
    }
    out.set_metadata(META_MODEL_ID, model_id);
    if let Some(plan) = plan {
        out.set_metadata(META_PLAN_HASH, plan.hash());
    }
}

/// Weighted sum `Σ_q w_q θ_q` per element, accumulated in `f64` in model order.
fn combine(tensors: &[&Tensor], w: &[f64]) -> Result<Tensor> {
    let n = tensors[0].numel();
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let mut acc = 0f64;
        for (t, &wq) in tensors.iter().zip(w) {
            acc += wq * f64::from(t.data()[j]);
        }
        out.push(acc as f32);
    }
    Tensor::new(tensors[0].shape().to_vec(), out)
}

/// Applies `plan` group by group. `ckpts[q]` must correspond to `plan.models[q]`.
pub fn merge(ckpts: &[&Checkpoint], plan: &MergePlan, index: &LayerGroupIndex) -> Result<Checkpoint> {
    check_compatible(ckpts)?;
    if ckpts.len() != plan.models.len() {
        return Err(Error::Compatibility(format!(
            "plan covers {} models, {} checkpoints given",
            plan.models.len(),
            ckpts.len()
        )));
    }
    if plan.weights.len() != index.num_groups() {
        return Err(Error::Completeness(format!(
            "plan has {} weight groups, layer index has {}",
            plan.weights.len(),
            index.num_groups()
        )));
    }
    if let Some((g, w)) = plan.weights.iter().enumerate().find(|(_, w)| w.len() != ckpts.len()) {
        return Err(Error::Completeness(format!(
            "group {g} has {} weights for {} checkpoints",
            w.len(),
            ckpts.len()
        )));
    }
    let assignment = index.assignment(ckpts[0])?;
    let merged: Vec<(String, Tensor)> = assignment
        .par_iter()
        .map(|&(name, g)| {
            let parts: Vec<&Tensor> = ckpts.iter().map(|c| c.get(name).expect("compatible")).collect();
            combine(&parts, &plan.weights[g]).map(|t| (name.to_owned(), t))
        })
        .collect::<Result<_>>()?;
    let mut out = Checkpoint::new();
    for (name, t) in merged {
        out.insert(name, t)?;
    }
    output_metadata(&mut out, ckpts[0], "merged", Some(plan));
    Ok(out)
}

/// Plain parameter averaging with `w = 1/N` in every group.
pub fn uniform_merge(ckpts: &[&Checkpoint], index: &LayerGroupIndex) -> Result<Checkpoint> {
    let models = ckpts
        .iter()
        .enumerate()
        .map(|(i, c)| c.model_id().map_or_else(|| format!("model{i}"), str::to_owned))
        .collect();
    merge(ckpts, &MergePlan::uniform(models, index.num_groups()), index)
}

fn elementwise(base: &Checkpoint, experts: &[&Checkpoint], f: impl Fn(&str, usize, f64, &[f64]) -> f64 + Sync) -> Result<Checkpoint> {
    let mut all = vec![base];
    all.extend_from_slice(experts);
    check_compatible(&all)?;
    let names: Vec<&str> = base.names().collect();
    let tensors: Vec<(String, Tensor)> = names
        .par_iter()
        .map(|&name| {
            let b = base.get(name).expect("present");
            let ex: Vec<&Tensor> = experts.iter().map(|c| c.get(name).expect("compatible")).collect();
            let mut vals = vec![0f64; ex.len()];
            let data = (0..b.numel())
                .map(|j| {
                    for (v, t) in vals.iter_mut().zip(&ex) {
                        *v = f64::from(t.data()[j]);
                    }
                    f(name, j, f64::from(b.data()[j]), &vals) as f32
                })
                .collect();
            Tensor::new(b.shape().to_vec(), data).map(|t| (name.to_owned(), t))
        })
        .collect::<Result<_>>()?;
    let mut out = Checkpoint::new();
    for (n, t) in tensors {
        out.insert(n, t)?;
    }
    Ok(out)
}

/// Task arithmetic: `θ* = θ_base + Σ_q λ_q (θ_q − θ_base)`.
pub fn task_vector_merge(base: &Checkpoint, experts: &[&Checkpoint], lambdas: &[f64]) -> Result<Checkpoint> {
    if experts.is_empty() {
        return Err(Error::Input("task arithmetic needs at least one expert".into()));
    }
    if lambdas.len() != experts.len() {
        return Err(Error::Input(format!(
            "{} lambdas for {} experts",
            lambdas.len(),
            experts.len()
        )));
    }
    let mut out = elementwise(base, experts, |_, _, b, ex| {
        let mut acc = b;
        for (&t, &l) in ex.iter().zip(lambdas) {
            acc += l * (t - b);
        }
        acc
    })?;
    output_metadata(&mut out, base, "task_vector", None);
    Ok(out)
}

/// Counter-based uniform draw in `[0, 1)` keyed by `(seed, tensor name, element)`.
pub fn keyed_uniform(seed: u64, name: &str, index: usize) -> f64 {
    // FNV-1a over the name
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h.rotate_left(17) ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    // splitmix64 finalizer, twice
    for _ in 0..2 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    (z >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Drop-and-rescale: each delta element survives with probability `1 − p`
/// and is scaled by `1 / (1 − p)`; returns `θ_base + δ'`.
pub fn dare_sparsify(base: &Checkpoint, expert: &Checkpoint, drop_rate: f64, seed: u64) -> Result<Checkpoint> {
    if !(0.0..1.0).contains(&drop_rate) {
        return Err(Error::Input(format!("DARE drop rate must be in [0, 1), got {drop_rate}")));
    }
    let keep_scale = 1.0 / (1.0 - drop_rate);
    let mut out = elementwise(base, &[expert], |name, j, b, ex| {
        if keyed_uniform(seed, name, j) < drop_rate {
            b
        } else {
            b + (ex[0] - b) * keep_scale
        }
    })?;
    output_metadata(&mut out, expert, "dare", None);
    Ok(out)
}

/// DARE on every expert, then task arithmetic over the sparsified experts.
pub fn dare_merge(base: &Checkpoint, experts: &[&Checkpoint], lambdas: &[f64], drop_rate: f64, seed: u64) -> Result<Checkpoint> {
    let sparse = experts
        .iter()
        .enumerate()
        .map(|(i, e)| dare_sparsify(base, e, drop_rate, seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Checkpoint> = sparse.iter().collect();
    let mut out = task_vector_merge(base, &refs, lambdas)?;
    out.set_metadata(META_MODEL_ID, "dare");
    Ok(out)
}

/// Mean next-token cross-entropy over the answer tokens (`output` bytes and
/// the closing EOS) of each sample, teacher-forced.
pub fn mean_answer_loss(ckpt: &Checkpoint, cfg: &ModelConfig, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Input("validation set is empty".into()));
    }
    let model = Model::new(ckpt, cfg)?;
    let per_sample: Vec<(f64, usize)> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            answer_loss(&model, s).map_err(|e| Error::Sample {
                index: i,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let (total, count) = per_sample.iter().fold((0.0, 0usize), |(t, c), &(l, n)| (t + l, c + n));
    Ok(total / count as f64)
}

fn answer_loss(model: &Model<'_>, s: &Sample) -> Result<(f64, usize)> {
    let (tokens, first_target) = s.teacher_forced(model.config())?;
    let out = model.forward(&tokens[..tokens.len() - 1])?;
    let mut total = 0.0;
    let mut count = 0;
    for pos in first_target - 1..tokens.len() - 1 {
        let row = out.logits.row(pos);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = f64::from(max) + row.iter().map(|&v| (f64::from(v) - f64::from(max)).exp()).sum::<f64>().ln();
        total += lse - f64::from(row[tokens[pos + 1] as usize]);
        count += 1;
    }
    Ok((total, count))
}

/// Single global weight vector `softmax(−ℓ)` from per-model validation loss.
pub fn loss_weighted_plan(ckpts: &[&Checkpoint], cfg: &ModelConfig, validation: &[Sample], groups: usize) -> Result<MergePlan> {
    let losses = ckpts
        .iter()
        .map(|c| mean_answer_loss(c, cfg, validation))
        .collect::<Result<Vec<_>>>()?;
    let neg: Vec<f64> = losses.iter().map(|l| -l).collect();
    let w = softmax(&neg)?;
    let models = ckpts
        .iter()
        .enumerate()
        .map(|(i, c)| c.model_id().map_or_else(|| format!("model{i}"), str::to_owned))
        .collect();
    let mut plan = MergePlan::global(MergeMethod::LossWeighted, models, w, groups);
    plan.hyper.losses = Some(losses);
    Ok(plan)
}

pub fn loss_weighted_merge(
    ckpts: &[&Checkpoint],
    cfg: &ModelConfig,
    validation: &[Sample],
    index: &LayerGroupIndex,
) -> Result<(Checkpoint, MergePlan)> {
    let plan = loss_weighted_plan(ckpts, cfg, validation, index.num_groups())?;
    Ok((merge(ckpts, &plan, index)?, plan))
}
