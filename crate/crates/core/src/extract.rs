//! Pooled per-layer representations of a dataset under one model.
//!
//! Samples are processed `batch_hint` at a time. Hidden states for a chunk
//! are pooled as soon as the forward pass returns and then dropped, so the
//! transient footprint is `O(batch_hint · L_tok · E · layers)` on top of the
//! output matrices. Each pooled vector is written into its pre-assigned row,
//! which keeps the result independent of chunking and thread scheduling.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;

use crate::checkpoint::{Checkpoint, META_MODEL_ID};
use crate::error::{Error, Result};
use crate::model::{tokenize, Model, ModelConfig};
use crate::tensor::Tensor;

const META_SAMPLE_IDS: &str = "sample_ids";

/// Layer `i` → `[m × E]` matrix of pooled vectors, rows aligned to `sample_ids`.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationSet {
    pub model_id: String,
    pub sample_ids: Vec<usize>,
    layers: Vec<Tensor>,
}

impl RepresentationSet {
    pub fn new(model_id: impl Into<String>, sample_ids: Vec<usize>, layers: Vec<Tensor>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Input("representation set needs at least one layer".into()));
        }
        for (i, t) in layers.iter().enumerate() {
            if t.shape().len() != 2 || t.shape()[0] != sample_ids.len() {
                return Err(Error::Dimension(format!(
                    "layer {i} has shape {:?}, expected [{}, E]",
                    t.shape(),
                    sample_ids.len()
                )));
            }
            if !t.is_finite() {
                return Err(Error::NumericDomain(format!("layer {i} has non-finite rows")));
            }
        }
        Ok(Self {
            model_id: model_id.into(),
            sample_ids,
            layers,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn dim(&self) -> usize {
        self.layers[0].last_dim()
    }

    pub fn layer(&self, i: usize) -> Result<&Tensor> {
        self.layers.get(i).ok_or_else(|| {
            Error::Completeness(format!(
                "model `{}` has {} layers, layer {i} requested",
                self.model_id,
                self.layers.len()
            ))
        })
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    /// Rows for `ids`, in that order.
    pub fn select(&self, ids: &[usize]) -> Result<Self> {
        let pos: HashMap<usize, usize> = self.sample_ids.iter().enumerate().map(|(p, &id)| (id, p)).collect();
        let rows = ids
            .iter()
            .map(|id| {
                pos.get(id).copied().ok_or_else(|| {
                    Error::Alignment(format!("model `{}` has no row for sample {id}", self.model_id))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let layers = self
            .layers
            .iter()
            .map(|t| {
                let data = rows.iter().flat_map(|&r| t.row(r).iter().copied()).collect();
                Tensor::new(vec![rows.len(), t.last_dim()], data)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.model_id.clone(), ids.to_vec(), layers)
    }

    /// Writes the `reps.{model_id}.st` sidecar: tensors `layer.{i}`, sample ids in metadata.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new();
        for (i, t) in self.layers.iter().enumerate() {
            c.insert(format!("layer.{i}"), t.clone())?;
        }
        c.set_metadata(META_MODEL_ID, self.model_id.clone());
        c.set_metadata(META_SAMPLE_IDS, serde_json::to_string(&self.sample_ids)?);
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let model_id = c.model_id().unwrap_or("unknown").to_owned();
        let ids: Vec<usize> = serde_json::from_str(
            c.metadata()
                .get(META_SAMPLE_IDS)
                .ok_or_else(|| Error::Input("representation file lacks `sample_ids` metadata".into()))?,
        )?;
        let layers = (0..c.len())
            .map(|i| c.tensor(&format!("layer.{i}")).cloned())
            .collect::<Result<Vec<_>>>()?;
        Self::new(model_id, ids, layers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn sidecar_name(model_id: &str) -> String {
        format!("reps.{model_id}.st")
    }
}

/// Token-mean of one layer's hidden states: `r = (1/L) Σ r_i`.
pub fn pool(hs_layer: &Tensor) -> Result<Tensor> {
    if hs_layer.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "pool expects [L_tok, E], got {:?}",
            hs_layer.shape()
        )));
    }
    let n = hs_layer.num_rows();
    let e = hs_layer.last_dim();
    let mut acc = vec![0f64; e];
    for row in hs_layer.rows() {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += f64::from(v);
        }
    }
    Tensor::from_vec(acc.into_iter().map(|a| (a / n as f64) as f32).collect())
}

/// Pools every layer of one sample's forward pass.
pub fn pooled_layers(model: &Model<'_>, text: &str) -> Result<Vec<Tensor>> {
    let tokens = tokenize(text, model.config())?;
    let out = model.forward(&tokens)?;
    out.hidden.layers().iter().map(pool).collect()
}

/// Representations for `texts`, sample ids `0..n`.
pub fn extract(ckpt: &Checkpoint, cfg: &ModelConfig, texts: &[&str], batch_hint: usize) -> Result<RepresentationSet> {
    let ids: Vec<usize> = (0..texts.len()).collect();
    extract_with_ids(ckpt, cfg, &ids, texts, batch_hint)
}

/// Representations for `texts`, labelled by `ids` (dataset indices).
pub fn extract_with_ids(
    ckpt: &Checkpoint,
    cfg: &ModelConfig,
    ids: &[usize],
    texts: &[&str],
    batch_hint: usize,
) -> Result<RepresentationSet> {
    if texts.is_empty() {
        return Err(Error::Input("cannot extract representations from an empty dataset".into()));
    }
    if ids.len() != texts.len() {
        return Err(Error::Input(format!(
            "{} sample ids for {} texts",
            ids.len(),
            texts.len()
        )));
    }
    let model = Model::new(ckpt, cfg)?;
    let (n, e, taps) = (texts.len(), cfg.embed_dim, cfg.num_taps());
    let mut out: Vec<Vec<f32>> = vec![vec![0f32; n * e]; taps];
    let chunk = batch_hint.max(1);
    for start in (0..n).step_by(chunk) {
        let end = (start + chunk).min(n);
        let pooled: Vec<Vec<Tensor>> = (start..end)
            .into_par_iter()
            .map(|k| {
                pooled_layers(&model, texts[k]).map_err(|e| Error::Sample {
                    index: ids[k],
                    source: Box::new(e),
                })
            })
            .collect::<Result<_>>()?;
        for (offset, layers) in pooled.into_iter().enumerate() {
            let row = start + offset;
            for (layer, v) in layers.iter().enumerate() {
                out[layer][row * e..(row + 1) * e].copy_from_slice(v.data());
            }
        }
    }
    let layers = out
        .into_iter()
        .map(|d| Tensor::new(vec![n, e], d))
        .collect::<Result<Vec<_>>>()?;
    RepresentationSet::new(ckpt.model_id().unwrap_or("unknown"), ids.to_vec(), layers)
}
