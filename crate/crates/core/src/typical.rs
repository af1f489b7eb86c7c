//! Typical-sample selection: cluster the new task's representations and keep
//! the real sample nearest to every center.

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::RepresentationSet;
use crate::kmeans::{kmeans, sq_dist, KMeansResult, DEFAULT_MAX_ITER};

pub const DEFAULT_M_PER_LAYER: usize = 20;

/// Which layers' representations drive the clustering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LayerPolicy {
    #[default]
    All,
    Last,
    Layers(Vec<usize>),
}

impl LayerPolicy {
    pub fn resolve(&self, num_layers: usize) -> Result<Vec<usize>> {
        let layers = match self {
            LayerPolicy::All => (0..num_layers).collect(),
            LayerPolicy::Last => num_layers.checked_sub(1).into_iter().collect(),
            LayerPolicy::Layers(v) => v.clone(),
        };
        if layers.is_empty() {
            return Err(Error::Input("layer selection is empty".into()));
        }
        if let Some(bad) = layers.iter().find(|&&l| l >= num_layers) {
            return Err(Error::Input(format!(
                "layer {bad} out of range for {num_layers} layers"
            )));
        }
        Ok(layers)
    }
}

impl std::str::FromStr for LayerPolicy {
    type Err = Error;

    /// `all`, `last`, or a comma-separated list of layer indices.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "all" => Ok(Self::All),
            "last" => Ok(Self::Last),
            "" => Err(Error::Input("layer selection is empty".into())),
            list => list
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Input(format!("bad layer index `{p}`")))
                })
                .collect::<Result<Vec<_>>>()
                .map(Self::Layers),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypicalDataset {
    pub sample_ids: Vec<usize>,
    /// Sample id → layers whose clustering picked it.
    pub provenance: IndexMap<String, Vec<usize>>,
    pub seed: u64,
}

impl TypicalDataset {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }
}

/// Seed for layer `layer`'s clustering, derived from the run seed.
fn layer_seed(seed: u64, layer: usize) -> u64 {
    seed ^ (layer as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Index (row) of the sample nearest to `center`; ties go to the lowest sample id.
fn nearest_sample(reps: &RepresentationSet, layer: usize, center: &[f64]) -> Result<usize> {
    let t = reps.layer(layer)?;
    let mut best: Option<(f64, usize, usize)> = None;
    for (row, r) in t.rows().enumerate() {
        let d = sq_dist(r, center);
        let id = reps.sample_ids[row];
        let better = match best {
            None => true,
            Some((bd, bid, _)) => d < bd || (d == bd && id < bid),
        };
        if better {
            best = Some((d, id, row));
        }
    }
    Ok(best.expect("non-empty layer").2)
}

/// Per-layer clustering and nearest-to-center picks, unioned in layer order
/// and deduplicated by first appearance.
pub fn select_typical(
    reps: &RepresentationSet,
    m_per_layer: usize,
    policy: &LayerPolicy,
    seed: u64,
) -> Result<TypicalDataset> {
    let layers = policy.resolve(reps.num_layers())?;
    if m_per_layer == 0 || m_per_layer > reps.num_samples() {
        return Err(Error::Input(format!(
            "m_per_layer must be in 1..={}, got {m_per_layer}",
            reps.num_samples()
        )));
    }
    let picks: Vec<(usize, Vec<usize>)> = layers
        .par_iter()
        .map(|&layer| -> Result<(usize, Vec<usize>)> {
            let km: KMeansResult = kmeans(reps.layer(layer)?, m_per_layer, layer_seed(seed, layer), DEFAULT_MAX_ITER)?;
            let ids = km
                .centers
                .iter()
                .map(|c| nearest_sample(reps, layer, c).map(|row| reps.sample_ids[row]))
                .collect::<Result<Vec<_>>>()?;
            Ok((layer, ids))
        })
        .collect::<Result<_>>()?;

    let mut sample_ids = Vec::new();
    let mut provenance: IndexMap<String, Vec<usize>> = IndexMap::new();
    for (layer, ids) in picks {
        for id in ids {
            let entry = provenance.entry(id.to_string()).or_default();
            if entry.is_empty() {
                sample_ids.push(id);
            }
            if !entry.contains(&layer) {
                entry.push(layer);
            }
        }
    }
    Ok(TypicalDataset {
        sample_ids,
        provenance,
        seed,
    })
}
