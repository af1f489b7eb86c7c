//! Layer-wise inter-model similarity over aligned representation sets.
//!
//! Five metrics: RBF kernel (the default), cosine, normalized Euclidean
//! distance, linear CKA and biased MMD² with an RBF kernel. RBF, cosine and
//! Euclidean compare paired rows (the same sample under two models); CKA and
//! MMD compare the two sets as wholes.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::RepresentationSet;
use crate::tensor::Tensor;

pub const DEFAULT_SIGMA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Rbf,
    Cosine,
    Euclidean,
    Cka,
    Mmd,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Rbf, Metric::Cosine, Metric::Euclidean, Metric::Cka, Metric::Mmd];

    /// Value of `S(p, p)`.
    pub fn self_value(self) -> f64 {
        match self {
            Metric::Rbf | Metric::Cosine | Metric::Cka => 1.0,
            Metric::Euclidean | Metric::Mmd => 0.0,
        }
    }

    pub fn uses_sigma(self) -> bool {
        matches!(self, Metric::Rbf | Metric::Mmd)
    }

    /// True when the self-value is the metric's global maximum, so the anchor
    /// always dominates its own softmax row.
    pub fn self_is_max(self) -> bool {
        matches!(self, Metric::Rbf | Metric::Cosine | Metric::Cka)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Rbf => "rbf",
            Metric::Cosine => "cosine",
            Metric::Euclidean => "euclidean",
            Metric::Cka => "cka",
            Metric::Mmd => "mmd",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rbf" => Ok(Metric::Rbf),
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            "cka" => Ok(Metric::Cka),
            "mmd" => Ok(Metric::Mmd),
            other => Err(Error::Input(format!(
                "unknown metric `{other}` (expected rbf, cosine, euclidean, cka or mmd)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityOptions {
    pub metric: Metric,
    pub sigma: f64,
    /// Column-center before linear CKA.
    pub cka_centered: bool,
}

impl Default for SimilarityOptions {
    fn default() -> Self {
        Self {
            metric: Metric::Rbf,
            sigma: DEFAULT_SIGMA,
            cka_centered: true,
        }
    }
}

impl SimilarityOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Input(format!("sigma must be a finite value > 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTable {
    pub metric: Metric,
    pub sigma: f64,
    pub cka_centered: bool,
    pub models: Vec<String>,
    /// `values[layer][p][q]`.
    pub values: Vec<Vec<Vec<f64>>>,
}

impl SimilarityTable {
    pub fn num_layers(&self) -> usize {
        self.values.len()
    }

    pub fn model_index(&self, id: &str) -> Result<usize> {
        self.models
            .iter()
            .position(|m| m == id)
            .ok_or_else(|| Error::Completeness(format!("model `{id}` is not in the similarity table")))
    }

    pub fn get(&self, layer: usize, p: usize, q: usize) -> f64 {
        self.values[layer][p][q]
    }

    /// Checks shape: every layer is a full `models × models` matrix of finite values.
    pub fn check_complete(&self) -> Result<()> {
        let n = self.models.len();
        if n == 0 || self.values.is_empty() {
            return Err(Error::Completeness("similarity table is empty".into()));
        }
        for (l, m) in self.values.iter().enumerate() {
            if m.len() != n || m.iter().any(|r| r.len() != n) {
                return Err(Error::Completeness(format!("layer {l} is not a {n}x{n} matrix")));
            }
            if m.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Completeness(format!("layer {l} has missing (non-finite) entries")));
            }
        }
        Ok(())
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "layer,p,q,value")?;
        for (l, m) in self.values.iter().enumerate() {
            for (p, row) in m.iter().enumerate() {
                for (q, v) in row.iter().enumerate() {
                    writeln!(w, "{l},{},{},{v}", self.models[p], self.models[q])?;
                }
            }
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let t: Self = serde_json::from_slice(&bytes)?;
        t.check_complete()?;
        Ok(t)
    }
}

fn check_aligned(p: &RepresentationSet, q: &RepresentationSet) -> Result<()> {
    if p.sample_ids != q.sample_ids {
        return Err(Error::Alignment(format!(
            "models `{}` and `{}` have different sample ids",
            p.model_id, q.model_id
        )));
    }
    if p.num_samples() == 0 {
        return Err(Error::Alignment("no samples to compare".into()));
    }
    Ok(())
}

fn pair_layers<'a>(p: &'a RepresentationSet, q: &'a RepresentationSet, layer: usize) -> Result<(&'a Tensor, &'a Tensor)> {
    check_aligned(p, q)?;
    let (x, y) = (p.layer(layer)?, q.layer(layer)?);
    if x.shape() != y.shape() {
        return Err(Error::Alignment(format!(
            "layer {layer} shapes differ: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    Ok((x, y))
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

fn rbf_kernel(a: &[f32], b: &[f32], sigma: f64) -> f64 {
    (-sq_dist(a, b) / (2.0 * sigma * sigma)).exp()
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Input(format!("sigma must be a finite value > 0, got {sigma}")));
    }
    Ok(())
}

/// Mean over paired rows of `exp(-‖x - y‖² / (2σ²))`.
pub fn rbf_rows(x: &Tensor, y: &Tensor, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    let m = x.num_rows();
    Ok(x.rows().zip(y.rows()).map(|(a, b)| rbf_kernel(a, b, sigma)).sum::<f64>() / m as f64)
}

pub fn rbf_similarity(p: &RepresentationSet, q: &RepresentationSet, layer: usize, sigma: f64) -> Result<f64> {
    let (x, y) = pair_layers(p, q, layer)?;
    rbf_rows(x, y, sigma)
}

/// Mean over paired rows of `xᵀy / (‖x‖‖y‖)`.
pub fn cosine_rows(x: &Tensor, y: &Tensor) -> Result<f64> {
    let mut total = 0.0;
    for (k, (a, b)) in x.rows().zip(y.rows()).enumerate() {
        total += cosine(a, b).ok_or_else(|| Error::NumericDomain(format!("row {k} has zero norm")))?;
    }
    Ok(total / x.num_rows() as f64)
}

pub(crate) fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(dot / (na.sqrt() * nb.sqrt()))
}

pub fn cosine_similarity(p: &RepresentationSet, q: &RepresentationSet, layer: usize) -> Result<f64> {
    let (x, y) = pair_layers(p, q, layer)?;
    cosine_rows(x, y)
}

/// `ret[p][q] = mean_k ‖x_pk − x_qk‖ / D`, where `D` is the largest per-sample
/// distance over every model pair at this layer (all zeros when `D = 0`).
pub fn euclidean_similarity(reps: &[RepresentationSet], layer: usize) -> Result<Vec<Vec<f64>>> {
    let n = reps.len();
    if n < 2 {
        return Err(Error::Input("euclidean similarity needs at least two models".into()));
    }
    let mut layers = Vec::with_capacity(n);
    for r in reps {
        check_aligned(&reps[0], r)?;
        layers.push(r.layer(layer)?);
    }
    let mut mean = vec![vec![0f64; n]; n];
    let mut max = 0f64;
    for p in 0..n {
        for q in p + 1..n {
            let mut total = 0.0;
            for (a, b) in layers[p].rows().zip(layers[q].rows()) {
                let d = sq_dist(a, b).sqrt();
                max = max.max(d);
                total += d;
            }
            let m = total / layers[p].num_rows() as f64;
            mean[p][q] = m;
            mean[q][p] = m;
        }
    }
    if max == 0.0 {
        return Ok(vec![vec![0.0; n]; n]);
    }
    Ok(mean.into_iter().map(|row| row.into_iter().map(|v| v / max).collect()).collect())
}

fn to_matrix(t: &Tensor, centered: bool) -> Vec<Vec<f64>> {
    let e = t.last_dim();
    let mut rows: Vec<Vec<f64>> = t.rows().map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect();
    if centered {
        let m = rows.len() as f64;
        let mut means = vec![0f64; e];
        for r in &rows {
            for (s, v) in means.iter_mut().zip(r) {
                *s += v;
            }
        }
        means.iter_mut().for_each(|s| *s /= m);
        for r in rows.iter_mut() {
            for (v, mu) in r.iter_mut().zip(&means) {
                *v -= mu;
            }
        }
    }
    rows
}

/// `‖AᵀB‖_F²` for row-major `[m × E]` matrices.
fn cross_frobenius_sq(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (ea, eb) = (a[0].len(), b[0].len());
    let mut prod = vec![0f64; ea * eb];
    for (ra, rb) in a.iter().zip(b) {
        for (i, &x) in ra.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &mut prod[i * eb..(i + 1) * eb];
            for (slot, &y) in row.iter_mut().zip(rb) {
                *slot += x * y;
            }
        }
    }
    prod.iter().map(|v| v * v).sum()
}

/// Linear CKA: `‖XᵀY‖_F² / (‖XᵀX‖_F · ‖YᵀY‖_F)`.
pub fn cka(x: &Tensor, y: &Tensor, centered: bool) -> Result<f64> {
    if x.num_rows() != y.num_rows() {
        return Err(Error::Alignment(format!(
            "CKA needs the same sample count, got {} and {}",
            x.num_rows(),
            y.num_rows()
        )));
    }
    if x.num_rows() < 2 {
        return Err(Error::Input("CKA needs at least two samples".into()));
    }
    let (a, b) = (to_matrix(x, centered), to_matrix(y, centered));
    let xx = cross_frobenius_sq(&a, &a).sqrt();
    let yy = cross_frobenius_sq(&b, &b).sqrt();
    if xx == 0.0 || yy == 0.0 {
        return Err(Error::NumericDomain("CKA of a zero-variance matrix".into()));
    }
    Ok(cross_frobenius_sq(&a, &b) / (xx * yy))
}

pub fn cka_similarity(p: &RepresentationSet, q: &RepresentationSet, layer: usize, centered: bool) -> Result<f64> {
    let (x, y) = pair_layers(p, q, layer)?;
    cka(x, y, centered)
}

/// Biased (V-statistic) MMD² with an RBF kernel of bandwidth `sigma`.
pub fn mmd2(x: &Tensor, y: &Tensor, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    if x.last_dim() != y.last_dim() {
        return Err(Error::Alignment(format!(
            "MMD inputs have different widths: {} and {}",
            x.last_dim(),
            y.last_dim()
        )));
    }
    let mean_kernel = |a: &Tensor, b: &Tensor| {
        let mut s = 0.0;
        for ra in a.rows() {
            for rb in b.rows() {
                s += rbf_kernel(ra, rb, sigma);
            }
        }
        s / (a.num_rows() * b.num_rows()) as f64
    };
    Ok(mean_kernel(x, x) + mean_kernel(y, y) - 2.0 * mean_kernel(x, y))
}

pub fn mmd_similarity(p: &RepresentationSet, q: &RepresentationSet, layer: usize, sigma: f64) -> Result<f64> {
    let (x, y) = pair_layers(p, q, layer)?;
    mmd2(x, y, sigma)
}

/// Full symmetric table over every layer and model pair.
///
/// When `typical` is given, each set is first restricted to those sample ids
/// (in that order).
pub fn build_table(reps: &[RepresentationSet], typical: Option<&[usize]>, opts: &SimilarityOptions) -> Result<SimilarityTable> {
    opts.validate()?;
    if reps.is_empty() {
        return Err(Error::Completeness("no models to compare".into()));
    }
    let owned;
    let reps: &[RepresentationSet] = match typical {
        Some(ids) => {
            owned = reps.iter().map(|r| r.select(ids)).collect::<Result<Vec<_>>>()?;
            &owned
        }
        None => reps,
    };
    let layers = reps[0].num_layers();
    for r in reps {
        if r.num_layers() != layers {
            return Err(Error::Completeness(format!(
                "model `{}` has {} layers, expected {layers}",
                r.model_id,
                r.num_layers()
            )));
        }
        check_aligned(&reps[0], r)?;
    }
    let mut seen = std::collections::HashSet::new();
    for r in reps {
        if !seen.insert(r.model_id.as_str()) {
            return Err(Error::Input(format!("model id `{}` appears twice", r.model_id)));
        }
    }
    let n = reps.len();
    let self_value = opts.metric.self_value();

    let values: Vec<Vec<Vec<f64>>> = (0..layers)
        .into_par_iter()
        .map(|layer| -> Result<Vec<Vec<f64>>> {
            let mut m = vec![vec![self_value; n]; n];
            if opts.metric == Metric::Euclidean {
                if n < 2 {
                    return Ok(m);
                }
                let e = euclidean_similarity(reps, layer)?;
                for p in 0..n {
                    for q in 0..n {
                        if p != q {
                            m[p][q] = e[p][q];
                        }
                    }
                }
                return Ok(m);
            }
            for p in 0..n {
                for q in p + 1..n {
                    let (a, b) = (&reps[p], &reps[q]);
                    let v = match opts.metric {
                        Metric::Rbf => rbf_similarity(a, b, layer, opts.sigma)?,
                        Metric::Cosine => cosine_similarity(a, b, layer)?,
                        Metric::Cka => cka_similarity(a, b, layer, opts.cka_centered)?,
                        Metric::Mmd => mmd_similarity(a, b, layer, opts.sigma)?,
                        Metric::Euclidean => unreachable!(),
                    };
                    m[p][q] = v;
                    m[q][p] = v;
                }
            }
            Ok(m)
        })
        .collect::<Result<_>>()?;

    Ok(SimilarityTable {
        metric: opts.metric,
        sigma: opts.sigma,
        cka_centered: opts.cka_centered,
        models: reps.iter().map(|r| r.model_id.clone()).collect(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(id: &str, rows: &[&[f32]]) -> RepresentationSet {
        let t = Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        RepresentationSet::new(id, (0..rows.len()).collect(), vec![t]).unwrap()
    }

    #[test]
    fn rbf_scalar_cases() {
        let p = set("p", &[&[1.0, 0.0]]);
        let q = set("q", &[&[0.0, 0.0]]);
        assert!((rbf_similarity(&p, &q, 0, 1.0).unwrap() - (-0.5f64).exp()).abs() < 1e-12);
        assert!((rbf_similarity(&p, &q, 0, 1.0).unwrap() - 0.606531).abs() < 1e-6);
        assert_eq!(rbf_similarity(&p, &p, 0, 1.0).unwrap(), 1.0);
        assert!((rbf_similarity(&p, &q, 0, 1e6).unwrap() - 1.0).abs() < 1e-6);
        assert!(rbf_similarity(&p, &q, 0, 0.0).is_err());
    }

    #[test]
    fn misaligned_ids_rejected() {
        let p = set("p", &[&[1.0], &[2.0]]);
        let mut q = set("q", &[&[1.0], &[2.0]]);
        q.sample_ids = vec![1, 0];
        assert!(matches!(rbf_similarity(&p, &q, 0, 1.0), Err(Error::Alignment(_))));
    }

    #[test]
    fn cosine_cases() {
        let r = set("r", &[&[1.0, 2.0]]);
        let neg = set("n", &[&[-1.0, -2.0]]);
        assert!((cosine_similarity(&r, &r, 0).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_similarity(&r, &neg, 0).unwrap() + 1.0).abs() < 1e-12);
        let a = set("a", &[&[1.0, 0.0]]);
        let b = set("b", &[&[1.0, 1.0]]);
        assert!((cosine_similarity(&a, &b, 0).unwrap() - 0.707107).abs() < 1e-6);
        let o = set("o", &[&[0.0, 3.0]]);
        assert_eq!(cosine_similarity(&a, &o, 0).unwrap(), 0.0);
        let z = set("z", &[&[0.0, 0.0]]);
        assert!(matches!(cosine_similarity(&a, &z, 0), Err(Error::NumericDomain(_))));
    }

    #[test]
    fn euclidean_cases() {
        let a = set("a", &[&[0.0]]);
        let b = set("b", &[&[1.0]]);
        let c = set("c", &[&[3.0]]);
        let m = euclidean_similarity(&[a.clone(), b, c], 0).unwrap();
        assert!((m[0][1] - 1.0 / 3.0).abs() < 1e-12);
        assert!((m[1][2] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m[0][2], 1.0);
        let same = euclidean_similarity(&[a.clone(), a.clone()], 0).unwrap();
        assert_eq!(same, vec![vec![0.0; 2]; 2]);
        assert!(euclidean_similarity(&[a], 0).is_err());
    }

    #[test]
    fn cka_cases() {
        let x = Tensor::new(vec![4, 2], vec![1.0, 2.0, -1.0, 0.5, 3.0, -2.0, 0.0, 1.0]).unwrap();
        assert!((cka(&x, &x, true).unwrap() - 1.0).abs() < 1e-12);
        let scaled = Tensor::new(vec![4, 2], x.data().iter().map(|v| v * 3.7).collect()).unwrap();
        assert!((cka(&x, &scaled, true).unwrap() - 1.0).abs() < 1e-6);
        let flat = Tensor::new(vec![3, 2], vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(matches!(cka(&flat, &flat, true), Err(Error::NumericDomain(_))));
        // uncentered mode accepts constant columns
        assert!((cka(&flat, &flat, false).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mmd_cases() {
        let x = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        let y = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let v = mmd2(&x, &y, 1.0).unwrap();
        assert!((v - (2.0 - 2.0 * (-0.5f64).exp())).abs() < 1e-12);
        assert!((v - 0.786939).abs() < 1e-6);
        assert_eq!(mmd2(&x, &y, 1.0).unwrap(), mmd2(&y, &x, 1.0).unwrap());
        let many = Tensor::new(vec![3, 2], vec![1.0, 2.0, 0.0, -1.0, 4.0, 4.0]).unwrap();
        assert!(mmd2(&many, &many, 1.0).unwrap().abs() < 1e-9);
    }

    #[test]
    fn table_for_identical_models_is_all_ones() {
        let a = set("a", &[&[1.0, 2.0], &[3.0, 1.0]]);
        let mut b = a.clone();
        b.model_id = "b".into();
        let t = build_table(&[a, b], None, &SimilarityOptions::default()).unwrap();
        assert!(t.values.iter().flatten().flatten().all(|&v| v == 1.0));
        t.check_complete().unwrap();
    }

    #[test]
    fn table_rejects_layer_mismatch_and_bad_sigma() {
        let a = set("a", &[&[1.0]]);
        let t2 = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let b = RepresentationSet::new("b", vec![0], vec![t2.clone(), t2]).unwrap();
        assert!(matches!(
            build_table(&[a.clone(), b], None, &SimilarityOptions::default()),
            Err(Error::Completeness(_))
        ));
        let opts = SimilarityOptions { sigma: 0.0, ..Default::default() };
        assert!(build_table(&[a], None, &opts).is_err());
    }

    #[test]
    fn csv_layout() {
        let a = set("a", &[&[1.0]]);
        let b = set("b", &[&[1.0]]);
        let t = build_table(&[a, b], None, &SimilarityOptions::default()).unwrap();
        let mut out = Vec::new();
        t.write_csv(&mut out).unwrap();
        let s = String::from_utf8(out).unwrap();
        assert_eq!(s.lines().next(), Some("layer,p,q,value"));
        assert_eq!(s.lines().count(), 5);
        assert!(s.contains("0,a,b,1"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn sets(raw: &[Vec<f32>], models: usize, rows: usize, dim: usize) -> Vec<RepresentationSet> {
            (0..models)
                .map(|m| {
                    let layers = (0..2)
                        .map(|l| {
                            let start = ((m * 2 + l) * rows * dim) % raw.len();
                            let data = (0..rows * dim).map(|k| raw[(start + k) % raw.len()][0] + (m + l + k) as f32 * 0.01).collect();
                            Tensor::new(vec![rows, dim], data).unwrap()
                        })
                        .collect();
                    RepresentationSet::new(format!("m{m}"), (0..rows).collect(), layers).unwrap()
                })
                .collect()
        }

        proptest! {
            #[test]
            fn table_matches_pairwise_loop(
                raw in prop::collection::vec(prop::collection::vec(-3f32..3.0, 1), 8..40),
                models in 2usize..4,
                sigma in 0.3f64..5.0,
            ) {
                let reps = sets(&raw, models, 3, 2);
                for metric in [Metric::Rbf, Metric::Cosine, Metric::Mmd] {
                    let opts = SimilarityOptions { metric, sigma, ..Default::default() };
                    let Ok(t) = build_table(&reps, None, &opts) else { continue };
                    for layer in 0..2 {
                        for p in 0..models {
                            for q in 0..models {
                                let want = if p == q {
                                    metric.self_value()
                                } else {
                                    match metric {
                                        Metric::Rbf => rbf_similarity(&reps[p], &reps[q], layer, sigma).unwrap(),
                                        Metric::Cosine => cosine_similarity(&reps[p], &reps[q], layer).unwrap(),
                                        _ => mmd_similarity(&reps[p], &reps[q], layer, sigma).unwrap(),
                                    }
                                };
                                prop_assert!((t.get(layer, p, q) - want).abs() < 1e-12);
                                prop_assert_eq!(t.get(layer, p, q), t.get(layer, q, p));
                            }
                        }
                    }
                }
            }

            #[test]
            fn rbf_grows_with_sigma(
                a in prop::collection::vec(-5f32..5.0, 4),
                b in prop::collection::vec(-5f32..5.0, 4),
                s1 in 0.1f64..10.0,
                ds in 0.0f64..10.0,
            ) {
                let x = Tensor::new(vec![2, 2], a).unwrap();
                let y = Tensor::new(vec![2, 2], b).unwrap();
                let lo = rbf_rows(&x, &y, s1).unwrap();
                let hi = rbf_rows(&x, &y, s1 + ds).unwrap();
                prop_assert!(lo <= hi + 1e-15);
                prop_assert!((0.0..=1.0).contains(&lo));
            }
        }
    }
}
