//! Layer-wise similarity curves within and across models.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::RepresentationSet;
use crate::similarity::{build_table, cosine, SimilarityOptions};

/// Mean cosine between tap `boundary` and tap `boundary + 1`. `valid` is
/// false when some sample has a zero vector on either side; `value` is then NaN.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdjacentPoint {
    pub boundary: usize,
    pub value: f64,
    pub valid: bool,
}

pub fn intra_model_curve(reps: &RepresentationSet) -> Vec<AdjacentPoint> {
    let layers = reps.layers();
    (0..layers.len().saturating_sub(1))
        .map(|b| {
            let (x, y) = (&layers[b], &layers[b + 1]);
            let mut total = 0.0;
            let mut valid = true;
            for (a, c) in x.rows().zip(y.rows()) {
                match cosine(a, c) {
                    Some(v) => total += v,
                    None => {
                        valid = false;
                        break;
                    }
                }
            }
            AdjacentPoint {
                boundary: b,
                value: if valid { total / x.num_rows() as f64 } else { f64::NAN },
                valid,
            }
        })
        .collect()
}

/// `S_i(a, b)` for every layer `i` under the given metric.
pub fn inter_model_curve(a: &RepresentationSet, b: &RepresentationSet, opts: &SimilarityOptions) -> Result<Vec<f64>> {
    if a.model_id == b.model_id {
        // a table needs distinct ids; compare under a renamed copy
        let mut b2 = b.clone();
        b2.model_id = format!("{}#2", b.model_id);
        return inter_model_curve(a, &b2, opts);
    }
    let table = build_table(&[a.clone(), b.clone()], None, opts)?;
    Ok((0..table.num_layers()).map(|i| table.get(i, 0, 1)).collect())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut r = vec![0f64; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. NaN when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Input(format!(
            "spearman needs two equal-length series of length >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NumericDomain("spearman input is not finite".into()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationReport {
    pub intra: Vec<(String, Vec<AdjacentPoint>)>,
    /// `(model a, model b, per-layer similarity)`.
    pub inter: Vec<(String, String, Vec<f64>)>,
    pub metric: String,
}

/// Adjacent-layer curves for every model and pairwise curves for every pair.
pub fn observation_curves(reps: &[RepresentationSet], opts: &SimilarityOptions) -> Result<ObservationReport> {
    let intra = reps.iter().map(|r| (r.model_id.clone(), intra_model_curve(r))).collect();
    let mut inter = Vec::new();
    for (i, a) in reps.iter().enumerate() {
        for b in &reps[i + 1..] {
            inter.push((a.model_id.clone(), b.model_id.clone(), inter_model_curve(a, b, opts)?));
        }
    }
    Ok(ObservationReport {
        intra,
        inter,
        metric: opts.metric.to_string(),
    })
}

impl ObservationReport {
    /// `model,boundary,value,valid`
    pub fn write_intra_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "model,boundary,value,valid")?;
        for (m, curve) in &self.intra {
            for p in curve {
                writeln!(w, "{m},{},{},{}", p.boundary, p.value, p.valid)?;
            }
        }
        Ok(())
    }

    /// `model_a,model_b,layer,value`
    pub fn write_inter_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "model_a,model_b,layer,value")?;
        for (a, b, curve) in &self.inter {
            for (i, v) in curve.iter().enumerate() {
                writeln!(w, "{a},{b},{i},{v}")?;
            }
        }
        Ok(())
    }

    /// Writes `intra.csv`, `inter.csv` and `observe.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let write = |name: &str, bytes: Vec<u8>| {
            let p = dir.join(name);
            std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
        };
        let mut buf = Vec::new();
        self.write_intra_csv(&mut buf).map_err(|e| Error::io(dir, e))?;
        write("intra.csv", buf)?;
        let mut buf = Vec::new();
        self.write_inter_csv(&mut buf).map_err(|e| Error::io(dir, e))?;
        write("inter.csv", buf)?;
        write("observe.json", serde_json::to_vec_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extract::extract;
    use crate::model::{init_checkpoint, zero_checkpoint, ModelConfig};
    use crate::similarity::Metric;

    fn cfg() -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            num_layers: 3,
            num_heads: 2,
            mlp_hidden: 16,
            max_seq_len: 16,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn spearman_cases() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 4.0, 9.0, 16.0]).unwrap() - 1.0).abs() < 1e-12);
        // ties take average ranks: x ranks 1..4, y ranks 1.5, 1.5, 3, 4
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[5.0, 5.0, 6.0, 7.0]).unwrap();
        assert!((r - 0.9486832980505138).abs() < 1e-12, "{r}");
        assert!(spearman(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]).unwrap().is_nan());
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn self_curve_is_one() {
        let c = cfg();
        let ck = init_checkpoint(&c, 1, 0.5, "m").unwrap();
        let reps = extract(&ck, &c, &["up a", "sym 3", "br <"], 2).unwrap();
        for metric in [Metric::Rbf, Metric::Cosine] {
            let opts = SimilarityOptions { metric, ..Default::default() };
            let curve = inter_model_curve(&reps, &reps, &opts).unwrap();
            assert_eq!(curve.len(), 4);
            assert!(curve.iter().all(|v| (v - 1.0).abs() < 1e-9), "{curve:?}");
        }
    }

    #[test]
    fn zero_model_adjacent_curve_is_invalid() {
        let c = cfg();
        let ck = zero_checkpoint(&c, "z").unwrap();
        let reps = extract(&ck, &c, &["up a", "up b"], 2).unwrap();
        let curve = intra_model_curve(&reps);
        assert_eq!(curve.len(), 3);
        assert!(curve.iter().all(|p| !p.valid && p.value.is_nan()));
        let report = observation_curves(&[reps], &SimilarityOptions::default()).unwrap();
        let mut buf = Vec::new();
        report.write_intra_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("z,0,NaN,false"));
    }
}
