//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Runtime budgets are part of each check.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use recall_core::bench::expert::gen_synthetic_expert;
use recall_core::bench::observe::{inter_model_curve, intra_model_curve, spearman};
use recall_core::bench::sequential::{build_suite, run_sequential_with, BenchConfig, BenchMethod};
use recall_core::bench::tasks::gen_tasks;
use recall_core::checkpoint::{build_layer_index, Checkpoint, LoadOptions};
use recall_core::extract::{extract, RepresentationSet};
use recall_core::kmeans::kmeans;
use recall_core::merge::{dare_sparsify, merge, recall_weights, uniform_merge, MergeMethod, MergePlan, RecallOptions};
use recall_core::model::{init_checkpoint, ModelConfig};
use recall_core::similarity::{build_table, cka, euclidean_similarity, mmd2, rbf_rows, Metric, SimilarityOptions, SimilarityTable};
use recall_core::tensor::Tensor;
use recall_core::typical::{select_typical, LayerPolicy};

type Check = Result<String, String>;

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: fn() -> Check,
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn small_cfg(layers: usize) -> ModelConfig {
    ModelConfig {
        embed_dim: 16,
        num_layers: layers,
        num_heads: 2,
        mlp_hidden: 32,
        max_seq_len: 32,
        ..ModelConfig::default()
    }
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn weight_normalization() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let metrics = [Metric::Rbf, Metric::Cosine, Metric::Cka];
    let mut worst = 0f64;
    for trial in 0..1000 {
        let metric = metrics[trial % 3];
        let n = rng.gen_range(2..7);
        let layers = rng.gen_range(1..6);
        let lo = if metric == Metric::Cosine { -1.0 } else { 0.0 };
        let values = (0..layers)
            .map(|_| {
                let mut m = vec![vec![1.0; n]; n];
                for p in 0..n {
                    for q in p + 1..n {
                        let v = rng.gen_range(lo..1.0);
                        m[p][q] = v;
                        m[q][p] = v;
                    }
                }
                m
            })
            .collect();
        let table = SimilarityTable {
            metric,
            sigma: 1.0,
            cka_centered: true,
            models: (0..n).map(|i| format!("m{i}")).collect(),
            values,
        };
        let anchor = rng.gen_range(0..n);
        let plan = recall_weights(&table, &format!("m{anchor}"), None, &RecallOptions::default()).map_err(|e| e.to_string())?;
        for w in &plan.weights {
            let s: f64 = w.iter().sum();
            worst = worst.max((s - 1.0).abs());
            ensure((s - 1.0).abs() <= 1e-6, format!("trial {trial}: weights sum to {s}"))?;
            ensure(
                w.iter().all(|&v| v <= w[anchor]),
                format!("trial {trial}: anchor weight {} is not the maximum of {w:?}", w[anchor]),
            )?;
        }
    }
    Ok(format!("1000 tables, max |Σw − 1| = {worst:.1e}"))
}

fn fixed_point() -> Check {
    let cfg = small_cfg(2);
    let ck = init_checkpoint(&cfg, 7, 0.5, "m").unwrap();
    let index = build_layer_index(&ck, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0f64;
    for k in [2, 3, 5] {
        for _ in 0..5 {
            let copies: Vec<&Checkpoint> = vec![&ck; k];
            let plan = MergePlan {
                method: MergeMethod::Recall,
                include_base: true,
                models: (0..k).map(|i| format!("c{i}")).collect(),
                weights: (0..index.num_groups()).map(|_| random_simplex(&mut rng, k)).collect(),
                hyper: Default::default(),
            };
            let out = merge(&copies, &plan, &index).map_err(|e| e.to_string())?;
            for ((_, a), (_, b)) in out.iter().zip(ck.iter()) {
                for (&x, &y) in a.data().iter().zip(b.data()) {
                    worst = worst.max((f64::from(x) - f64::from(y)).abs());
                }
            }
        }
    }
    ensure(worst <= 1e-7, format!("max deviation {worst:e}"))?;
    Ok(format!("K ∈ {{2,3,5}}, max deviation {worst:e}"))
}

fn oracle_equivalence() -> Check {
    let cfg = small_cfg(2);
    let models: Vec<Checkpoint> = (0..3).map(|i| init_checkpoint(&cfg, 10 + i, 0.5, &format!("m{i}")).unwrap()).collect();
    let refs: Vec<&Checkpoint> = models.iter().collect();
    let index = build_layer_index(&models[0], &cfg).unwrap();
    ensure(index.num_groups() == 3, "fixture must have 3 groups")?;
    let plan = MergePlan {
        method: MergeMethod::Recall,
        include_base: true,
        models: vec!["m0".into(), "m1".into(), "m2".into()],
        weights: vec![vec![0.2, 0.3, 0.5], vec![0.6, 0.1, 0.3], vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]],
        hyper: Default::default(),
    };
    let out = merge(&refs, &plan, &index).map_err(|e| e.to_string())?;
    let mut n = 0usize;
    for (name, t) in out.iter() {
        let g = index.group_of(name).unwrap();
        for (j, &got) in t.data().iter().enumerate() {
            let mut acc = 0f64;
            for (q, m) in models.iter().enumerate() {
                acc += plan.weights[g][q] * f64::from(m.get(name).unwrap().data()[j]);
            }
            ensure((acc as f32).to_bits() == got.to_bits(), format!("{name}[{j}] differs"))?;
            n += 1;
        }
    }
    Ok(format!("{n} parameters bit-equal"))
}

fn sigma_limit() -> Check {
    let cfg = small_cfg(2);
    let base = init_checkpoint(&cfg, 3, 0.5, "base").unwrap();
    let experts: Vec<Checkpoint> = ["upper", "symbol", "bracket"]
        .iter()
        .enumerate()
        .map(|(i, t)| gen_synthetic_expert(&base, t, 0.5, i as u64).unwrap())
        .collect();
    let texts = ["up abc", "sym 123", "br <[", "up z", "sym 9"];
    let reps: Vec<RepresentationSet> = experts.iter().map(|e| extract(e, &cfg, &texts, 2).unwrap()).collect();
    let opts = SimilarityOptions {
        metric: Metric::Rbf,
        sigma: 1e6,
        ..Default::default()
    };
    let table = build_table(&reps, None, &opts).map_err(|e| e.to_string())?;
    let plan = recall_weights(&table, "expert-bracket", None, &RecallOptions::default()).map_err(|e| e.to_string())?;
    let refs: Vec<&Checkpoint> = experts.iter().collect();
    let index = build_layer_index(&base, &cfg).unwrap();
    let a = merge(&refs, &plan, &index).map_err(|e| e.to_string())?;
    let b = uniform_merge(&refs, &index).map_err(|e| e.to_string())?;
    let mut worst = 0f64;
    for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
        for (&p, &q) in x.data().iter().zip(y.data()) {
            worst = worst.max((f64::from(p) - f64::from(q)).abs());
        }
    }
    ensure(worst <= 1e-5, format!("max deviation {worst:e}"))?;
    Ok(format!("σ = 1e6, max deviation from uniform {worst:e}"))
}

fn rbf_scalar() -> Check {
    let x = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
    let y = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
    let v = rbf_rows(&x, &y, 1.0).map_err(|e| e.to_string())?;
    ensure((v - 0.606531).abs() <= 1e-6, format!("exp(-0.5) case gave {v}"))?;
    let z = Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 5.0, 0.0, 1.0]).unwrap();
    let s = rbf_rows(&z, &z, 1.0).map_err(|e| e.to_string())?;
    ensure((s - 1.0).abs() <= 1e-6, format!("identical rows gave {s}"))?;
    Ok(format!("{v:.6}, identical {s}"))
}

fn random_matrix(rng: &mut ChaCha8Rng, m: usize, e: usize) -> Tensor {
    Tensor::new(vec![m, e], (0..m * e).map(|_| rng.gen_range(-2.0f32..2.0)).collect()).unwrap()
}

fn random_orthogonal(rng: &mut ChaCha8Rng, e: usize) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < e {
        let mut v: Vec<f64> = (0..e).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (a, b) in v.iter_mut().zip(u) {
                *a -= d * b;
            }
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            q.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    q
}

fn rotate(x: &Tensor, q: &[Vec<f64>]) -> Tensor {
    let e = x.last_dim();
    let data = x
        .rows()
        .flat_map(|r| (0..e).map(move |j| (0..e).map(|k| f64::from(r[k]) * q[k][j]).sum::<f64>() as f32))
        .collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

fn metric_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_cka = 0f64;
    let mut worst_mmd = 0f64;
    for _ in 0..20 {
        let x = random_matrix(&mut rng, 12, 6);
        let y = random_matrix(&mut rng, 12, 6);
        let base = cka(&x, &y, true).map_err(|e| e.to_string())?;
        let selfv = cka(&x, &x, true).map_err(|e| e.to_string())?;
        let q = random_orthogonal(&mut rng, 6);
        let rot = cka(&x, &rotate(&y, &q), true).map_err(|e| e.to_string())?;
        let scaled = Tensor::new(y.shape().to_vec(), y.data().iter().map(|v| v * 3.7).collect()).unwrap();
        let sc = cka(&x, &scaled, true).map_err(|e| e.to_string())?;
        for d in [(selfv - 1.0).abs(), (rot - base).abs(), (sc - base).abs()] {
            worst_cka = worst_cka.max(d);
        }
        let mxx = mmd2(&x, &x, 1.0).map_err(|e| e.to_string())?;
        let mxy = mmd2(&x, &y, 1.0).map_err(|e| e.to_string())?;
        let myx = mmd2(&y, &x, 1.0).map_err(|e| e.to_string())?;
        worst_mmd = worst_mmd.max(mxx.abs()).max((mxy - myx).abs());
    }
    ensure(worst_cka <= 1e-6, format!("CKA deviation {worst_cka:e}"))?;
    ensure(worst_mmd <= 1e-9, format!("MMD deviation {worst_mmd:e}"))?;

    // one sample per model: the farthest pair's mean distance is the normalizer itself
    let pts = [[0.0f32, 0.0], [3.0, 4.0], [1.0, 1.0]];
    let reps: Vec<RepresentationSet> = pts
        .iter()
        .enumerate()
        .map(|(i, p)| RepresentationSet::new(format!("m{i}"), vec![0], vec![Tensor::new(vec![1, 2], p.to_vec()).unwrap()]).unwrap())
        .collect();
    let e = euclidean_similarity(&reps, 0).map_err(|e| e.to_string())?;
    ensure(e[0][1] == 1.0 && e[1][0] == 1.0, format!("maximal pair maps to {}", e[0][1]))?;
    ensure(e.iter().flatten().all(|&v| (0.0..=1.0).contains(&v)), "euclidean values outside [0, 1]")?;
    Ok(format!("CKA dev {worst_cka:.1e}, MMD dev {worst_mmd:.1e}, euclidean max pair = 1"))
}

/// Best 2-partition of `pts` by brute force; returns the nearest-to-center sample ids.
fn exhaustive_typical(pts: &[[f32; 2]]) -> Vec<usize> {
    let n = pts.len();
    let mut best = (f64::INFINITY, vec![]);
    for mask in 1..(1u32 << n) - 1 {
        let mut centers = [[0f64; 2]; 2];
        let mut counts = [0f64; 2];
        for (i, p) in pts.iter().enumerate() {
            let c = ((mask >> i) & 1) as usize;
            counts[c] += 1.0;
            centers[c][0] += f64::from(p[0]);
            centers[c][1] += f64::from(p[1]);
        }
        for c in 0..2 {
            centers[c][0] /= counts[c];
            centers[c][1] /= counts[c];
        }
        let d = |p: &[f32; 2], c: &[f64; 2]| (f64::from(p[0]) - c[0]).powi(2) + (f64::from(p[1]) - c[1]).powi(2);
        let inertia: f64 = pts.iter().enumerate().map(|(i, p)| d(p, &centers[((mask >> i) & 1) as usize])).sum();
        if inertia < best.0 {
            let mut ids: Vec<usize> = centers
                .iter()
                .map(|c| {
                    (0..n)
                        .min_by(|&a, &b| d(&pts[a], c).total_cmp(&d(&pts[b], c)).then(a.cmp(&b)))
                        .unwrap()
                })
                .collect();
            ids.sort();
            best = (inertia, ids);
        }
    }
    best.1
}

fn kmeans_typical() -> Check {
    let pts = [[0.0f32, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]];
    let oracle = exhaustive_typical(&pts);
    let t = Tensor::from_rows(&pts.iter().map(|p| p.to_vec()).collect::<Vec<_>>()).unwrap();
    let reps = RepresentationSet::new("m", vec![0, 1, 2, 3], vec![t.clone()]).unwrap();
    for seed in 0..8 {
        let sel = select_typical(&reps, 2, &LayerPolicy::All, seed).map_err(|e| e.to_string())?;
        let mut ids = sel.sample_ids.clone();
        ids.sort();
        ensure(ids == oracle, format!("seed {seed}: got {ids:?}, oracle {oracle:?}"))?;
        let again = select_typical(&reps, 2, &LayerPolicy::All, seed).map_err(|e| e.to_string())?;
        ensure(again == sel, format!("seed {seed}: not reproducible"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..50 {
        let n = rng.gen_range(3..30);
        let layers = (0..3).map(|_| random_matrix(&mut rng, n, 4)).collect();
        let ids: Vec<usize> = (0..n).map(|i| 100 + 3 * i).collect();
        let reps = RepresentationSet::new("r", ids.clone(), layers).unwrap();
        let m = rng.gen_range(1..=n);
        let sel = select_typical(&reps, m, &LayerPolicy::All, trial).map_err(|e| e.to_string())?;
        ensure(sel.sample_ids.iter().all(|i| ids.contains(i)), format!("trial {trial}: id outside the dataset"))?;
        let km = kmeans(reps.layer(0).unwrap(), m, trial, 100).map_err(|e| e.to_string())?;
        ensure(km == kmeans(reps.layer(0).unwrap(), m, trial, 100).unwrap(), "kmeans not reproducible")?;
    }
    Ok(format!("oracle ids {oracle:?} on 8 seeds; 50 random sets index real samples"))
}

fn random_checkpoint(rng: &mut ChaCha8Rng) -> Checkpoint {
    let mut c = Checkpoint::new();
    let count = rng.gen_range(0..6);
    for i in 0..count {
        let rank = rng.gen_range(1..4);
        let shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..5)).collect();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| match rng.gen_range(0..6) {
                0 => -0.0,
                1 => f32::MIN_POSITIVE / 4.0,
                2 => f32::MAX,
                _ => f32::from_bits(rng.gen::<u32>() & 0xBF7F_FFFF),
            })
            .collect();
        c.insert(format!("t{i}.{}", rng.gen::<u16>()), Tensor::new(shape, data).unwrap()).unwrap();
    }
    if rng.gen_bool(0.5) {
        c.set_metadata("model_id", format!("m{}", rng.gen::<u8>()));
    }
    c
}

fn malformed_corpus() -> Vec<(&'static str, Vec<u8>)> {
    let header = |json: &str, payload: usize| {
        let mut b = (json.len() as u64).to_le_bytes().to_vec();
        b.extend_from_slice(json.as_bytes());
        b.extend(std::iter::repeat(0u8).take(payload));
        b
    };
    vec![
        ("empty", vec![]),
        ("short length", vec![1, 0, 0]),
        ("length past end", {
            let mut b = 1000u64.to_le_bytes().to_vec();
            b.extend_from_slice(b"{}");
            b
        }),
        ("not json", header("{not json", 0)),
        ("json array", header("[1,2]", 0)),
        ("overlap", header(r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}}"#, 12)),
        ("gap", header(r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#, 8)),
        ("duplicate", header(r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"a":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#, 8)),
        ("dtype", header(r#"{"a":{"dtype":"F16","shape":[2],"data_offsets":[0,4]}}"#, 4)),
        ("shape mismatch", header(r#"{"a":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}}"#, 8)),
        ("zero extent", header(r#"{"a":{"dtype":"F32","shape":[0],"data_offsets":[0,0]}}"#, 0)),
        ("truncated payload", header(r#"{"a":{"dtype":"F32","shape":[4],"data_offsets":[0,16]}}"#, 8)),
        ("trailing bytes", header(r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}"#, 9)),
        ("missing offsets", header(r#"{"a":{"dtype":"F32","shape":[1]}}"#, 4)),
        ("non-finite", {
            let mut b = header(r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}"#, 0);
            b.extend_from_slice(&f32::NAN.to_le_bytes());
            b
        }),
    ]
}

fn checkpoint_roundtrip() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..100 {
        let c = random_checkpoint(&mut rng);
        let path = dir.path().join(format!("c{i}.st"));
        c.save(&path).map_err(|e| e.to_string())?;
        let back = Checkpoint::load(&path).map_err(|e| e.to_string())?;
        ensure(back.metadata() == c.metadata(), format!("checkpoint {i}: metadata differs"))?;
        ensure(back.len() == c.len(), format!("checkpoint {i}: tensor count differs"))?;
        for ((na, a), (nb, b)) in c.iter().zip(back.iter()) {
            ensure(na == nb && a.shape() == b.shape(), format!("checkpoint {i}: `{na}` differs"))?;
            ensure(
                a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()),
                format!("checkpoint {i}: `{na}` not bit-exact"),
            )?;
        }
    }
    let corpus = malformed_corpus();
    for (name, bytes) in &corpus {
        ensure(Checkpoint::from_bytes(bytes, LoadOptions::default()).is_err(), format!("malformed `{name}` accepted"))?;
    }
    Ok(format!("100 round-trips bit-exact, {} malformed inputs rejected", corpus.len()))
}

fn observation() -> Check {
    let cfg = ModelConfig::default();
    let base = init_checkpoint(&cfg, 11, 0.5, "base").unwrap();
    let a = gen_synthetic_expert(&base, "upper", 0.3, 1).unwrap();
    let b = gen_synthetic_expert(&base, "symbol", 0.3, 2).unwrap();
    let tasks = gen_tasks(0);
    let texts: Vec<&str> = tasks.iter().flat_map(|t| t.val.instructions()).collect();
    let ra = extract(&a, &cfg, &texts, 32).map_err(|e| e.to_string())?;
    let rb = extract(&b, &cfg, &texts, 32).map_err(|e| e.to_string())?;
    let opts = SimilarityOptions {
        metric: Metric::Cosine,
        ..Default::default()
    };
    let inter = inter_model_curve(&ra, &rb, &opts).map_err(|e| e.to_string())?;
    let layers: Vec<f64> = (0..inter.len()).map(|i| i as f64).collect();
    let rho = spearman(&layers, &inter).map_err(|e| e.to_string())?;
    ensure(rho < 0.0, format!("Spearman {rho:.3} on {inter:?}"))?;
    let intra = intra_model_curve(&ra);
    ensure(intra.iter().all(|p| p.valid), "adjacent-layer curve has invalid points")?;
    let spread = intra.iter().map(|p| p.value).fold(f64::NEG_INFINITY, f64::max)
        - intra.iter().map(|p| p.value).fold(f64::INFINITY, f64::min);
    ensure(spread > 1e-6, "adjacent-layer curve is constant")?;
    Ok(format!(
        "inter cosine {:?}, Spearman {rho:.3}; intra spread {spread:.4}",
        inter.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>()
    ))
}

fn forgetting_bench() -> Check {
    let mut lines = Vec::new();
    let mut retention_ok = 0;
    let mut mean_ok = 0;
    for seed in 0..4u64 {
        let cfg = BenchConfig {
            seed,
            ..BenchConfig::default()
        };
        let tasks = gen_tasks(seed);
        let suite = build_suite(&tasks, &cfg).map_err(|e| e.to_string())?;
        let run = |m| run_sequential_with(&suite, &tasks, m, &cfg).map_err(|e| e.to_string());
        let (recall, uniform, overwrite) = (run(BenchMethod::Recall)?, run(BenchMethod::Uniform)?, run(BenchMethod::Overwrite)?);
        let (r1, o1) = (*recall.retention.last().unwrap(), *overwrite.retention.last().unwrap());
        retention_ok += usize::from(r1 >= o1);
        mean_ok += usize::from(recall.final_mean >= uniform.final_mean);
        lines.push(format!(
            "seed {seed}: task-1 recall {r1:.3} / overwrite {o1:.3}, mean recall {:.3} / uniform {:.3}",
            recall.final_mean, uniform.final_mean
        ));
    }
    let detail = format!("retention {retention_ok}/4, mean {mean_ok}/4 [{}]", lines.join("; "));
    ensure(retention_ok >= 3 && mean_ok >= 3, detail.clone())?;
    Ok(detail)
}

fn dare_unbiased() -> Check {
    let mut base = Checkpoint::new();
    base.insert("w", Tensor::from_vec(vec![0.25]).unwrap()).unwrap();
    let mut expert = Checkpoint::new();
    expert.insert("w", Tensor::from_vec(vec![0.62]).unwrap()).unwrap();
    let delta = f64::from(0.62f32) - f64::from(0.25f32);
    let p = 0.3;
    let trials = 10_000;
    let samples: Vec<f64> = (0..trials)
        .map(|s| {
            let out = dare_sparsify(&base, &expert, p, s).unwrap();
            f64::from(out.get("w").unwrap().data()[0]) - f64::from(0.25f32)
        })
        .collect();
    let mean = samples.iter().sum::<f64>() / trials as f64;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (trials as f64 - 1.0);
    let se = (var / trials as f64).sqrt();
    ensure((mean - delta).abs() <= 3.0 * se, format!("mean {mean} vs δ {delta}, 3·SE {}", 3.0 * se))?;
    let id = dare_sparsify(&base, &expert, 0.0, 99).map_err(|e| e.to_string())?;
    ensure(id.get("w").unwrap().data() == expert.get("w").unwrap().data(), "p = 0 is not the identity")?;
    Ok(format!("mean δ' {mean:.5} vs δ {delta:.5}, |diff| = {:.2} SE; p=0 exact", (mean - delta).abs() / se))
}

fn main() {
    let criteria = [
        Criterion { name: "weight-normalization", budget: Duration::from_secs(5), run: weight_normalization },
        Criterion { name: "merge-fixed-point", budget: Duration::from_secs(5), run: fixed_point },
        Criterion { name: "oracle-equivalence", budget: Duration::from_secs(5), run: oracle_equivalence },
        Criterion { name: "sigma-limit", budget: Duration::from_secs(10), run: sigma_limit },
        Criterion { name: "rbf-scalar", budget: Duration::from_secs(1), run: rbf_scalar },
        Criterion { name: "metric-suite", budget: Duration::from_secs(10), run: metric_suite },
        Criterion { name: "kmeans-typical", budget: Duration::from_secs(5), run: kmeans_typical },
        Criterion { name: "checkpoint-roundtrip", budget: Duration::from_secs(10), run: checkpoint_roundtrip },
        Criterion { name: "observation", budget: Duration::from_secs(60), run: observation },
        Criterion { name: "forgetting-bench", budget: Duration::from_secs(600), run: forgetting_bench },
        Criterion { name: "dare-unbiased", budget: Duration::from_secs(10), run: dare_unbiased },
    ];
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(d) if elapsed > c.budget => Err(format!("{d} (took {elapsed:.2?}, budget {:?})", c.budget)),
            o => o,
        };
        match outcome {
            Ok(detail) => println!("PASS {:<22} {elapsed:>9.2?}  {detail}", c.name),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:<22} {elapsed:>9.2?}  {detail}", c.name);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
