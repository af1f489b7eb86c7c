//! Stage implementations. Each stage reads files, writes its artifacts and a
//! manifest into its output directory, and returns the paths it produced.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use serde_json::json;

use recall_core::bench::eval::evaluate;
use recall_core::bench::expert::ExpertOptions;
use recall_core::bench::observe::observation_curves;
use recall_core::bench::sequential::{build_suite, run_sequential_with, BenchConfig, BenchMethod};
use recall_core::bench::tasks::{gen_tasks, Sample, Split, TaskDataset};
use recall_core::checkpoint::{build_layer_index, Checkpoint};
use recall_core::extract::{extract, RepresentationSet};
use recall_core::merge::{
    dare_merge, loss_weighted_merge, merge, recall_weights, task_vector_merge, MergeMethod, MergePlan,
    RecallOptions, META_PLAN_HASH,
};
use recall_core::model::ModelConfig;
use recall_core::similarity::{build_table, Metric, SimilarityOptions, SimilarityTable};
use recall_core::typical::{select_typical, LayerPolicy, TypicalDataset};

use crate::manifest::Stage;

pub fn require_files(paths: &[&Path]) -> Result<()> {
    for p in paths {
        if !p.is_file() {
            return Err(recall_core::Error::Input(format!("input file {} does not exist", p.display())).into());
        }
    }
    Ok(())
}

fn create_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    Ok(Checkpoint::load(path)?)
}

fn ckpt_id(c: &Checkpoint, path: &Path) -> String {
    c.model_id()
        .map(str::to_owned)
        .unwrap_or_else(|| path.file_stem().unwrap_or_default().to_string_lossy().into_owned())
}

fn load_samples(path: &Path) -> Result<Vec<Sample>> {
    Ok(TaskDataset::load_jsonl(path, "data", Split::Test)?.samples)
}

pub struct GenExperts {
    pub out: PathBuf,
    pub model: ModelConfig,
    pub seed: u64,
    pub strength: f64,
}

pub fn gen_experts(a: &GenExperts, cache: bool) -> Result<Vec<PathBuf>> {
    create_dir(&a.out)?;
    let config = json!({"model": a.model, "seed": a.seed, "strength": a.strength});
    let tasks_dir = a.out.join("tasks");
    let base_path = a.out.join("base.st");
    let mut outputs = vec![base_path.clone()];
    let tasks = gen_tasks(a.seed);
    for t in &tasks {
        outputs.push(a.out.join(format!("expert-{}.st", t.name)));
        for split in Split::ALL {
            outputs.push(tasks_dir.join(format!("{}.{}.jsonl", t.name, split.as_str())));
        }
    }
    let produced = outputs.clone();
    Stage { name: "gen-experts", out: &a.out, config, inputs: vec![] }.run(cache, || {
        create_dir(&tasks_dir)?;
        let bench = BenchConfig {
            model: a.model.clone(),
            expert: ExpertOptions { strength: a.strength, ..ExpertOptions::default() },
            seed: a.seed,
            ..BenchConfig::default()
        };
        let suite = build_suite(&tasks, &bench)?;
        suite.base.save(&base_path)?;
        for (t, e) in tasks.iter().zip(&suite.experts) {
            t.save(&tasks_dir)?;
            e.save(a.out.join(format!("expert-{}.st", t.name)))?;
        }
        Ok(produced)
    })?;
    Ok(outputs)
}

pub struct Extract {
    pub model: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub batch: usize,
}

pub fn extract_stage(a: &Extract, cache: bool) -> Result<PathBuf> {
    require_files(&[&a.model, &a.data])?;
    create_dir(&a.out)?;
    let ckpt = load_ckpt(&a.model)?;
    let id = ckpt_id(&ckpt, &a.model);
    let path = a.out.join(RepresentationSet::sidecar_name(&id));
    let stage = Stage {
        name: &format!("extract.{id}"),
        out: &a.out,
        config: json!({"batch": a.batch}),
        inputs: vec![a.model.clone(), a.data.clone()],
    };
    stage.run(cache, || {
        let cfg = ckpt.config()?;
        let samples = load_samples(&a.data)?;
        let texts: Vec<&str> = samples.iter().map(|s| s.instruction.as_str()).collect();
        let mut reps = extract(&ckpt, &cfg, &texts, a.batch)?;
        reps.model_id = id.clone();
        reps.save(&path)?;
        Ok(vec![path.clone()])
    })?;
    Ok(path)
}

pub struct SelectTypical {
    pub reps: PathBuf,
    pub data: Option<PathBuf>,
    pub m: usize,
    pub layers: LayerPolicy,
    pub seed: u64,
    pub out: PathBuf,
}

/// Writes `typical.json`, plus `typical.jsonl` with the chosen samples when
/// the source dataset is given.
pub fn select_typical_stage(a: &SelectTypical, cache: bool) -> Result<(PathBuf, Option<PathBuf>)> {
    let mut inputs = vec![a.reps.clone()];
    inputs.extend(a.data.clone());
    require_files(&inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    create_dir(&a.out)?;
    let json_path = a.out.join("typical.json");
    let jsonl_path = a.data.as_ref().map(|_| a.out.join("typical.jsonl"));
    let config = json!({"m_per_layer": a.m, "layers": a.layers, "seed": a.seed});
    Stage { name: "select-typical", out: &a.out, config, inputs }.run(cache, || {
        let reps = RepresentationSet::load(&a.reps)?;
        let typical = select_typical(&reps, a.m, &a.layers, a.seed)?;
        write_json(&json_path, &typical)?;
        let mut outs = vec![json_path.clone()];
        if let (Some(data), Some(p)) = (&a.data, &jsonl_path) {
            let samples = load_samples(data)?;
            let chosen = typical
                .sample_ids
                .iter()
                .map(|&i| samples.get(i).cloned().ok_or_else(|| anyhow!("typical id {i} is outside {}", data.display())))
                .collect::<Result<Vec<_>>>()?;
            TaskDataset { name: "typical".into(), split: Split::Train, samples: chosen }.save_jsonl(p)?;
            outs.push(p.clone());
        }
        Ok(outs)
    })?;
    Ok((json_path, jsonl_path))
}

pub struct Similarity {
    pub reps: Vec<PathBuf>,
    pub typical: Option<PathBuf>,
    pub opts: SimilarityOptions,
    pub out: PathBuf,
}

pub fn similarity_stage(a: &Similarity, cache: bool) -> Result<PathBuf> {
    a.opts.validate()?;
    if a.reps.is_empty() {
        bail!(recall_core::Error::Input("similarity needs at least one --reps file".into()));
    }
    let mut inputs = a.reps.clone();
    inputs.extend(a.typical.clone());
    require_files(&inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    create_dir(&a.out)?;
    let json_path = a.out.join("similarity.json");
    let csv_path = a.out.join("similarity.csv");
    let config = json!({"metric": a.opts.metric, "sigma": a.opts.sigma, "cka_centered": a.opts.cka_centered});
    Stage { name: "similarity", out: &a.out, config, inputs }.run(cache, || {
        let reps = a.reps.iter().map(RepresentationSet::load).collect::<Result<Vec<_>, _>>()?;
        let typical: Option<TypicalDataset> = match &a.typical {
            Some(p) => Some(serde_json::from_slice(&std::fs::read(p)?)?),
            None => None,
        };
        let table = build_table(&reps, typical.as_ref().map(|t| t.sample_ids.as_slice()), &a.opts)?;
        table.save_json(&json_path)?;
        table.save_csv(&csv_path)?;
        Ok(vec![json_path.clone(), csv_path.clone()])
    })?;
    Ok(json_path)
}

pub struct Merge {
    pub method: MergeMethod,
    pub models: Vec<PathBuf>,
    pub base: Option<PathBuf>,
    pub similarity: Option<PathBuf>,
    pub anchor: Option<String>,
    pub include_base: bool,
    pub temperature: f64,
    pub lambdas: Option<Vec<f64>>,
    pub drop_rate: f64,
    pub seed: u64,
    pub val: Option<PathBuf>,
    pub out: PathBuf,
}

fn linear_plan(method: MergeMethod, ids: Vec<String>, lambdas: &[f64], groups: usize) -> MergePlan {
    let mut w = vec![1.0 - lambdas.iter().sum::<f64>()];
    w.extend_from_slice(lambdas);
    let mut plan = MergePlan::global(method, ids, w, groups);
    plan.hyper.lambdas = Some(lambdas.to_vec());
    plan
}

pub fn merge_stage(a: &Merge, cache: bool) -> Result<(PathBuf, PathBuf)> {
    if a.models.is_empty() {
        bail!(recall_core::Error::Input("merge needs at least one --model".into()));
    }
    let needs_base = matches!(a.method, MergeMethod::TaskVector | MergeMethod::Dare);
    if needs_base && a.base.is_none() {
        bail!(recall_core::Error::Input(format!("--method {:?} needs --base", a.method)));
    }
    if a.method == MergeMethod::Recall && a.similarity.is_none() {
        bail!(recall_core::Error::Input("--method recall needs --similarity".into()));
    }
    if a.method == MergeMethod::LossWeighted && a.val.is_none() {
        bail!(recall_core::Error::Input("--method loss_weighted needs --val".into()));
    }
    if a.method == MergeMethod::Dare && !(0.0..1.0).contains(&a.drop_rate) {
        bail!(recall_core::Error::Input(format!("--drop-rate must be in [0, 1), got {}", a.drop_rate)));
    }
    let mut inputs = a.models.clone();
    inputs.extend(a.base.clone());
    inputs.extend(a.similarity.clone());
    inputs.extend(a.val.clone());
    require_files(&inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    create_dir(&a.out)?;
    let merged_path = a.out.join("merged.st");
    let plan_path = a.out.join("plan.json");
    let config = json!({
        "method": a.method, "anchor": a.anchor, "include_base": a.include_base,
        "temperature": a.temperature, "lambdas": a.lambdas, "drop_rate": a.drop_rate, "seed": a.seed,
    });
    Stage { name: "merge", out: &a.out, config, inputs }.run(cache, || {
        let experts: Vec<Checkpoint> = a.models.iter().map(|p| load_ckpt(p)).collect::<Result<_>>()?;
        let expert_ids: Vec<String> = experts.iter().zip(&a.models).map(|(c, p)| ckpt_id(c, p)).collect();
        let base = a.base.as_deref().map(load_ckpt).transpose()?;
        let base_id = base.as_ref().zip(a.base.as_deref()).map(|(c, p)| ckpt_id(c, p));
        let cfg = experts[0].config()?;
        let index = build_layer_index(&experts[0], &cfg)?;
        let expert_refs: Vec<&Checkpoint> = experts.iter().collect();

        // participants for the convex methods: optional base first, then experts
        let mut pool: Vec<(&str, &Checkpoint)> = Vec::new();
        if let (Some(b), Some(id), true) = (&base, &base_id, a.include_base) {
            pool.push((id.as_str(), b));
        }
        pool.extend(expert_ids.iter().map(String::as_str).zip(expert_refs.iter().copied()));
        let pool_refs: Vec<&Checkpoint> = pool.iter().map(|(_, c)| *c).collect();
        let pool_ids: Vec<String> = pool.iter().map(|(id, _)| id.to_string()).collect();
        let lambdas = a.lambdas.clone().unwrap_or_else(|| vec![1.0 / experts.len() as f64; experts.len()]);

        let (mut merged, plan) = match a.method {
            MergeMethod::Recall => {
                let table = SimilarityTable::load_json(a.similarity.as_ref().expect("checked"))?;
                let anchor = a.anchor.clone().unwrap_or_else(|| expert_ids.last().expect("non-empty").clone());
                let opts = RecallOptions { include_base: a.include_base, temperature: a.temperature, ..RecallOptions::default() };
                let plan = recall_weights(&table, &anchor, base_id.as_deref(), &opts)?;
                let mut all: Vec<(&str, &Checkpoint)> = expert_ids.iter().map(String::as_str).zip(expert_refs.iter().copied()).collect();
                if let (Some(b), Some(id)) = (&base, &base_id) {
                    all.push((id.as_str(), b));
                }
                let ordered = plan
                    .models
                    .iter()
                    .map(|id| {
                        all.iter().find(|(k, _)| k == id).map(|(_, c)| *c).ok_or_else(|| {
                            anyhow!(recall_core::Error::Input(format!("similarity table model `{id}` has no checkpoint among the inputs")))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                (merge(&ordered, &plan, &index)?, plan)
            }
            MergeMethod::Uniform => {
                let plan = MergePlan::uniform(pool_ids, index.num_groups());
                (merge(&pool_refs, &plan, &index)?, plan)
            }
            MergeMethod::LossWeighted => {
                let val = load_samples(a.val.as_ref().expect("checked"))?;
                let (m, mut plan) = loss_weighted_merge(&pool_refs, &cfg, &val, &index)?;
                plan.models = pool_ids;
                (m, plan)
            }
            MergeMethod::TaskVector | MergeMethod::Dare => {
                let b = base.as_ref().expect("checked");
                let mut ids = vec![base_id.clone().expect("checked")];
                ids.extend(expert_ids.iter().cloned());
                let mut plan = linear_plan(a.method, ids, &lambdas, index.num_groups());
                let m = if a.method == MergeMethod::Dare {
                    plan.hyper.dare_drop_rate = Some(a.drop_rate);
                    plan.hyper.seed = Some(a.seed);
                    dare_merge(b, &expert_refs, &lambdas, a.drop_rate, a.seed)?
                } else {
                    task_vector_merge(b, &expert_refs, &lambdas)?
                };
                (m, plan)
            }
        };
        merged.set_metadata(META_PLAN_HASH, plan.hash());
        merged.save(&merged_path)?;
        plan.save(&plan_path)?;
        Ok(vec![merged_path.clone(), plan_path.clone()])
    })?;
    Ok((merged_path, plan_path))
}

pub struct Eval {
    pub model: PathBuf,
    pub data: Vec<PathBuf>,
    pub out: PathBuf,
}

#[derive(Serialize)]
struct EvalEntry {
    data: String,
    samples: usize,
    accuracy: f64,
}

pub fn eval_stage(a: &Eval, cache: bool) -> Result<PathBuf> {
    if a.data.is_empty() {
        bail!(recall_core::Error::Input("eval needs at least one --data file".into()));
    }
    let mut inputs = vec![a.model.clone()];
    inputs.extend(a.data.iter().cloned());
    require_files(&inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    create_dir(&a.out)?;
    let path = a.out.join("eval.json");
    Stage { name: "eval", out: &a.out, config: json!({}), inputs }.run(cache, || {
        let ckpt = load_ckpt(&a.model)?;
        let cfg = ckpt.config()?;
        let mut entries = Vec::new();
        for d in &a.data {
            let samples = load_samples(d)?;
            let accuracy = evaluate(&ckpt, &cfg, &samples)?;
            let name = d.file_name().unwrap_or_default().to_string_lossy().into_owned();
            println!("{name}\t{accuracy:.4}");
            entries.push(EvalEntry { data: name, samples: samples.len(), accuracy });
        }
        write_json(&path, &json!({"model": ckpt_id(&ckpt, &a.model), "results": entries}))?;
        Ok(vec![path.clone()])
    })?;
    Ok(path)
}

pub struct Observe {
    pub reps: Vec<PathBuf>,
    pub opts: SimilarityOptions,
    pub out: PathBuf,
}

pub fn observe_stage(a: &Observe, cache: bool) -> Result<()> {
    a.opts.validate()?;
    require_files(&a.reps.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    create_dir(&a.out)?;
    let config = json!({"metric": a.opts.metric, "sigma": a.opts.sigma});
    Stage { name: "observe", out: &a.out, config, inputs: a.reps.clone() }.run(cache, || {
        let reps = a.reps.iter().map(RepresentationSet::load).collect::<Result<Vec<_>, _>>()?;
        let report = observation_curves(&reps, &a.opts)?;
        report.save(&a.out)?;
        Ok(["intra.csv", "inter.csv", "observe.json"].iter().map(|f| a.out.join(f)).collect())
    })?;
    Ok(())
}

pub struct RunAll {
    pub out: PathBuf,
    pub model: ModelConfig,
    pub seed: u64,
    pub strength: f64,
    pub metric: Metric,
    pub sigma: f64,
    pub m: usize,
    pub layers: LayerPolicy,
    pub include_base: bool,
    pub temperature: f64,
    pub batch: usize,
}

/// Generate experts, pick typical samples of the newest task, compare every
/// model on them, merge with RECALL and evaluate on all test splits.
pub fn run_all(a: &RunAll, cache: bool) -> Result<()> {
    SimilarityOptions { metric: a.metric, sigma: a.sigma, ..SimilarityOptions::default() }.validate()?;
    let experts_dir = a.out.join("experts");
    gen_experts(&GenExperts { out: experts_dir.clone(), model: a.model.clone(), seed: a.seed, strength: a.strength }, cache)?;
    let tasks = gen_tasks(a.seed);
    let expert_paths: Vec<PathBuf> = tasks.iter().map(|t| experts_dir.join(format!("expert-{}.st", t.name))).collect();
    let base_path = experts_dir.join("base.st");
    let newest = tasks.last().expect("built-in tasks");
    let newest_train = experts_dir.join("tasks").join(format!("{}.train.jsonl", newest.name));

    let train_reps = extract_stage(
        &Extract { model: expert_paths.last().expect("experts").clone(), data: newest_train.clone(), out: a.out.join("reps-train"), batch: a.batch },
        cache,
    )?;
    let (_, typical_jsonl) = select_typical_stage(
        &SelectTypical { reps: train_reps, data: Some(newest_train), m: a.m, layers: a.layers.clone(), seed: a.seed, out: a.out.join("typical") },
        cache,
    )?;
    let typical_jsonl = typical_jsonl.expect("dataset given");

    let mut participants = Vec::new();
    if a.include_base {
        participants.push(base_path.clone());
    }
    participants.extend(expert_paths.iter().cloned());
    let reps_dir = a.out.join("reps-typical");
    let reps = participants
        .iter()
        .map(|m| extract_stage(&Extract { model: m.clone(), data: typical_jsonl.clone(), out: reps_dir.clone(), batch: a.batch }, cache))
        .collect::<Result<Vec<_>>>()?;
    let sim = similarity_stage(
        &Similarity {
            reps,
            typical: None,
            opts: SimilarityOptions { metric: a.metric, sigma: a.sigma, ..SimilarityOptions::default() },
            out: a.out.join("similarity"),
        },
        cache,
    )?;
    let (merged, _) = merge_stage(
        &Merge {
            method: MergeMethod::Recall,
            models: expert_paths,
            base: Some(base_path),
            similarity: Some(sim),
            anchor: Some(format!("expert-{}", newest.name)),
            include_base: a.include_base,
            temperature: a.temperature,
            lambdas: None,
            drop_rate: 0.0,
            seed: a.seed,
            val: None,
            out: a.out.join("merge"),
        },
        cache,
    )?;
    let tests = tasks.iter().map(|t| experts_dir.join("tasks").join(format!("{}.test.jsonl", t.name))).collect();
    eval_stage(&Eval { model: merged, data: tests, out: a.out.join("eval") }, cache)?;
    Ok(())
}

pub struct Bench {
    pub out: PathBuf,
    pub model: ModelConfig,
    pub seeds: Vec<u64>,
    pub strength: f64,
    pub sigma: f64,
    pub m: usize,
    pub include_base: bool,
}

/// Sequential scenario for every method and seed; one CSV/JSON pair per
/// method per seed and a `summary.json`.
pub fn bench(a: &Bench, cache: bool) -> Result<()> {
    SimilarityOptions { sigma: a.sigma, ..SimilarityOptions::default() }.validate()?;
    create_dir(&a.out)?;
    let config = json!({"model": a.model, "seeds": a.seeds, "strength": a.strength, "sigma": a.sigma, "m_per_layer": a.m, "include_base": a.include_base});
    let mut outputs = Vec::new();
    for s in &a.seeds {
        for m in BenchMethod::ALL {
            outputs.push(a.out.join(format!("seed{s}")).join(format!("bench.{m}.json")));
            outputs.push(a.out.join(format!("seed{s}")).join(format!("bench.{m}.csv")));
        }
    }
    outputs.push(a.out.join("summary.json"));
    let produced = outputs.clone();
    Stage { name: "bench", out: &a.out, config, inputs: vec![] }.run(cache, || {
        let mut summary = Vec::new();
        for &seed in &a.seeds {
            let cfg = BenchConfig {
                model: a.model.clone(),
                expert: ExpertOptions { strength: a.strength, ..ExpertOptions::default() },
                sigma: a.sigma,
                m_per_layer: a.m,
                include_base: a.include_base,
                seed,
                ..BenchConfig::default()
            };
            let tasks = gen_tasks(seed);
            let suite = build_suite(&tasks, &cfg)?;
            let dir = a.out.join(format!("seed{seed}"));
            create_dir(&dir)?;
            for m in BenchMethod::ALL {
                let report = run_sequential_with(&suite, &tasks, m, &cfg)?;
                report.save(&dir)?;
                println!("seed {seed} {m:<9} retention {:?} final mean {:.4}", report.retention, report.final_mean);
                summary.push(json!({"seed": seed, "method": m, "retention": report.retention, "final_mean": report.final_mean}));
            }
        }
        write_json(&a.out.join("summary.json"), &summary)?;
        Ok(produced)
    })?;
    Ok(())
}
