//! Sequential continual-learning scenario.
//!
//! Tasks arrive one at a time. At step `t` the expert for task `t` is merged
//! with the accumulated model (the previous merge output) and the result is
//! evaluated on every task seen so far.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::eval::evaluate;
use crate::bench::expert::{build_expert, ExpertOptions};
use crate::bench::tasks::Task;
use crate::checkpoint::{build_layer_index, Checkpoint, META_MODEL_ID};
use crate::error::{Error, Result};
use crate::extract::extract;
use crate::merge::{merge, recall_weights, uniform_merge, RecallOptions};
use crate::model::{init_checkpoint, ModelConfig};
use crate::similarity::{build_table, Metric, SimilarityOptions};
use crate::typical::{select_typical, LayerPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMethod {
    Recall,
    Uniform,
    /// No merging: the newest expert replaces the accumulated model.
    Overwrite,
}

impl BenchMethod {
    pub const ALL: [BenchMethod; 3] = [BenchMethod::Recall, BenchMethod::Uniform, BenchMethod::Overwrite];
}

impl std::fmt::Display for BenchMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BenchMethod::Recall => "recall",
            BenchMethod::Uniform => "uniform",
            BenchMethod::Overwrite => "overwrite",
        })
    }
}

impl std::str::FromStr for BenchMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recall" => Ok(Self::Recall),
            "uniform" => Ok(Self::Uniform),
            "overwrite" => Ok(Self::Overwrite),
            other => Err(Error::Input(format!("unknown bench method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub model: ModelConfig,
    pub init_scale: f32,
    pub expert: ExpertOptions,
    pub metric: Metric,
    pub sigma: f64,
    pub m_per_layer: usize,
    /// Add the untouched base model to every RECALL merge.
    pub include_base: bool,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            init_scale: 0.5,
            expert: ExpertOptions::default(),
            metric: Metric::Rbf,
            sigma: 1.0,
            m_per_layer: crate::typical::DEFAULT_M_PER_LAYER,
            include_base: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub task: String,
    pub participants: Vec<String>,
    /// Per-group weights of the merge at this step (empty when nothing was merged).
    pub weights: Vec<Vec<f64>>,
    /// Accuracy on the test split of tasks `0..=step`.
    pub accuracies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub method: BenchMethod,
    pub seed: u64,
    pub tasks: Vec<String>,
    /// Raw test accuracy of each expert on its own task.
    pub expert_accuracy: Vec<f64>,
    pub steps: Vec<StepReport>,
    /// Accuracy on the first task after each step.
    pub retention: Vec<f64>,
    /// Mean accuracy over all tasks after the last step.
    pub final_mean: f64,
}

impl BenchReport {
    /// `method,step,task,accuracy`, one row per evaluated task per step.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "method,step,task,accuracy")?;
        for s in &self.steps {
            for (t, a) in s.accuracies.iter().enumerate() {
                writeln!(w, "{},{},{},{a}", self.method, s.step, self.tasks[t])?;
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let mut csv = Vec::new();
        self.write_csv(&mut csv).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(format!("bench.{}.csv", self.method));
        std::fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
        let p = dir.join(format!("bench.{}.json", self.method));
        std::fs::write(&p, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&p, e))
    }
}

/// Base model and one expert per task.
pub struct ExpertSuite {
    pub base: Checkpoint,
    pub experts: Vec<Checkpoint>,
}

pub fn build_suite(tasks: &[Task], cfg: &BenchConfig) -> Result<ExpertSuite> {
    let base = init_checkpoint(&cfg.model, cfg.seed, cfg.init_scale, "base")?;
    let experts = tasks
        .iter()
        .enumerate()
        .map(|(t, task)| {
            build_expert(
                &base,
                &cfg.model,
                &task.name,
                &task.train.samples,
                &cfg.expert,
                cfg.seed.wrapping_add(t as u64 + 1),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExpertSuite { base, experts })
}

fn recall_step(suite: &ExpertSuite, acc: &Checkpoint, t: usize, task: &Task, cfg: &BenchConfig) -> Result<(Checkpoint, Vec<String>, Vec<Vec<f64>>)> {
    let mc = &cfg.model;
    let expert = &suite.experts[t];
    let texts = task.train.instructions();
    let new_reps = extract(expert, mc, &texts, 64)?;
    let typical = select_typical(&new_reps, cfg.m_per_layer.min(texts.len()), &LayerPolicy::All, cfg.seed)?;
    let typical_texts: Vec<&str> = typical.sample_ids.iter().map(|&i| texts[i]).collect();

    let mut models: Vec<&Checkpoint> = Vec::new();
    if cfg.include_base {
        models.push(&suite.base);
    }
    models.push(acc);
    models.push(expert);
    let reps = models
        .iter()
        .map(|m| extract(m, mc, &typical_texts, 64))
        .collect::<Result<Vec<_>>>()?;
    let opts = SimilarityOptions {
        metric: cfg.metric,
        sigma: cfg.sigma,
        ..Default::default()
    };
    let table = build_table(&reps, None, &opts)?;
    let anchor = expert.model_id().unwrap_or("expert").to_owned();
    let plan = recall_weights(&table, &anchor, None, &RecallOptions::default())?;
    let index = build_layer_index(acc, mc)?;
    let merged = merge(&models, &plan, &index)?;
    Ok((merged, plan.models, plan.weights))
}

/// Runs the scenario for one method over pre-built experts.
pub fn run_sequential_with(suite: &ExpertSuite, tasks: &[Task], method: BenchMethod, cfg: &BenchConfig) -> Result<BenchReport> {
    if tasks.is_empty() || tasks.len() != suite.experts.len() {
        return Err(Error::Input(format!(
            "{} tasks for {} experts",
            tasks.len(),
            suite.experts.len()
        )));
    }
    let mc = &cfg.model;
    let expert_accuracy = tasks
        .iter()
        .zip(&suite.experts)
        .map(|(task, e)| evaluate(e, mc, &task.test.samples))
        .collect::<Result<Vec<_>>>()?;
    let mut acc = suite.experts[0].clone();
    let mut steps = Vec::new();
    for (t, task) in tasks.iter().enumerate() {
        let (participants, weights) = if t == 0 {
            (vec![acc.model_id().unwrap_or("expert").to_owned()], Vec::new())
        } else {
            let expert = &suite.experts[t];
            let (next, participants, weights) = match method {
                BenchMethod::Overwrite => (expert.clone(), vec![expert.model_id().unwrap_or("expert").to_owned()], Vec::new()),
                BenchMethod::Uniform => {
                    let index = build_layer_index(&acc, mc)?;
                    let mut models = Vec::new();
                    if cfg.include_base {
                        models.push(&suite.base);
                    }
                    models.push(&acc);
                    models.push(expert);
                    let merged = uniform_merge(&models, &index)?;
                    let ids = models.iter().map(|m| m.model_id().unwrap_or("?").to_owned()).collect();
                    let w = vec![vec![1.0 / models.len() as f64; models.len()]; index.num_groups()];
                    (merged, ids, w)
                }
                BenchMethod::Recall => recall_step(suite, &acc, t, task, cfg)?,
            };
            acc = next;
            acc.set_metadata(META_MODEL_ID, format!("accumulated-{t}"));
            (participants, weights)
        };
        let accuracies = tasks[..=t]
            .iter()
            .map(|seen| evaluate(&acc, mc, &seen.test.samples))
            .collect::<Result<Vec<_>>>()?;
        steps.push(StepReport {
            step: t,
            task: task.name.clone(),
            participants,
            weights,
            accuracies,
        });
    }
    let retention = steps.iter().map(|s| s.accuracies[0]).collect();
    let last = &steps.last().expect("at least one task").accuracies;
    Ok(BenchReport {
        method,
        seed: cfg.seed,
        tasks: tasks.iter().map(|t| t.name.clone()).collect(),
        expert_accuracy,
        final_mean: last.iter().sum::<f64>() / last.len() as f64,
        retention,
        steps,
    })
}

pub fn run_sequential(tasks: &[Task], method: BenchMethod, cfg: &BenchConfig) -> Result<BenchReport> {
    let suite = build_suite(tasks, cfg)?;
    run_sequential_with(&suite, tasks, method, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::tasks::gen_tasks;

    fn small() -> BenchConfig {
        BenchConfig {
            model: ModelConfig {
                embed_dim: 16,
                num_layers: 2,
                num_heads: 2,
                mlp_hidden: 32,
                max_seq_len: 16,
                ..ModelConfig::default()
            },
            m_per_layer: 4,
            ..BenchConfig::default()
        }
    }

    #[test]
    fn overwrite_retention_tracks_raw_experts() {
        let cfg = small();
        let tasks = gen_tasks(1);
        let suite = build_suite(&tasks, &cfg).unwrap();
        let r = run_sequential_with(&suite, &tasks, BenchMethod::Overwrite, &cfg).unwrap();
        assert_eq!(r.retention.len(), 3);
        for (t, &v) in r.retention.iter().enumerate() {
            let raw = evaluate(&suite.experts[t], &cfg.model, &tasks[0].test.samples).unwrap();
            assert_eq!(v, raw);
        }
    }

    #[test]
    fn single_task_curve() {
        let cfg = small();
        let tasks = &gen_tasks(1)[..1];
        let r = run_sequential(tasks, BenchMethod::Recall, &cfg).unwrap();
        assert_eq!(r.retention.len(), 1);
        assert_eq!(r.steps[0].accuracies.len(), 1);
    }

    #[test]
    fn recall_report_is_deterministic_and_bounded() {
        let cfg = small();
        let tasks = gen_tasks(2);
        let suite = build_suite(&tasks, &cfg).unwrap();
        let a = run_sequential_with(&suite, &tasks, BenchMethod::Recall, &cfg).unwrap();
        let b = run_sequential_with(&suite, &tasks, BenchMethod::Recall, &cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(a.retention.iter().all(|v| (0.0..=1.0).contains(v)));
        for s in &a.steps[1..] {
            for w in &s.weights {
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
