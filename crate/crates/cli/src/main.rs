//! `recall`: staged pipeline for representation-aligned model merging.
//!
//! Exit codes: 0 on success, 2 on validation errors (bad flags, missing
//! files, inconsistent configuration), 3 on numeric-domain errors.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use recall_core::merge::MergeMethod;
use recall_core::similarity::{Metric, SimilarityOptions, DEFAULT_SIGMA};
use recall_core::typical::{LayerPolicy, DEFAULT_M_PER_LAYER};

use crate::commands::*;
use crate::config::{RunConfig, DEFAULT_BATCH, DEFAULT_SEED, DEFAULT_STRENGTH};

#[derive(Parser)]
#[command(name = "recall", version, about = "Representation-aligned layer-wise model merging")]
struct Cli {
    /// Run configuration (.toml or .json); flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: logical cores).
    #[arg(long, global = true, env = "RECALL_THREADS")]
    threads: Option<usize>,
    /// Skip a stage when its manifest matches the current inputs and config.
    #[arg(long, global = true)]
    cache: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct MetricArgs {
    /// rbf, cosine, euclidean, cka or mmd.
    #[arg(long)]
    metric: Option<Metric>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Use uncentered CKA.
    #[arg(long)]
    cka_uncentered: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate tasks, a base model and one synthetic expert per task.
    GenExperts {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        strength: Option<f64>,
    },
    /// Pool per-layer hidden states of a model over a JSONL dataset.
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        batch: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Cluster representations layer by layer and keep the samples nearest to the centers.
    SelectTypical {
        #[arg(long)]
        reps: PathBuf,
        /// Source dataset; when given, the chosen samples are also written as JSONL.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        m: Option<usize>,
        /// `all`, `last`, or comma-separated layer indices.
        #[arg(long)]
        layers: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Layer-wise similarity table across models.
    Similarity {
        #[arg(long, num_args = 1.., required = true)]
        reps: Vec<PathBuf>,
        #[arg(long)]
        typical: Option<PathBuf>,
        #[command(flatten)]
        metric: MetricArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Merge checkpoints with RECALL or a baseline method.
    Merge {
        /// recall, uniform, task_vector, dare or loss_weighted.
        #[arg(long)]
        method: Option<MergeMethod>,
        #[arg(long = "model", num_args = 1..)]
        models: Vec<PathBuf>,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        similarity: Option<PathBuf>,
        #[arg(long)]
        anchor: Option<String>,
        /// Leave the base model out of the participants.
        #[arg(long)]
        exclude_base: bool,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        #[arg(long, default_value_t = 0.5)]
        drop_rate: f64,
        /// Validation JSONL for loss-weighted merging.
        #[arg(long)]
        val: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Exact-match accuracy of greedy decoding.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        data: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Adjacent-layer and cross-model similarity curves.
    Observe {
        #[arg(long, num_args = 1.., required = true)]
        reps: Vec<PathBuf>,
        #[command(flatten)]
        metric: MetricArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Every stage end to end.
    RunAll {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        metric: MetricArgs,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        exclude_base: bool,
    },
    /// Sequential continual-learning scenario for RECALL, uniform averaging and overwrite.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        m: Option<usize>,
        /// Add the base model to every merge.
        #[arg(long)]
        include_base: bool,
    },
}

fn similarity_opts(m: &MetricArgs, cfg: &RunConfig, default_metric: Metric) -> SimilarityOptions {
    SimilarityOptions {
        metric: m.metric.or(cfg.metric).unwrap_or(default_metric),
        sigma: m.sigma.or(cfg.sigma).unwrap_or(DEFAULT_SIGMA),
        cka_centered: !m.cka_uncentered,
    }
}

fn layer_policy(flag: Option<&String>, cfg: &RunConfig) -> Result<LayerPolicy> {
    match flag.or(cfg.layers.as_ref()) {
        Some(s) => Ok(s.parse()?),
        None => Ok(LayerPolicy::All),
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let cache = cli.cache;
    let seed = |c: &Common| c.seed.or(cfg.seed).unwrap_or(DEFAULT_SEED);
    match cli.command {
        Command::GenExperts { common, strength } => {
            gen_experts(
                &GenExperts {
                    out: cfg.out_dir(common.out.as_ref()),
                    model: cfg.model_config()?,
                    seed: seed(&common),
                    strength: strength.or(cfg.strength).unwrap_or(DEFAULT_STRENGTH),
                },
                cache,
            )?;
        }
        Command::Extract { model, data, batch, common } => {
            let path = extract_stage(
                &Extract { model, data, out: cfg.out_dir(common.out.as_ref()), batch: batch.or(cfg.batch).unwrap_or(DEFAULT_BATCH) },
                cache,
            )?;
            println!("{}", path.display());
        }
        Command::SelectTypical { reps, data, m, layers, common } => {
            let (path, _) = select_typical_stage(
                &SelectTypical {
                    reps,
                    data,
                    m: m.or(cfg.m_per_layer).unwrap_or(DEFAULT_M_PER_LAYER),
                    layers: layer_policy(layers.as_ref(), &cfg)?,
                    seed: seed(&common),
                    out: cfg.out_dir(common.out.as_ref()),
                },
                cache,
            )?;
            println!("{}", path.display());
        }
        Command::Similarity { reps, typical, metric, common } => {
            let path = similarity_stage(
                &Similarity { reps, typical, opts: similarity_opts(&metric, &cfg, Metric::Rbf), out: cfg.out_dir(common.out.as_ref()) },
                cache,
            )?;
            println!("{}", path.display());
        }
        Command::Merge { method, models, base, similarity, anchor, exclude_base, temperature, lambdas, drop_rate, val, common } => {
            let method = match (method, &cfg.method) {
                (Some(m), _) => m,
                (None, Some(s)) => s.parse()?,
                (None, None) => MergeMethod::Recall,
            };
            let models = if models.is_empty() { cfg.experts.clone() } else { models };
            let (merged, plan) = merge_stage(
                &Merge {
                    method,
                    models,
                    base: base.or(cfg.base.clone()),
                    similarity,
                    anchor: anchor.or(cfg.anchor.clone()),
                    include_base: !exclude_base && cfg.include_base.unwrap_or(true),
                    temperature: temperature.or(cfg.temperature).unwrap_or(1.0),
                    lambdas,
                    drop_rate,
                    seed: seed(&common),
                    val,
                    out: cfg.out_dir(common.out.as_ref()),
                },
                cache,
            )?;
            println!("{}\n{}", merged.display(), plan.display());
        }
        Command::Eval { model, data, common } => {
            eval_stage(&Eval { model, data, out: cfg.out_dir(common.out.as_ref()) }, cache)?;
        }
        Command::Observe { reps, metric, common } => {
            observe_stage(&Observe { reps, opts: similarity_opts(&metric, &cfg, Metric::Cosine), out: cfg.out_dir(common.out.as_ref()) }, cache)?;
        }
        Command::RunAll { common, metric, m, exclude_base } => {
            let opts = similarity_opts(&metric, &cfg, Metric::Rbf);
            run_all(
                &RunAll {
                    out: cfg.out_dir(common.out.as_ref()),
                    model: cfg.model_config()?,
                    seed: seed(&common),
                    strength: cfg.strength.unwrap_or(DEFAULT_STRENGTH),
                    metric: opts.metric,
                    sigma: opts.sigma,
                    m: m.or(cfg.m_per_layer).unwrap_or(DEFAULT_M_PER_LAYER),
                    layers: layer_policy(None, &cfg)?,
                    include_base: !exclude_base && cfg.include_base.unwrap_or(true),
                    temperature: cfg.temperature.unwrap_or(1.0),
                    batch: cfg.batch.unwrap_or(DEFAULT_BATCH),
                },
                cache,
            )?;
        }
        Command::Bench { seeds, out, sigma, m, include_base } => {
            bench(
                &Bench {
                    out: cfg.out_dir(out.as_ref()),
                    model: cfg.model_config()?,
                    seeds,
                    strength: cfg.strength.unwrap_or(DEFAULT_STRENGTH),
                    sigma: sigma.or(cfg.sigma).unwrap_or(DEFAULT_SIGMA),
                    m: m.or(cfg.m_per_layer).unwrap_or(DEFAULT_M_PER_LAYER),
                    include_base: include_base || cfg.include_base.unwrap_or(false),
                },
                cache,
            )?;
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err
        .chain()
        .filter_map(|e| e.downcast_ref::<recall_core::Error>())
        .any(recall_core::Error::is_numeric_domain);
    if numeric {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
