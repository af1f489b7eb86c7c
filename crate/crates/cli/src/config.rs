//! Run configuration loaded from TOML or JSON. Command-line flags override
//! file values; unset values fall back to the defaults below.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use recall_core::model::ModelConfig;
use recall_core::similarity::Metric;

pub const DEFAULT_OUT: &str = "out";
pub const DEFAULT_SEED: u64 = 0;
pub const DEFAULT_BATCH: usize = 32;
pub const DEFAULT_STRENGTH: f64 = 0.3;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Inline model configuration (used when generating checkpoints).
    pub model: Option<ModelConfig>,
    /// Path to a JSON or TOML model configuration; ignored when `model` is set.
    pub model_config: Option<PathBuf>,
    pub base: Option<PathBuf>,
    pub experts: Vec<PathBuf>,
    pub anchor: Option<String>,
    pub metric: Option<Metric>,
    pub sigma: Option<f64>,
    pub m_per_layer: Option<usize>,
    pub layers: Option<String>,
    pub method: Option<String>,
    pub include_base: Option<bool>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub strength: Option<f64>,
    pub temperature: Option<f64>,
    pub batch: Option<usize>,
}

fn parse_by_extension<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text).with_context(|| format!("parsing {}", path.display())),
        Some("json") => serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display())),
        _ => bail!("config {} must end in .toml or .json", path.display()),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = parse_by_extension(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                bail!("sigma must be a finite value > 0, got {s}");
            }
        }
        if self.m_per_layer == Some(0) {
            bail!("m_per_layer must be >= 1");
        }
        for p in self.base.iter().chain(&self.experts).chain(&self.model_config) {
            if !p.exists() {
                bail!("config references missing file {}", p.display());
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let cfg = match (&self.model, &self.model_config) {
            (Some(m), _) => m.clone(),
            (None, Some(p)) => parse_by_extension(p)?,
            (None, None) => ModelConfig::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn out_dir(&self, flag: Option<&PathBuf>) -> PathBuf {
        flag.cloned()
            .or_else(|| self.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_json_agree() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("run.toml");
        std::fs::write(&t, "metric = \"cka\"\nsigma = 2.0\nm_per_layer = 5\n[model]\nembed_dim = 16\nnum_layers = 2\nnum_heads = 2\nmlp_hidden = 32\nmax_seq_len = 32\n").unwrap();
        let j = dir.path().join("run.json");
        std::fs::write(&j, r#"{"metric":"cka","sigma":2.0,"m_per_layer":5,"model":{"embed_dim":16,"num_layers":2,"num_heads":2,"mlp_hidden":32,"max_seq_len":32}}"#).unwrap();
        let a = RunConfig::load(&t).unwrap();
        assert_eq!(a, RunConfig::load(&j).unwrap());
        assert_eq!(a.model_config().unwrap().vocab_size, 259);
    }

    #[test]
    fn rejects_bad_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.toml");
        std::fs::write(&p, "sigma = 0.0\n").unwrap();
        assert!(RunConfig::load(&p).is_err());
        std::fs::write(&p, "unknown_key = 1\n").unwrap();
        assert!(RunConfig::load(&p).is_err());
        std::fs::write(&p, "base = \"/nonexistent/base.st\"\n").unwrap();
        assert!(RunConfig::load(&p).is_err());
    }
}
