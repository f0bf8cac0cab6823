//! Pipeline configuration: one JSON document plus `--set key=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use ecoprod_core::causal::{Aggregation, BaseLearner, CevaeConfig, MetaConfig, Method, DEFAULT_COVARIATES};
use ecoprod_core::dataset::{FeaturePlan, ProvinceSchema};
use ecoprod_core::dea::Rts;
use ecoprod_core::gbm::TrainConfig;
use ecoprod_core::rng::derive_seed;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::Failure;

/// Stage order; a stage's sub-seed is `derive_seed(seed, index)`.
pub const STAGES: [&str; 6] = ["synth", "dea", "cluster", "train", "explain", "causal"];

pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    let index = STAGES.iter().position(|&s| s == stage).expect("known stage");
    derive_seed(seed, index as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub provinces: PathBuf,
    pub complaints: PathBuf,
    /// Inferred from the province header when absent.
    #[serde(default)]
    pub schema: Option<ProvinceSchema>,
    #[serde(default)]
    pub embedding_dim: Option<usize>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub dea: DeaConfig,
    #[serde(default)]
    pub cluster: ClusterConfig,
    /// Standard plan for the chosen cluster count when absent.
    #[serde(default)]
    pub features: Option<FeaturePlan>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub causal: CausalConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeaConfig {
    /// Returns to scale used for eco scores and the High/Low split.
    pub rts: Rts,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    /// Fixed cluster count; chosen by the elbow rule when absent.
    pub k: Option<usize>,
    pub k_max: usize,
    pub permutations: usize,
    pub smoothed_p: bool,
    pub row_normalize: bool,
    pub n_init: usize,
    pub max_iter: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k: None,
            k_max: 12,
            permutations: 99,
            smoothed_p: false,
            row_normalize: true,
            n_init: 10,
            max_iter: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CausalConfig {
    pub methods: Vec<Method>,
    /// Bootstrap replicates; 0 disables intervals.
    pub bootstrap: usize,
    /// CEVAE preset: `desk` or `paper`.
    pub preset: String,
    pub epochs: Option<usize>,
    pub mc_samples: Option<usize>,
    pub covariates: Vec<String>,
    pub treatment: String,
    pub outcome: String,
    pub aggregation: Aggregation,
    pub base: BaseLearner,
    pub propensity: BaseLearner,
    pub heterogeneous_r: bool,
    pub cross_fit_folds: usize,
}

impl Default for CausalConfig {
    fn default() -> Self {
        let meta = MetaConfig::default();
        Self {
            methods: vec![Method::Cevae, Method::S, Method::T, Method::X, Method::R],
            bootstrap: 200,
            preset: "desk".into(),
            epochs: None,
            mc_samples: None,
            covariates: DEFAULT_COVARIATES.iter().map(|s| s.to_string()).collect(),
            treatment: "eco_high".into(),
            outcome: "target".into(),
            aggregation: Aggregation::Unit,
            base: meta.base,
            // Treatment is assigned per province, so a flexible propensity model
            // separates the arms almost perfectly; a ridge logistic keeps overlap.
            propensity: BaseLearner::Glm { l2: 1.0 },
            heterogeneous_r: meta.heterogeneous_r,
            cross_fit_folds: meta.cross_fit_folds,
        }
    }
}

impl CausalConfig {
    pub fn meta(&self, seed: u64) -> MetaConfig {
        MetaConfig {
            base: self.base,
            propensity: self.propensity,
            heterogeneous_r: self.heterogeneous_r,
            cross_fit_folds: self.cross_fit_folds,
            aggregation: self.aggregation,
            seed,
        }
    }

    pub fn cevae(&self, seed: u64) -> anyhow::Result<CevaeConfig> {
        let base = CevaeConfig::preset(&self.preset).ok_or_else(|| anyhow!("unknown CEVAE preset '{}'", self.preset))?;
        Ok(CevaeConfig {
            epochs: self.epochs.unwrap_or(base.epochs),
            mc_samples: self.mc_samples.unwrap_or(base.mc_samples),
            seed,
            ..base
        })
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.methods.is_empty() {
            bail!("causal.methods is empty");
        }
        if self.bootstrap != 0 && self.bootstrap < 50 {
            bail!("causal.bootstrap must be 0 or at least 50");
        }
        self.cevae(0)?;
        Ok(())
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        if self.k == Some(0) {
            bail!("cluster.k must be positive");
        }
        if self.k.is_none() && self.k_max < 3 {
            bail!("cluster.k_max must be at least 3 for the elbow rule");
        }
        if self.n_init == 0 || self.max_iter == 0 {
            bail!("cluster.n_init and cluster.max_iter must be positive");
        }
        Ok(())
    }
}

/// Applies `key.path=value` to a JSON document. The value is parsed as JSON
/// and kept as a string when that fails.
pub fn apply_override(doc: &mut Value, assignment: &str) -> anyhow::Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override '{assignment}' is not of the form key=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key '{key}' is malformed");
    }
    for (i, part) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(map) => map,
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut().expect("just set")
            }
            _ => bail!("override '{key}': '{}' is not an object", parts[..i].join(".")),
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("split yields at least one part")
}

/// Reads, overrides, resolves and validates a pipeline config. Relative paths
/// are taken relative to the config file's directory.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<PipelineConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))
        .map_err(Failure::input)?;
    let mut doc: Value = serde_json::from_str(&text)
        .with_context(|| format!("config {} is not valid JSON", path.display()))
        .map_err(Failure::input)?;
    for o in overrides {
        apply_override(&mut doc, o).map_err(Failure::input)?;
    }
    let mut cfg: PipelineConfig = serde_json::from_value(doc)
        .with_context(|| format!("invalid config {}", path.display()))
        .map_err(Failure::input)?;
    let base = path.parent().unwrap_or(Path::new("."));
    for p in [&mut cfg.provinces, &mut cfg.complaints, &mut cfg.output_dir] {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    cfg.validate().map_err(Failure::input)?;
    Ok(cfg)
}

impl PipelineConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        for p in [&self.provinces, &self.complaints] {
            if !p.is_file() {
                bail!("input file not found: {}", p.display());
            }
        }
        self.cluster.validate()?;
        self.train.validate()?;
        self.causal.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_create_and_replace() {
        let mut doc = json!({"cluster": {"k": 3}});
        apply_override(&mut doc, "cluster.k=5").unwrap();
        apply_override(&mut doc, "causal.preset=paper").unwrap();
        apply_override(&mut doc, "train.eta=0.1").unwrap();
        assert_eq!(doc["cluster"]["k"], json!(5));
        assert_eq!(doc["causal"]["preset"], json!("paper"));
        assert_eq!(doc["train"]["eta"], json!(0.1));
        assert!(apply_override(&mut doc, "novalue").is_err());
        assert!(apply_override(&mut doc, "cluster.k.x=1").is_err());
    }

    #[test]
    fn stage_seeds_differ() {
        let seeds: Vec<u64> = STAGES.iter().map(|s| stage_seed(7, s)).collect();
        let mut uniq = seeds.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), seeds.len());
    }

    #[test]
    fn unknown_keys_rejected() {
        let v = json!({"provinces": "p.csv", "complaints": "c.jsonl", "clutser": {}});
        assert!(serde_json::from_value::<PipelineConfig>(v).is_err());
        let v = json!({"provinces": "p.csv", "complaints": "c.jsonl", "causal": {"methods": ["s", "cevae"]}});
        let cfg: PipelineConfig = serde_json::from_value(v).unwrap();
        assert_eq!(cfg.causal.methods, vec![Method::S, Method::Cevae]);
        assert_eq!(cfg.cluster.k_max, 12);
    }
}
