//! TOML run configuration: model shape, decomposition plan, run settings,
//! and cache geometry, with two built-in presets.

use anyhow::{bail, Context, Result};
use lrtp_core::model::{AttentionVariant, MatrixName, MlpVariant, ModelConfig};
use lrtp_core::{CostConvention, DecompositionPlan};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

/// Which analytic conventions a cost report should include.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ConventionChoice {
    Paper,
    Measured,
    #[default]
    Both,
}

impl ConventionChoice {
    pub fn conventions(&self) -> Vec<CostConvention> {
        match self {
            ConventionChoice::Paper => vec![CostConvention::PaperTable],
            ConventionChoice::Measured => vec![CostConvention::PipelineMeasured],
            ConventionChoice::Both => {
                vec![CostConvention::PaperTable, CostConvention::PipelineMeasured]
            }
        }
    }
}

impl FromStr for ConventionChoice {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(ConventionChoice::Paper),
            "measured" => Ok(ConventionChoice::Measured),
            "both" => Ok(ConventionChoice::Both),
            other => bail!("unknown convention {other:?}; expected paper, measured, or both"),
        }
    }
}

/// Either a uniform compression ratio or explicit per-matrix ranks.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DecompositionSection {
    pub ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub ranks: BTreeMap<String, usize>,
}

impl DecompositionSection {
    pub fn to_plan(&self, cfg: &ModelConfig) -> Result<DecompositionPlan> {
        let plan = match (&self.ratio, self.ranks.is_empty()) {
            (Some(_), false) | (None, true) => {
                bail!("decomposition needs exactly one of `ratio` or `ranks`")
            }
            (Some(ratio), true) => DecompositionPlan::from_ratio(cfg, *ratio)?,
            (None, false) => {
                let mut ranks = BTreeMap::new();
                for (key, &rank) in &self.ranks {
                    ranks.insert(MatrixName::parse(key)?, rank);
                }
                DecompositionPlan::uniform(cfg.num_layers, ranks)
            }
        };
        plan.validate(cfg)?;
        Ok(plan)
    }
}

fn default_seed() -> u64 {
    7
}

fn default_tp() -> Vec<usize> {
    vec![1, 2, 4]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_tp")]
    pub tp: Vec<usize>,
    #[serde(default)]
    pub convention: ConventionChoice,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: default_seed(), tp: default_tp(), convention: ConventionChoice::default() }
    }
}

fn default_block_size() -> usize {
    2
}

fn default_num_blocks() -> usize {
    32
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheSection {
    #[serde(default = "default_block_size")]
    pub block_size: usize,
    #[serde(default = "default_num_blocks")]
    pub num_blocks: usize,
}

impl Default for CacheSection {
    fn default() -> Self {
        Self { block_size: default_block_size(), num_blocks: default_num_blocks() }
    }
}

/// Everything a run needs, as read from `--config`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub decomposition: DecompositionSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub cache: CacheSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: RunConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.decomposition.to_plan(&self.model)?;
        if self.run.tp.is_empty() {
            bail!("run.tp must list at least one world size");
        }
        if self.cache.block_size == 0 || self.cache.num_blocks == 0 {
            bail!("cache.block_size and cache.num_blocks must be positive");
        }
        Ok(())
    }

    pub fn plan(&self) -> Result<DecompositionPlan> {
        self.decomposition.to_plan(&self.model)
    }

    /// A 4-head GQA toy with a GLU MLP and RoPE: small enough that every
    /// suite finishes in seconds, rich enough to exercise grouped heads.
    pub fn toy() -> Self {
        RunConfig {
            model: toy_model(),
            decomposition: DecompositionSection { ratio: Some(0.5), ranks: BTreeMap::new() },
            run: RunSection::default(),
            cache: CacheSection::default(),
        }
    }

    /// The published reference geometry: a 70B-class GLU model (h = 8192,
    /// h_kv = 1024, m = 28672, 80 layers) with the footnote ranks.
    pub fn reference_70b() -> Self {
        let ranks: BTreeMap<String, usize> = [
            ("q", 4916),
            ("k", 614),
            ("v", 614),
            ("o", 4916),
            ("up", 4916),
            ("gate", 4916),
            ("down", 4916),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        RunConfig {
            model: ModelConfig {
                num_heads: 64,
                num_kv_heads: 8,
                head_dim: 128,
                intermediate_dim: 28_672,
                mlp_variant: MlpVariant::Glu,
                attention_variant: AttentionVariant::Gqa,
                use_rope: true,
                rope_base: 500_000.0,
                num_layers: 80,
            },
            decomposition: DecompositionSection { ratio: None, ranks },
            run: RunSection::default(),
            cache: CacheSection::default(),
        }
    }
}

pub fn toy_model() -> ModelConfig {
    ModelConfig {
        num_heads: 4,
        num_kv_heads: 2,
        head_dim: 8,
        intermediate_dim: 64,
        mlp_variant: MlpVariant::Glu,
        attention_variant: AttentionVariant::Gqa,
        use_rope: true,
        rope_base: 10_000.0,
        num_layers: 1,
    }
}
