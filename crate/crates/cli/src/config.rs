//! Run configuration: one TOML file with per-module blocks, plus
//! `I2E_<BLOCK>_<KEY>` environment overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use i2e_core::curator::{CuratorConfig, MixMode};
use i2e_core::eval::EvalConfig;
use i2e_core::hyperembed::PoincareConfig;
use i2e_core::linker::LinkerConfig;
use i2e_core::trainer::TrainerConfig;
use serde::{Deserialize, Serialize};

use crate::synth::SyntheticSpec;

pub const BLOCKS: [&str; 9] = [
    "run",
    "paths",
    "synth",
    "hyperembed",
    "linker",
    "curator",
    "trainer",
    "eval",
    "ablate",
];

/// Input locations. Unset paths default to the synthetic fixture's file
/// names inside the output directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub kb: Option<PathBuf>,
    pub graph: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub features: Option<PathBuf>,
    /// Held-out split: `image_id \t entity_id` per line.
    pub eval: Option<PathBuf>,
    /// Zero-shot prompt templates, one per line.
    pub templates: Option<PathBuf>,
    /// Pretrained entity embeddings; trained from the graph when unset.
    pub entity_embeddings: Option<PathBuf>,
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.kb,
            &mut self.graph,
            &mut self.pairs,
            &mut self.features,
            &mut self.eval,
            &mut self.templates,
            &mut self.entity_embeddings,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn kb(&self, out: &Path) -> PathBuf {
        self.kb.clone().unwrap_or_else(|| out.join(files::KB))
    }

    pub fn graph(&self, out: &Path) -> PathBuf {
        self.graph.clone().unwrap_or_else(|| out.join(files::GRAPH))
    }

    pub fn pairs(&self, out: &Path) -> PathBuf {
        self.pairs.clone().unwrap_or_else(|| out.join(files::PAIRS))
    }

    pub fn features(&self, out: &Path) -> PathBuf {
        self.features
            .clone()
            .unwrap_or_else(|| out.join(files::FEATURES))
    }

    pub fn eval(&self, out: &Path) -> PathBuf {
        self.eval.clone().unwrap_or_else(|| out.join(files::EVAL))
    }
}

/// Artifact file names inside the output directory.
pub mod files {
    pub const KB: &str = "kb.tsv";
    pub const GRAPH: &str = "graph.tsv";
    pub const PAIRS: &str = "pairs.tsv";
    pub const FEATURES: &str = "features.bin";
    pub const EVAL: &str = "eval.tsv";
    pub const SYNTH_SPEC: &str = "synth.json";
    pub const ENTITY_EMBEDDINGS: &str = "entities.poincare";
    pub const FILTERED: &str = "filtered.tsv";
    pub const LINKED: &str = "linked.tsv";
    pub const I2E: &str = "i2e.tsv";
    pub const HISTOGRAM: &str = "histogram.tsv";
    pub const LEDGER: &str = "ledger.json";
    pub const CHECKPOINT: &str = "model.ckpt";
    pub const METRICS: &str = "metrics.csv";
    pub const REPORT: &str = "report.json";
    pub const PER_QUERY: &str = "per_query.csv";
    pub const EMBEDDINGS: &str = "embeddings.bin";
    pub const ABLATION: &str = "ablation.csv";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    /// Worker cap for parallel stages.
    pub shards: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seed: 0, shards: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerSection {
    /// Contrastive text source for clip and mofi recipes.
    pub mix: MixMode,
    #[serde(flatten)]
    pub config: TrainerConfig,
}

impl Default for TrainerSection {
    fn default() -> Self {
        TrainerSection {
            mix: MixMode::Mixed,
            config: TrainerConfig {
                hidden_dim: 128,
                embed_dim: 32,
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Inline templates; `paths.templates` takes precedence.
    pub templates: Option<Vec<String>>,
    #[serde(flatten)]
    pub config: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub axis: Option<String>,
    pub values: Vec<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub run: RunSection,
    pub paths: Paths,
    pub synth: SyntheticSpec,
    pub hyperembed: PoincareConfig,
    pub linker: LinkerConfig,
    pub curator: CuratorConfig,
    pub trainer: TrainerSection,
    pub eval: EvalSection,
    pub ablate: AblateSection,
}

/// Sets `table[block][key]` from each `I2E_<BLOCK>_<KEY>=value` pair.
/// Values parse as TOML scalars or arrays when possible, else as strings.
pub fn apply_overrides(
    root: &mut toml::Table,
    vars: impl IntoIterator<Item = (String, String)>,
) -> Result<Vec<String>> {
    let mut applied = Vec::new();
    for (name, raw) in vars {
        let Some(rest) = name.strip_prefix("I2E_") else {
            continue;
        };
        let Some((block, key)) = rest.split_once('_') else {
            bail!("environment override {name} lacks a key");
        };
        let block = block.to_ascii_lowercase();
        if !BLOCKS.contains(&block.as_str()) {
            bail!("environment override {name}: unknown block {block:?}");
        }
        let key = key.to_ascii_lowercase();
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.clone()));
        let entry = root
            .entry(block.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        let Some(table) = entry.as_table_mut() else {
            bail!("config key {block:?} is not a table");
        };
        table.insert(key.clone(), value);
        applied.push(format!("{block}.{key}"));
    }
    Ok(applied)
}

impl Config {
    /// Parses TOML text, applies overrides, and resolves relative paths
    /// against `base`.
    pub fn from_toml(
        text: &str,
        base: &Path,
        vars: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self> {
        let mut root: toml::Table = toml::from_str(text).context("parsing config")?;
        for o in apply_overrides(&mut root, vars)? {
            log::info!("config override {o}");
        }
        let mut cfg: Config = toml::Value::Table(root)
            .try_into()
            .context("config does not match the expected schema")?;
        cfg.paths.resolve(base);
        Ok(cfg)
    }

    /// Loads `path` (or defaults when `None`) with overrides from the
    /// process environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let vars = std::env::vars().filter(|(k, _)| k.starts_with("I2E_"));
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                let base = p.parent().unwrap_or(Path::new("."));
                Self::from_toml(&text, base, vars)
            }
            None => Self::from_toml("", Path::new("."), vars),
        }
    }

    /// Propagates the run seed to every module.
    pub fn apply_seed(&mut self, seed: u64) {
        self.run.seed = seed;
        self.synth.seed = seed;
        self.hyperembed.seed = seed;
        self.trainer.config.seed = seed;
        self.eval.config.seed = seed;
        self.eval.config.probe.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.shards == 0 {
            bail!("run.shards must be at least 1");
        }
        self.synth.validate()?;
        self.curator.validate()?;
        self.trainer.config.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
