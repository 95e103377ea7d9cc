//! The TOML run configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use cellgrow::bilevel::{BilevelConfig, EarlyStop};
use cellgrow::cells::{Backbone, BaselineKind, OutputRule};
use cellgrow::morphism::MorphConfig;
use cellgrow::search::{PruneMode, SearchConfig, Split};
use cellgrow::tasks::{SeriesConfig, SynthConfig, TextConfig};
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Schema version; must be [`CONFIG_VERSION`].
    pub version: u32,
    /// One trial per seed.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Output directory, relative to the working directory.
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub task: TaskBlock,
    #[serde(default)]
    pub model: ModelBlock,
    #[serde(default)]
    pub search: SearchBlock,
    #[serde(default)]
    pub bilevel: BilevelConfig,
    #[serde(default)]
    pub morph: MorphConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskBlock {
    /// Synthetic VAR series, regenerated per trial.
    Synth {
        /// Fixed seed for the data; by default each trial uses its own seed.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        data_seed: Option<u64>,
        #[serde(default)]
        synth: SynthConfig,
        #[serde(default)]
        series: SeriesConfig,
    },
    /// Numeric CSV with a header row.
    Csv {
        path: PathBuf,
        #[serde(default)]
        series: SeriesConfig,
    },
    /// UTF-8 text for character-level language modelling.
    Text {
        path: PathBuf,
        #[serde(default)]
        text: TextConfig,
    },
}

/// What the `baseline` command trains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineChoice {
    Rnn,
    Gru,
    #[default]
    Lstm,
    /// The search backbone with a fixed node count and trained logits.
    Backbone,
}

impl BaselineChoice {
    pub fn kind(self) -> Option<BaselineKind> {
        match self {
            BaselineChoice::Rnn => Some(BaselineKind::Rnn),
            BaselineChoice::Gru => Some(BaselineKind::Gru),
            BaselineChoice::Lstm => Some(BaselineKind::Lstm),
            BaselineChoice::Backbone => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelBlock {
    pub backbone: Backbone,
    pub output_rule: OutputRule,
    /// Nodes in the first search stage.
    pub m0: usize,
    /// Hidden size; series tasks default to the series dimension, text to 32.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_h: Option<usize>,
    pub baseline: BaselineChoice,
    /// Node count of a fixed backbone baseline.
    pub nodes: usize,
}

impl Default for ModelBlock {
    fn default() -> Self {
        ModelBlock {
            backbone: Backbone::TwoToOne,
            output_rule: OutputRule::Mean,
            m0: 2,
            n_h: None,
            baseline: BaselineChoice::Lstm,
            nodes: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchBlock {
    pub mode: PruneMode,
    pub max_stages: usize,
    /// Epochs without validation improvement before a stage ends; also the
    /// stopping rule of the `baseline` command.
    pub patience: usize,
    pub max_epochs: usize,
    pub tune_patience: usize,
    pub tune_max_epochs: usize,
    pub dynamic_ops: bool,
    pub tune_after_final_prune: bool,
    pub eval_split: Split,
}

impl Default for SearchBlock {
    fn default() -> Self {
        let s = SearchConfig::default();
        SearchBlock {
            mode: s.mode,
            max_stages: s.max_stages,
            patience: s.stop.patience,
            max_epochs: s.stop.max_epochs,
            tune_patience: s.tune_stop.patience,
            tune_max_epochs: s.tune_stop.max_epochs,
            dynamic_ops: s.dynamic_ops,
            tune_after_final_prune: s.tune_after_final_prune,
            eval_split: s.eval_split,
        }
    }
}

impl RunConfig {
    /// Parses and validates a config file. Relative data paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("in {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        match &mut cfg.task {
            TaskBlock::Csv { path, .. } | TaskBlock::Text { path, .. } if path.is_relative() => {
                *path = base.join(&*path);
            }
            _ => {}
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(ConfigError::from)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.version != CONFIG_VERSION {
            bail!(ConfigError::new(format!("version = {} is not supported (expected {CONFIG_VERSION})", self.version)));
        }
        if self.seeds.is_empty() {
            bail!(ConfigError::new("seeds must list at least one seed"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            bail!(ConfigError::new("seeds must be distinct"));
        }
        if self.model.n_h == Some(0) || self.model.nodes == 0 {
            bail!(ConfigError::new("model.n_h and model.nodes must be >= 1"));
        }
        match &self.task {
            TaskBlock::Synth { series, .. } | TaskBlock::Csv { series, .. } => series.validate()?,
            TaskBlock::Text { text, .. } => text.validate()?,
        }
        self.search_config().validate()?;
        Ok(())
    }

    pub fn search_config(&self) -> SearchConfig {
        let s = &self.search;
        SearchConfig {
            backbone: self.model.backbone,
            output_rule: self.model.output_rule,
            mode: s.mode,
            m0: self.model.m0,
            max_stages: s.max_stages,
            stop: self.stop(),
            tune_stop: EarlyStop { patience: s.tune_patience, max_epochs: s.tune_max_epochs },
            dynamic_ops: s.dynamic_ops,
            tune_after_final_prune: s.tune_after_final_prune,
            eval_split: s.eval_split,
            morph: self.morph.clone(),
            bilevel: self.bilevel.clone(),
        }
    }

    pub fn stop(&self) -> EarlyStop {
        EarlyStop { patience: self.search.patience, max_epochs: self.search.max_epochs }
    }

    /// The same run restricted to one seed.
    pub fn for_seed(&self, seed: u64) -> Self {
        RunConfig { seeds: vec![seed], ..self.clone() }
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }
}

/// Bad input rather than a failed computation; maps to exit code 1.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl ConfigError {
    pub fn new(msg: impl Into<String>) -> Self {
        ConfigError(msg.into())
    }
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

impl From<toml::de::Error> for ConfigError {
    fn from(e: toml::de::Error) -> Self {
        ConfigError(e.to_string())
    }
}
