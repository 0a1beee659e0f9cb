use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::contrastive::ContrastiveConfig;
use crate::diffcore::{ConfigHash, OptimizerConfig};
use crate::downstream::{Arch, DownstreamConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::evalbench::SyntheticCorpusSpec;
use crate::features::FeatureConfig;

/// Everything a command needs, read from one TOML file. Every section and
/// key is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub features: FeatureConfig,
    pub corpus: SyntheticCorpusSpec,
    pub encoder: EncoderConfig,
    pub contrastive: ContrastiveConfig,
    pub pretrain_optimizer: OptimizerConfig,
    pub downstream: DownstreamConfig,
    pub optimizer: OptimizerConfig,
    pub benchmark: BenchmarkConfig,
    /// Axis name to the values it takes; cells are the cross product.
    pub grid: BTreeMap<String, Vec<toml::Value>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    /// Corpus directory holding `manifest.tsv`; synthesized in memory when unset.
    pub data_dir: Option<PathBuf>,
    /// Pre-trained encoder weights for `finetune`.
    pub pretrained: Option<PathBuf>,
    /// Downstream model for `evaluate`.
    pub model: Option<PathBuf>,
    /// Fraction of training participants whose labels are used downstream.
    pub labeled_fraction: f64,
    /// Whether grid cells pre-train before fine-tuning.
    pub use_pretraining: bool,
    /// Split scored by `evaluate`.
    pub eval_split: String,
    /// Grid runs regenerate the in-memory synthetic corpus with the run seed
    /// instead of sharing one corpus across seeds.
    pub resample_corpus: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seeds: vec![0, 1, 2, 3, 4],
            data_dir: None,
            pretrained: None,
            model: None,
            labeled_fraction: 1.0,
            use_pretraining: true,
            eval_split: "test".into(),
            resample_corpus: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub archs: Vec<Arch>,
    pub mask_rates: Vec<f64>,
    pub warmup: usize,
    pub trials: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            archs: vec![Arch::Single, Arch::Ensemble],
            mask_rates: vec![0.0, 0.25, 0.5, 0.75],
            warmup: 20,
            trials: 200,
        }
    }
}

/// Short grid axis names and the config keys they set.
pub const AXIS_ALIASES: [(&str, &str); 6] = [
    ("pretrain_mask_rate", "contrastive.mask_rate"),
    ("downstream_mask_rate", "downstream.mask_rate"),
    ("similarity", "contrastive.metric"),
    ("arch", "downstream.arch"),
    ("freeze", "downstream.freeze_encoder"),
    ("encoder_kind", "encoder.kind"),
];

pub fn resolve_axis(name: &str) -> &str {
    AXIS_ALIASES
        .iter()
        .find(|(a, _)| *a == name)
        .map_or(name, |(_, key)| key)
}

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: e
                .span()
                .map_or(0, |s| text[..s.start.min(text.len())].lines().count().max(1)),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.seeds.is_empty() {
            return Err(Error::InvalidConfig("run.seeds must not be empty".into()));
        }
        if !(self.run.labeled_fraction > 0.0 && self.run.labeled_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "run.labeled_fraction {} not in (0, 1]",
                self.run.labeled_fraction
            )));
        }
        self.run
            .eval_split
            .parse::<crate::features::Split>()
            .map_err(Error::InvalidConfig)?;
        self.features.validate()?;
        self.corpus.validate(&self.features)?;
        self.encoder.validate()?;
        if self.encoder.input_dim != self.features.n_bins {
            return Err(Error::InvalidConfig(format!(
                "encoder.input_dim {} differs from features.n_bins {}",
                self.encoder.input_dim, self.features.n_bins
            )));
        }
        self.contrastive.validate()?;
        self.downstream.validate()?;
        for (axis, values) in &self.grid {
            if values.is_empty() {
                return Err(Error::InvalidConfig(format!("grid axis `{axis}` has no values")));
            }
        }
        Ok(())
    }

    /// Canonical TOML text; identical configs give identical text.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn hash(&self) -> Result<ConfigHash> {
        Ok(ConfigHash::of(&self.to_toml()?))
    }

    /// A copy with `key` (dotted, or a grid alias) set to `value`.
    pub fn with_override(&self, key: &str, value: &toml::Value) -> Result<Self> {
        let key = resolve_axis(key);
        let mut tree = toml::Value::try_from(self).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let mut slot = &mut tree;
        for part in key.split('.') {
            slot = slot
                .get_mut(part)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown config key `{key}`")))?;
        }
        *slot = value.clone();
        let cfg: ExperimentConfig = tree
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(format!("`{key}` = {value}: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
