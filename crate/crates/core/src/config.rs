//! Run configuration: TOML file, dotted-key overrides and validation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentationConfig;
use crate::data::{DatasetConfig, SentenceConfig};
use crate::error::{Error, Result};
use crate::inference::FusionMode;
use crate::losses::{LocalObjective, LossWeights, SentenceReduction};
use crate::model::{ModelConfig, ObjectiveSettings};
use crate::numeric::checkpoint::Precision;
use crate::prompt::{PromptGrammar, PromptScheme, SynthesisOptions};
use crate::synthetic::SyntheticConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    pub sentences: SentenceConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub local_objective: LocalObjective,
    pub sentence_reduction: SentenceReduction,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    #[default]
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: Schedule,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: Schedule::Cosine,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Worker threads; results do not depend on it.
    pub threads: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            threads: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub prompt_scheme: PromptScheme,
    pub fusion: FusionMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSplits {
    pub train_samples: usize,
    pub eval_samples: usize,
    pub presence_probability: f64,
    pub background: f64,
    pub noise_sigma: f64,
}

impl Default for SyntheticSplits {
    fn default() -> Self {
        let r = SyntheticConfig::default();
        Self {
            train_samples: 4000,
            eval_samples: 1000,
            presence_probability: r.presence_probability,
            background: r.background,
            noise_sigma: r.noise_sigma,
        }
    }
}

impl SyntheticSplits {
    pub fn render_config(&self, image_size: usize) -> SyntheticConfig {
        SyntheticConfig {
            image_size,
            presence_probability: self.presence_probability,
            background: self.background,
            noise_sigma: self.noise_sigma,
        }
    }
}

/// Everything a run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Class order of every label vector; empty means the grammar's order.
    pub classes: Vec<String>,
    /// Prompt grammar file; the bundled grammar when absent.
    pub grammar: Option<PathBuf>,
    pub precision: Precision,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub augmentation: AugmentationConfig,
    pub synthesis: SynthesisOptions,
    pub inference: InferenceConfig,
    pub synthetic: SyntheticSplits,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            classes: Vec::new(),
            grammar: None,
            precision: Precision::F64,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            augmentation: AugmentationConfig::default(),
            synthesis: SynthesisOptions::default(),
            inference: InferenceConfig::default(),
            synthetic: SyntheticSplits::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    /// Parses `text`, then applies `key.path=value` overrides.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let parts: Vec<&str> = key.trim().split('.').collect();
            if parts.iter().any(|p| p.is_empty()) {
                return Err(Error::Config(format!("invalid override key `{key}`")));
            }
            let (last, path) = parts.split_last().expect("non-empty key");
            let mut table = &mut root;
            for p in path {
                table = table
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
            }
            table.insert(last.to_string(), parse_value(raw.trim()));
        }
        let cfg: Self = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with(&text, overrides)
    }

    /// Effective configuration as TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.weights.validate()?;
        self.augmentation.validate()?;
        let o = &self.optim;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return Err(Error::Config("optim.learning_rate must be positive".into()));
        }
        if !(o.weight_decay >= 0.0) {
            return Err(Error::Config("optim.weight_decay must be >= 0".into()));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return Err(Error::Config("optim.beta1 and optim.beta2 must lie in [0, 1)".into()));
        }
        if !(o.eps > 0.0) {
            return Err(Error::Config("optim.eps must be positive".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.train.threads == Some(0) {
            return Err(Error::Config("train.threads must be positive".into()));
        }
        Ok(())
    }

    pub fn load_grammar(&self) -> Result<PromptGrammar> {
        match &self.grammar {
            Some(p) => PromptGrammar::load(p),
            None => Ok(PromptGrammar::default_grammar()),
        }
    }

    /// Class order: configured list, or the grammar's classes.
    pub fn class_names(&self, grammar: &PromptGrammar) -> Result<Vec<String>> {
        if self.classes.is_empty() {
            return Ok(grammar.class_names());
        }
        if self.classes != grammar.class_names() {
            return Err(Error::Config(format!(
                "configured classes {:?} differ from grammar classes {:?}",
                self.classes,
                grammar.class_names()
            )));
        }
        Ok(self.classes.clone())
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            image_size: self.model.image_size,
            channels: self.model.channels,
            sentences: self.data.sentences.clone(),
        }
    }

    pub fn objective(&self) -> ObjectiveSettings {
        ObjectiveSettings {
            weights: self.loss.weights,
            local_objective: self.loss.local_objective,
            sentence_reduction: self.loss.sentence_reduction,
        }
    }
}

/// One run of a recipe: a name plus the four loss weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeRun {
    pub name: String,
    /// `[local, global, simsiam, mirrored]`.
    pub weights: [f64; 4],
}

/// A set of runs sharing a base configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    pub runs: Vec<RecipeRun>,
}

impl Recipe {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("recipe: {e}")))?;
        let mut names = std::collections::HashSet::new();
        for run in &r.runs {
            if !names.insert(run.name.as_str()) {
                return Err(Error::Config(format!("duplicate recipe run `{}`", run.name)));
            }
            run.loss_weights()?;
        }
        Ok(r)
    }
}

impl RecipeRun {
    pub fn loss_weights(&self) -> Result<LossWeights> {
        let [a, b, c, d] = self.weights;
        LossWeights::new(a, b, c, d)
    }

    /// `base` with this run's weights.
    pub fn apply(&self, base: &RunConfig) -> Result<RunConfig> {
        let mut cfg = base.clone();
        cfg.loss.weights = self.loss_weights()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sed = 3").is_err());
        assert!(RunConfig::from_toml("[model]\nd_proj2 = 3").is_err());
    }

    #[test]
    fn overrides_apply_and_validate() {
        let c = RunConfig::from_toml_with(
            "",
            &[
                "model.d_proj=16".into(),
                "loss.weights.simsiam=0".into(),
                "inference.fusion=cat".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.model.d_proj, 16);
        assert_eq!(c.loss.weights.simsiam, 0.0);
        assert_eq!(c.inference.fusion, FusionMode::Cat);
        assert!(RunConfig::from_toml_with("", &["optim.learning_rate=-1".into()]).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.data.train = Some("a/b.jsonl".into());
        c.train.threads = Some(2);
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }
}
