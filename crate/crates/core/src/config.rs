//! Run configuration: a TOML file with `model`, `attributes`,
//! `regularizer`, `optimizer`, and `run` sections. Every field has a
//! default, and `section.key=value` overrides are applied before validation.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::Activation;
use crate::error::{Error, Result};
use crate::model::{Mode, ModelConfig};
use crate::objective::RegularizerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Taken from the training data when absent.
    pub feature_dim: Option<usize>,
    pub activation: Activation,
    pub mode: Mode,
    pub concat_slots: usize,
    pub tied: bool,
    pub freeze_embedding: bool,
    pub pretrained_embedding: Option<PathBuf>,
    /// Words seen fewer times in the training captions map to `<unk>`.
    pub min_count: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            embed_dim: 32,
            input_dim: 64,
            hidden_dim: 64,
            feature_dim: None,
            activation: Activation::Tanh,
            mode: Mode::Att,
            concat_slots: 3,
            tied: true,
            freeze_embedding: false,
            pretrained_embedding: None,
            min_count: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AttributeSource {
    /// Frequent words of the image's own reference captions.
    #[default]
    Gt,
    /// Frequent words of the nearest training images' captions.
    Knn,
    /// Ground truth corrupted at a controlled rate.
    NoisyOracle,
}

impl AttributeSource {
    pub fn as_str(self) -> &'static str {
        match self {
            AttributeSource::Gt => "gt",
            AttributeSource::Knn => "knn",
            AttributeSource::NoisyOracle => "noisy-oracle",
        }
    }
}

impl fmt::Display for AttributeSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttributeSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [AttributeSource::Gt, AttributeSource::Knn, AttributeSource::NoisyOracle]
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::arg(format!("unknown attribute source `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributeSection {
    pub source: AttributeSource,
    /// Attributes per image; the mode's default when absent.
    pub count: Option<usize>,
    pub neighbors: usize,
    pub precision: f64,
    /// Stopwords are the `stopwords_top` most frequent caption tokens.
    pub stopwords_top: usize,
    /// Precomputed `id word:score ...` lines that replace the source.
    pub file: Option<PathBuf>,
}

impl Default for AttributeSection {
    fn default() -> Self {
        AttributeSection {
            source: AttributeSource::Gt,
            count: None,
            neighbors: 5,
            precision: 0.8,
            stopwords_top: 20,
            file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Elementwise gradient clipping bound; none when absent.
    pub clip: Option<f64>,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            learning_rate: 2e-3,
            decay: 0.9,
            epsilon: 1e-8,
            batch_size: 16,
            epochs: 20,
            clip: Some(5.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    /// Independently initialized models trained by `train`.
    pub ensemble: usize,
    pub max_len: usize,
    pub beam_width: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            ensemble: 1,
            max_len: 20,
            beam_width: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub attributes: AttributeSection,
    pub regularizer: RegularizerConfig,
    pub optimizer: OptimizerSection,
    pub run: RunSection,
}

fn positive(field: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::config(field, "must be at least 1"));
    }
    Ok(())
}

impl RunConfig {
    /// Parses TOML text, applies `section.key=value` overrides, validates.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| toml_error(&e))?;
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        let config = RunConfig::deserialize(table).map_err(|e| toml_error(&e))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::config("config", format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn attribute_count(&self) -> usize {
        self.attributes
            .count
            .unwrap_or_else(|| self.model.mode.default_attribute_count())
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        positive("model.embed_dim", m.embed_dim)?;
        positive("model.input_dim", m.input_dim)?;
        positive("model.hidden_dim", m.hidden_dim)?;
        if let Some(f) = m.feature_dim {
            positive("model.feature_dim", f)?;
        }
        positive("model.concat_slots", m.concat_slots)?;
        positive("model.min_count", m.min_count)?;

        let a = &self.attributes;
        if let Some(k) = a.count {
            positive("attributes.count", k)?;
        }
        positive("attributes.neighbors", a.neighbors)?;
        if !(0.0..=1.0).contains(&a.precision) {
            return Err(Error::config("attributes.precision", "must lie in [0, 1]"));
        }

        self.regularizer.validate()?;

        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return Err(Error::config("optimizer.learning_rate", "must be finite and > 0"));
        }
        if !(o.decay > 0.0 && o.decay < 1.0) {
            return Err(Error::config("optimizer.decay", "must lie in (0, 1)"));
        }
        if !(o.epsilon > 0.0 && o.epsilon.is_finite()) {
            return Err(Error::config("optimizer.epsilon", "must be finite and > 0"));
        }
        positive("optimizer.batch_size", o.batch_size)?;
        positive("optimizer.epochs", o.epochs)?;
        if let Some(c) = o.clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config("optimizer.clip", "must be finite and > 0"));
            }
        }

        positive("run.ensemble", self.run.ensemble)?;
        positive("run.max_len", self.run.max_len)?;
        positive("run.beam_width", self.run.beam_width)?;
        Ok(())
    }

    /// Model shape for a vocabulary and feature size.
    pub fn model_config(&self, vocab_size: usize, feature_dim: usize) -> Result<ModelConfig> {
        if let Some(f) = self.model.feature_dim {
            if f != feature_dim {
                return Err(Error::config(
                    "model.feature_dim",
                    format!("is {f} but the data has {feature_dim}-dimensional features"),
                ));
            }
        }
        let config = ModelConfig {
            vocab_size,
            embed_dim: self.model.embed_dim,
            input_dim: self.model.input_dim,
            hidden_dim: self.model.hidden_dim,
            feature_dim,
            activation: self.model.activation,
            mode: self.model.mode,
            concat_slots: self.model.concat_slots,
            tied: self.model.tied,
            freeze_embedding: self.model.freeze_embedding,
        };
        config.validate()?;
        Ok(config)
    }
}

fn toml_error(e: &toml::de::Error) -> Error {
    Error::config("config", e.message().to_string())
}

fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::config(item, "override must look like section.key=value"))?;
    let key = key.trim();
    let (section, field) = key
        .split_once('.')
        .ok_or_else(|| Error::config(key, "override key must be section.key"))?;
    let raw = raw.trim();
    // Bare words such as `ATT` or `gt` are taken as strings.
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let section_table = entry
        .as_table_mut()
        .ok_or_else(|| Error::config(section, "is not a section"))?;
    section_table.insert(field.to_string(), value);
    Ok(())
}
