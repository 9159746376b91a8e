//! Experiment configuration: a TOML file, dotted `key=value` overrides and
//! an optional root seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use skipvae::data::BinarizeMode;
use skipvae::metrics::{EvalConfig, ProbeConfig};
use skipvae::models::{Activation, ModelConfig};
use skipvae::training::TrainConfig;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Idx,
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HeldOutSplit {
    /// A slice of the training file.
    #[default]
    Train,
    /// The separate test files.
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    pub train_images: PathBuf,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub train_start: usize,
    pub train_count: usize,
    pub heldout: HeldOutSplit,
    pub heldout_start: usize,
    pub heldout_count: usize,
    pub binarize: BinarizeMode,
    pub synthetic_p: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Idx,
            train_images: PathBuf::from("data/mnist/train-images-idx3-ubyte"),
            train_labels: Some(PathBuf::from("data/mnist/train-labels-idx1-ubyte")),
            test_images: None,
            test_labels: None,
            train_start: 0,
            train_count: 50_000,
            heldout: HeldOutSplit::Train,
            heldout_start: 50_000,
            heldout_count: 10_000,
            binarize: BinarizeMode::Threshold,
            synthetic_p: 64,
        }
    }
}

/// [`ModelConfig`] without the data width, which comes from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub latent_dim: usize,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub skip_enabled: bool,
    pub activation: Activation,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            latent_dim: 50,
            encoder_widths: vec![512, 512],
            decoder_widths: vec![512, 512],
            skip_enabled: false,
            activation: Activation::Relu,
        }
    }
}

impl ModelSection {
    pub fn with_data_dim(&self, data_dim: usize) -> ModelConfig {
        ModelConfig {
            latent_dim: self.latent_dim,
            data_dim,
            encoder_widths: self.encoder_widths.clone(),
            decoder_widths: self.decoder_widths.clone(),
            skip_enabled: self.skip_enabled,
            activation: self.activation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    /// Random chains compared with and without the direct path.
    pub sweep_size: usize,
    /// Models used to validate the Monte-Carlo MI estimator.
    pub mi_models: usize,
    pub mi_points: usize,
    pub mi_samples: usize,
    /// Absolute floor of the estimator tolerance in nats.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            sweep_size: 100,
            mi_models: 10,
            mi_points: 2000,
            mi_samples: 4,
            tolerance: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSection {
    /// `skip_enabled` of the first and second arm.
    pub skip_arms: [bool; 2],
}

impl Default for CompareSection {
    fn default() -> Self {
        Self {
            skip_arms: [false, true],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub probe: ProbeConfig,
    pub oracle: OracleSection,
    pub compare: CompareSection,
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `section.key = value` given `"section.key=value"`.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key `{key}` is malformed")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override key `{key}`: `{part}` is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl Config {
    /// Reads `path` (if any), applies overrides in order, then the root seed.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Config, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut config: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        if let Some(seed) = seed {
            config.set_seed(seed);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.eval.seed = seed;
        self.probe.seed = seed;
        self.oracle.seed = seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.model.decoder_widths.is_empty() || self.model.latent_dim == 0 {
            return Err(CliError::Config("model needs latent_dim >= 1 and at least one decoder layer".into()));
        }
        if self.model.encoder_widths.iter().chain(&self.model.decoder_widths).any(|&w| w == 0) {
            return Err(CliError::Config("model layer widths must be positive".into()));
        }
        if !(self.oracle.tolerance >= 0.0) {
            return Err(CliError::Config(format!(
                "oracle.tolerance must be non-negative, got {}",
                self.oracle.tolerance
            )));
        }
        if self.oracle.mi_points < 2 || self.oracle.mi_samples == 0 {
            return Err(CliError::Config("oracle.mi_points must be >= 2 and oracle.mi_samples >= 1".into()));
        }
        if self.eval.n_mi_points < 2 || self.eval.mi_samples == 0 || self.eval.is_samples == 0 {
            return Err(CliError::Config("eval sample counts must be positive (n_mi_points >= 2)".into()));
        }
        if self.data.train_count == 0 || self.data.heldout_count == 0 {
            return Err(CliError::Config("data.train_count and data.heldout_count must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable as TOML")
    }
}
