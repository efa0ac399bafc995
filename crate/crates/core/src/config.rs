//! Run configuration: one JSON file describes a whole experiment. Every
//! command writes its resolved configuration beside its outputs, so a run
//! directory is self-describing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Level;
use crate::error::{Error, Result};
use crate::train::{KappaSchedule, Regime, TrainConfig};
use crate::verify::DEFAULT_ORACLE_BUDGET;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Architecture name (sst-word, sst-char, ag-char) or a descriptor.
    pub architecture: String,
    pub level: Level,
    pub class_count: usize,
    #[serde(default)]
    pub regime: Option<Regime>,

    #[serde(default)]
    pub train_path: Option<PathBuf>,
    #[serde(default)]
    pub valid_path: Option<PathBuf>,
    #[serde(default)]
    pub test_path: Option<PathBuf>,
    /// Word-level models: pretrained embedding file, one token per row.
    #[serde(default)]
    pub embedding_path: Option<PathBuf>,
    #[serde(default)]
    pub table_path: Option<PathBuf>,
    /// Model to evaluate; defaults to `<out_dir>/model.ckpt`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,

    /// Evaluation budget.
    #[serde(default = "default_delta")]
    pub delta: usize,
    /// Sweep budgets, strictly ascending.
    #[serde(default)]
    pub deltas: Vec<usize>,
    /// Training budget.
    #[serde(default = "default_delta")]
    pub delta_train: usize,
    #[serde(default)]
    pub kappa: KappaSchedule,
    #[serde(default = "default_mix")]
    pub mix: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_oracle_budget")]
    pub oracle_budget: u64,
    /// Character-level truncation limit.
    #[serde(default)]
    pub char_limit: Option<usize>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_delta() -> usize {
    3
}
fn default_mix() -> f64 {
    0.5
}
fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    32
}
fn default_epochs() -> usize {
    30
}
fn default_patience() -> usize {
    5
}
fn default_oracle_budget() -> u64 {
    DEFAULT_ORACLE_BUDGET
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn from_str(json: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::Config(format!(
                "class_count {} must be at least 2",
                self.class_count
            )));
        }
        if self.level == Level::Word && self.embedding_path.is_none() {
            return Err(Error::Config(
                "word level needs embedding_path for the pretrained table".into(),
            ));
        }
        self.train_config().validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            regime: self.regime.unwrap_or(Regime::Normal),
            delta_train: self.delta_train,
            kappa: self.kappa,
            mix: self.mix,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("model.ckpt"))
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Writes through a sibling temp file and renames over the target, so
/// readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} has no file name", path.display())))?
        .to_os_string();
    name.push(".tmp");
    let tmp = path.with_file_name(name);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
