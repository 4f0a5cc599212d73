use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use tokenctl::flow::TrainConfig;
use tokenctl::model::ModelConfig;
use tokenctl::tasks::TaskKind;
use tokenctl::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalBlock {
    pub n: usize,
    pub n_steps: usize,
}

impl Default for EvalBlock {
    fn default() -> Self {
        Self { n: 200, n_steps: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareBlock {
    pub seeds: Vec<u64>,
}

impl Default for CompareBlock {
    fn default() -> Self {
        Self { seeds: (0..5).collect() }
    }
}

/// Everything one command needs. Every field is optional in the file;
/// `gamma` is the strength used when sampling, `train.gamma` the one used
/// while training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskKind,
    pub data_seed: u64,
    pub seed: u64,
    pub gamma: f64,
    pub out: PathBuf,
    /// Frozen base checkpoint for adapter training and comparisons.
    pub base: Option<PathBuf>,
    pub eval: EvalBlock,
    pub compare: CompareBlock,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            task: TaskKind::EdgeToImage,
            data_seed: 0,
            seed: 0,
            gamma: 1.0,
            out: PathBuf::from("run"),
            base: None,
            eval: EvalBlock::default(),
            compare: CompareBlock::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("gamma {} must be finite and >= 0", self.gamma)));
        }
        if self.eval.n_steps == 0 {
            return Err(Error::Config("eval.n_steps must be positive".into()));
        }
        Ok(())
    }

    /// Resolved config with sorted keys.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&serde_json::to_value(self)?)?)
    }
}
