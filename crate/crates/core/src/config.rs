//! Pipeline configuration read from TOML.
//!
//! ```toml
//! [gen]
//! seed = 1
//! n_patients = 500
//!
//! [model]
//! d_model = 128
//!
//! [train]
//! learning_rate = 3e-4
//! optimizer = { kind = "adam", beta1 = 0.9, beta2 = 0.999, eps = 1e-8 }
//! ```
//!
//! Every section and key is optional; omitted values take their defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusConfig, DEFAULT_INSTRUCTION};
use crate::error::{Error, Result};
use crate::inference::EvalConfig;
use crate::model::ModelConfig;
use crate::synthgen::GenConfig;
use crate::trainer::{Stage, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Train/dev/test patient fractions.
    pub split: (f64, f64, f64),
    pub split_seed: u64,
    pub instruction: String,
    /// Seed of the within-visit order shuffles.
    pub perturb_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            split: (0.8, 0.1, 0.1),
            split_seed: 7,
            instruction: DEFAULT_INSTRUCTION.to_string(),
            perturb_seed: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub ks: Vec<usize>,
    /// Upper bound on decoded codes per visit.
    pub max_steps: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            ks: vec![10, 20],
            max_steps: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub gen: GenConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    /// Settings shared by both stages unless overridden below.
    pub train: TrainConfig,
    /// Overrides applied for the memorization stage.
    pub memorize: Option<toml::Table>,
    /// Overrides applied for the diagnosis stage.
    pub diagnose: Option<toml::Table>,
    pub eval: EvalSettings,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.train.validate()?;
        for stage in [Stage::Memorize, Stage::Diagnose] {
            self.train_for(stage)?.validate()?;
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::Config("eval.ks must be non-empty and positive".into()));
        }
        if self.eval.max_steps == 0 {
            return Err(Error::Config("eval.max_steps must be > 0".into()));
        }
        Ok(())
    }

    /// `[train]` with the stage's override table merged on top.
    pub fn train_for(&self, stage: Stage) -> Result<TrainConfig> {
        let overrides = match stage {
            Stage::Memorize => &self.memorize,
            Stage::Diagnose => &self.diagnose,
        };
        let mut base = toml::Table::try_from(&self.train).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(o) = overrides {
            for (k, v) in o {
                base.insert(k.clone(), v.clone());
            }
        }
        let mut cfg: TrainConfig = base
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("[{stage:?}] {e}").to_lowercase()))?;
        cfg.stage = stage;
        Ok(cfg)
    }

    pub fn corpus(&self) -> CorpusConfig {
        CorpusConfig {
            instruction: self.data.instruction.clone(),
            n_perturb: self.train.n_perturb,
            seed: self.data.perturb_seed,
        }
    }

    pub fn eval_config(&self, ks: Option<Vec<usize>>) -> EvalConfig {
        EvalConfig::new(
            self.data.instruction.clone(),
            ks.unwrap_or_else(|| self.eval.ks.clone()),
            self.eval.max_steps,
        )
    }

    /// Model config sized for `vocab_size` tokens.
    pub fn model_for(&self, vocab_size: usize) -> Result<ModelConfig> {
        let mut m = self.model.clone();
        if m.vocab_size == 0 {
            m.vocab_size = vocab_size;
        } else if m.vocab_size != vocab_size {
            return Err(Error::Config(format!(
                "model.vocab_size {} does not match the vocabulary ({vocab_size})",
                m.vocab_size
            )));
        }
        m.validate()?;
        Ok(m)
    }
}
