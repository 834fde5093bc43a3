//! Run configuration: model, loss weights, optimizer, data and evaluation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use uovn_core::config::{LossWeights, ModelConfig};
use uovn_core::eval::Task;
use uovn_core::synth::DomainSpec;
use uovn_core::train::OptimConfig;

use crate::dataset::parse_json;
use crate::error::{read, Error, Result};

/// A stock domain by name (`"d1"`, `"d2"`, `"d3"`) or a full description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DomainChoice {
    Stock(String),
    Custom(DomainSpec),
}

impl DomainChoice {
    pub fn resolve(&self) -> Result<DomainSpec> {
        match self {
            DomainChoice::Custom(d) => Ok(d.clone()),
            DomainChoice::Stock(name) => match name.as_str() {
                "d1" => Ok(DomainSpec::d1()),
                "d2" => Ok(DomainSpec::d2()),
                "d3" => Ok(DomainSpec::d3()),
                other => Err(Error::Config(format!("unknown stock domain {other:?}"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Generated {
    pub domain: DomainChoice,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directories, relative to the config file.
    pub datasets: Vec<PathBuf>,
    /// Samples drawn from the generator at start-up.
    pub generate: Vec<Generated>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub data: DataConfig,
    /// Seed of the parameter initialization.
    pub init_seed: u64,
    pub checkpoint_every: usize,
    pub eval_tasks: Vec<Task>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
            data: DataConfig::default(),
            init_seed: 0,
            checkpoint_every: 100,
            eval_tasks: Task::ALL.to_vec(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: uovn_core::Error| Error::Config(e.to_string());
        self.model.validate().map_err(cfg)?;
        self.loss.validate().map_err(cfg)?;
        self.optim.validate().map_err(cfg)?;
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        if self.data.datasets.is_empty() && self.data.generate.is_empty() {
            return Err(Error::Config("data: no datasets and nothing to generate".into()));
        }
        for g in &self.data.generate {
            let d = g.domain.resolve()?;
            d.validate().map_err(cfg)?;
            if d.image_size % self.model.size_multiple() != 0 {
                return Err(Error::Config(format!(
                    "domain {} image size {} is not a multiple of {}",
                    d.id,
                    d.image_size,
                    self.model.size_multiple()
                )));
            }
            if g.samples == 0 {
                return Err(Error::Config(format!("domain {}: zero samples requested", d.id)));
            }
        }
        Ok(())
    }

    pub fn from_json(path: &Path, text: &str) -> Result<Self> {
        let c: Self = parse_json(path, text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = String::from_utf8(read(path)?).map_err(|_| Error::format(path, "not utf-8"))?;
        Self::from_json(path, &text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("config serializes"));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Config for the desk-scale overfit run: tiny model, D1 + D3.
    pub fn tiny_overfit() -> Self {
        Self {
            model: ModelConfig::tiny(),
            data: DataConfig {
                datasets: Vec::new(),
                generate: vec![
                    Generated { domain: DomainChoice::Stock("d1".into()), samples: 8, seed: 0 },
                    Generated { domain: DomainChoice::Stock("d3".into()), samples: 8, seed: 0 },
                ],
            },
            ..Self::default()
        }
    }
}
