//! One TOML file holding every hyperparameter of an experiment. Every
//! section and key is optional; missing values take the defaults below.
//!
//! ```toml
//! seed = 7
//!
//! [phantom]
//! noise_sigma = 0.05
//!
//! [net]
//! base_channels = 16
//!
//! [snet.schedule]
//! epochs = 5
//!
//! [rnet.optimizer]
//! learning_rate = 1e-4
//! lr_scale = { dense = 0.01 }
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::DEFAULT_RESOLUTION_UM;
use crate::nets::NetConfig;
use crate::optim::OptimizerConfig;
use crate::phantom::PhantomConfig;
use crate::pipeline::infer::InferOptions;
use crate::pipeline::train::Schedule;
use crate::topology::DefectConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub schedule: Schedule,
}

impl TrainConfig {
    pub fn snet_default() -> Self {
        TrainConfig {
            optimizer: OptimizerConfig::adam(1e-3),
            schedule: Schedule { epochs: 5, ..Default::default() },
        }
    }

    /// The dense layer sees 147456 inputs per output, so it steps two orders
    /// of magnitude slower than the trunk.
    pub fn rnet_default() -> Self {
        TrainConfig {
            optimizer: OptimizerConfig {
                lr_scale: BTreeMap::from([("dense".to_string(), 0.01)]),
                ..OptimizerConfig::adam(1e-4)
            },
            schedule: Schedule { epochs: 2, ..Default::default() },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.schedule.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Depth resolution used to express errors in micrometres.
    pub resolution_um: f64,
    pub phantom: PhantomConfig,
    pub net: NetConfig,
    pub snet: TrainConfig,
    pub rnet: TrainConfig,
    pub defects: DefectConfig,
    pub infer: InferOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            resolution_um: DEFAULT_RESOLUTION_UM,
            phantom: PhantomConfig::default(),
            net: NetConfig::default(),
            snet: TrainConfig::snet_default(),
            rnet: TrainConfig::rnet_default(),
            defects: DefectConfig::default(),
            infer: InferOptions::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.resolution_um.is_finite() && self.resolution_um > 0.0) {
            return Err(Error::Config(format!("resolution_um must be positive, got {}", self.resolution_um)));
        }
        self.phantom.validate()?;
        self.net.validate()?;
        self.snet.validate()?;
        self.rnet.validate()?;
        self.defects.validate()?;
        if self.phantom.num_classes() != self.net.num_classes {
            return Err(Error::Config(format!(
                "phantoms have {} classes but the networks expect {}",
                self.phantom.num_classes(),
                self.net.num_classes
            )));
        }
        if self.infer.patch_count == 0 {
            return Err(Error::Config("infer.patch_count must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Config(m.replace('\n', " "));
        let given: toml::Table = toml::from_str(text).map_err(|e| bad(e.message()))?;
        let mut merged = toml::Table::try_from(ExperimentConfig::default()).expect("configuration serializes");
        merge(&mut merged, given);
        let cfg: ExperimentConfig = merged.try_into().map_err(|e: toml::de::Error| bad(e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(serde_json::to_string(self).expect("configuration serializes").as_bytes());
        hex::encode(&digest[..8])
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
