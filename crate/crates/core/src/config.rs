//! Layered run configuration: built-in defaults, then a TOML file, then `AVEMO_` environment
//! variables, then command-line flags. The resolved value is fully explicit and hashed into
//! every output.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::preprocess::PreprocessConfig;
use crate::service::ServiceConfig;
use crate::training::StageConfig;
use crate::util::hash_json;

pub const ENV_PREFIX: &str = "AVEMO_";
pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfigs {
    pub stage0: StageConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
}

impl StageConfigs {
    pub fn get(&self, stage: u8) -> Result<&StageConfig> {
        match stage {
            0 => Ok(&self.stage0),
            1 => Ok(&self.stage1),
            2 => Ok(&self.stage2),
            3 => Ok(&self.stage3),
            s => Err(Error::Config(format!("unknown stage {s}"))),
        }
    }

    pub fn get_mut(&mut self, stage: u8) -> Result<&mut StageConfig> {
        match stage {
            0 => Ok(&mut self.stage0),
            1 => Ok(&mut self.stage1),
            2 => Ok(&mut self.stage2),
            3 => Ok(&mut self.stage3),
            s => Err(Error::Config(format!("unknown stage {s}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub version: u32,
    pub model: ModelConfig,
    pub preprocess: PreprocessConfig,
    pub stages: StageConfigs,
    pub eval: EvalConfig,
    pub service: ServiceConfig,
}

impl Default for RunConfig {
    /// Desk-scale defaults: the tiny model and stage settings that fit a laptop CPU.
    fn default() -> Self {
        let stage = |s: u8, steps: usize, lr: f64| {
            let mut c = StageConfig::for_stage(s);
            c.max_steps = steps;
            c.optimizer.peak_lr = lr;
            c
        };
        RunConfig {
            version: CONFIG_VERSION,
            model: ModelConfig::tiny(),
            preprocess: PreprocessConfig::default(),
            stages: StageConfigs {
                stage0: stage(0, 300, 3e-3),
                stage1: stage(1, 300, 2e-3),
                stage2: stage(2, 200, 2e-3),
                stage3: stage(3, 400, 3e-3),
            },
            eval: EvalConfig::default(),
            service: ServiceConfig::default(),
        }
    }
}

fn merge(base: &mut Value, overlay: Value, path: &str) -> Result<()> {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let p = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &p)?,
                    None => return Err(Error::Config(format!("unknown configuration key `{p}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

fn set_path(root: &mut Value, path: &[String], value: Value, name: &str) -> Result<()> {
    let mut cur = root;
    for key in path {
        cur = match cur {
            Value::Object(m) => m
                .get_mut(key)
                .ok_or_else(|| Error::Config(format!("`{name}` names no configuration key")))?,
            _ => return Err(Error::Config(format!("`{name}` names no configuration key"))),
        };
    }
    // Strings that do not parse as JSON stay strings; `null` clears optional values.
    *cur = value;
    Ok(())
}

fn env_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    /// Defaults overlaid with `file` (TOML) and the given environment pairs.
    pub fn resolve(file: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut value = serde_json::to_value(RunConfig::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            let parsed: toml::Value =
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut value, serde_json::to_value(parsed)?, "")?;
        }
        let mut vars: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        vars.sort();
        for (k, v) in vars {
            let path: Vec<String> = k[ENV_PREFIX.len()..].split("__").map(|s| s.to_lowercase()).collect();
            set_path(&mut value, &path, env_value(&v), &k)?;
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_process_env(file: Option<&Path>) -> Result<Self> {
        RunConfig::resolve(file, std::env::vars())
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("unsupported config version {}", self.version)));
        }
        self.model.validate()?;
        self.preprocess.validate()?;
        for s in 0..=3 {
            let c = self.stages.get(s)?;
            if c.stage != s {
                return Err(Error::Config(format!("stages.stage{s}.stage must be {s}")));
            }
            c.validate()?;
        }
        self.service.validate()
    }

    pub fn hash(&self) -> Result<String> {
        hash_json(self)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}
