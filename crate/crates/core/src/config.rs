//! Single JSON run configuration with per-module sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::align::{ConvConfig, GruConfig};
use crate::error::{Error, Result};
use crate::heads::HeadsConfig;
use crate::metrics::MetricsConfig;
use crate::model::{InputConfig, ModelConfig};
use crate::train::Hyperparams;
use crate::xadjust::XadjustConfig;

pub const SEED_ENV: &str = "SAFRLM_SEED";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";

/// `data.*` keys: dataset locations. Relative paths resolve against the
/// directory of the config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: InputConfig,
    pub conv: ConvConfig,
    pub gru: GruConfig,
    pub xadjust: XadjustConfig,
    pub heads: HeadsConfig,
    pub metrics: MetricsConfig,
    pub train: Hyperparams,
    pub data: DataPaths,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input: InputConfig::default(),
            conv: ConvConfig::default(),
            gru: GruConfig::default(),
            xadjust: XadjustConfig::default(),
            heads: HeadsConfig::default(),
            metrics: MetricsConfig::default(),
            train: Hyperparams::default(),
            data: DataPaths::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let base = std::path::absolute(dir).map_err(|e| Error::io(dir, e))?;
        cfg.resolve_relative(&base);
        Ok(cfg)
    }

    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.data.train, &mut self.data.validation, &mut self.data.test]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        fix(&mut self.output_dir);
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input: self.input.clone(),
            conv: self.conv.clone(),
            gru: self.gru.clone(),
            xadjust: self.xadjust.clone(),
            heads: self.heads.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train.validate()
    }

    /// Sets a dotted key such as `conv.kernel_text` from a JSON literal
    /// (bare words are taken as strings). Unknown keys are rejected.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self)?;
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key {key}")))?;
        }
        *slot = value;
        *self = serde_json::from_value(doc).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    /// Applies `SAFRLM_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.train.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
