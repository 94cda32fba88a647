use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EnvironmentParams;
use crate::error::{Error, Result};
use crate::types::{ActionSpace, FixedDistributionPolicy};

pub const CONFIG_VERSION: u32 = 1;

const DEFAULT_CONFIG: &str = include_str!("../../configs/default_env.toml");

/// Logging policy of the simulated learning sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LoggingSpec {
    Uniform,
    Fixed { probabilities: Vec<f64> },
}

/// On-disk environment configuration (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub version: u32,
    #[serde(flatten)]
    pub params: EnvironmentParams,
    pub historical_actions: ActionSpace,
    #[serde(default)]
    pub evaluation_actions: Option<ActionSpace>,
    #[serde(default = "default_logging")]
    pub logging: LoggingSpec,
}

fn default_logging() -> LoggingSpec {
    LoggingSpec::Uniform
}

impl EnvConfig {
    /// The configuration shipped with the crate.
    pub fn default_config() -> Self {
        Self::from_toml_str(DEFAULT_CONFIG).expect("bundled config is valid")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.params.validate()?;
        self.logging_policy()?;
        Ok(())
    }

    pub fn evaluation(&self) -> ActionSpace {
        self.evaluation_actions
            .clone()
            .unwrap_or_else(|| self.historical_actions.clone())
    }

    pub fn logging_policy(&self) -> Result<FixedDistributionPolicy> {
        let d = self.historical_actions.len();
        match &self.logging {
            LoggingSpec::Uniform => Ok(FixedDistributionPolicy::uniform(d)),
            LoggingSpec::Fixed { probabilities } => {
                if probabilities.len() != d {
                    return Err(Error::DimensionMismatch {
                        context: "logging probabilities",
                        expected: d,
                        actual: probabilities.len(),
                    });
                }
                FixedDistributionPolicy::new(probabilities.clone())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_config_parses() {
        let cfg = EnvConfig::default_config();
        assert_eq!(cfg.historical_actions, ActionSpace::historical_default());
        assert!(cfg.params.higher_order);
        assert_eq!(cfg.logging, LoggingSpec::Uniform);
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = EnvConfig::default_config();
        cfg.evaluation_actions = Some(ActionSpace::extended_default());
        cfg.logging = LoggingSpec::Fixed {
            probabilities: vec![0.1, 0.2, 0.4, 0.2, 0.1],
        };
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(EnvConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_versions_and_params() {
        let text = EnvConfig::default_config().to_toml_string().unwrap();
        let bad = text.replace("version = 1", "version = 9");
        assert!(EnvConfig::from_toml_str(&bad).is_err());
        let bad = text.replace("lambda_loading = 0.05", "lambda_loading = -0.05");
        assert!(EnvConfig::from_toml_str(&bad).is_err());
    }
}
