use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::optimize::{DslConfig, MlpConfig, PtoOptions};
use crate::simenv::EnvConfig;

pub const EXPERIMENT_CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    RmseVsN,
    KernelScatter,
    Extrapolation,
    PolicyGap,
    EstimatorBias,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 5] = [
        ExperimentKind::RmseVsN,
        ExperimentKind::KernelScatter,
        ExperimentKind::Extrapolation,
        ExperimentKind::PolicyGap,
        ExperimentKind::EstimatorBias,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::RmseVsN => "rmse-vs-n",
            ExperimentKind::KernelScatter => "kernel-scatter",
            ExperimentKind::Extrapolation => "extrapolation",
            ExperimentKind::PolicyGap => "policy-gap",
            ExperimentKind::EstimatorBias => "estimator-bias",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment kind '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Paper,
}

/// Where the conditional moments of the variance-optimal kernel come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MomentSource {
    /// The simulator's exact conditional mean and variance.
    Oracle,
    /// Cross-fitted per-action means and variances within quantile bins of
    /// one observed feature column.
    Binned { feature: usize, bins: usize },
}

/// Which kernel the optimizers are trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainingKernel {
    Naive,
    Optimal,
}

/// Parameters of one experiment run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub kind: ExperimentKind,
    pub seed: u64,
    /// Replications per sample size, or learning samples for the policy
    /// experiments.
    pub replications: usize,
    pub sample_sizes: Vec<usize>,
    /// Environment config file; the bundled default when absent.
    #[serde(default)]
    pub env: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Include the higher-order elasticity term.
    #[serde(default = "default_true")]
    pub higher_order: bool,
    /// Policy experiments: also run the variant without the higher-order term.
    #[serde(default = "default_true")]
    pub ablation: bool,
    #[serde(default = "default_degree")]
    pub basis_degree: u32,
    #[serde(default)]
    pub ridge_jitter: bool,
    #[serde(default = "default_moments")]
    pub moments: MomentSource,
    /// Action of the constant target policy (rmse-vs-n, kernel-scatter).
    #[serde(default)]
    pub target_action: f64,
    /// Evaluation grid; extrapolation defaults to -0.30..0.30 by 0.01, the
    /// policy experiments to the historical grid.
    #[serde(default)]
    pub evaluation_actions: Option<Vec<f64>>,
    /// Size of the shared reference sample of the policy-gap experiment.
    #[serde(default = "default_reference")]
    pub reference_size: usize,
    #[serde(default = "default_training_kernel")]
    pub training_kernel: TrainingKernel,
    #[serde(default)]
    pub dsl: DslConfig,
    #[serde(default)]
    pub nn: MlpConfig,
    #[serde(default)]
    pub pto: PtoOptions,
    #[serde(default = "default_true")]
    pub plots: bool,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}
fn default_true() -> bool {
    true
}
fn default_degree() -> u32 {
    2
}
fn default_moments() -> MomentSource {
    MomentSource::Oracle
}
fn default_reference() -> usize {
    100_000
}
fn default_training_kernel() -> TrainingKernel {
    TrainingKernel::Naive
}

impl ExperimentConfig {
    /// Ready-to-run parameters for `kind` at the given scale.
    pub fn preset(kind: ExperimentKind, scale: Scale) -> Self {
        let desk = scale == Scale::Desk;
        let (replications, sample_sizes) = match kind {
            ExperimentKind::RmseVsN => {
                if desk {
                    (200, vec![2_000, 5_000, 10_000, 20_000, 50_000])
                } else {
                    (100, vec![10_000, 20_000, 50_000, 100_000, 200_000, 500_000, 1_000_000])
                }
            }
            ExperimentKind::KernelScatter => (100, vec![if desk { 50_000 } else { 1_000_000 }]),
            ExperimentKind::Extrapolation => (100, vec![if desk { 20_000 } else { 1_000_000 }]),
            ExperimentKind::PolicyGap | ExperimentKind::EstimatorBias => {
                if desk {
                    (10, vec![100_000])
                } else {
                    (20, vec![1_000_000])
                }
            }
        };
        Self {
            version: EXPERIMENT_CONFIG_VERSION,
            kind,
            seed: 20_260_101,
            replications,
            sample_sizes,
            env: None,
            output_dir: default_output_dir(),
            higher_order: true,
            ablation: true,
            basis_degree: 2,
            ridge_jitter: false,
            moments: MomentSource::Oracle,
            target_action: 0.0,
            evaluation_actions: None,
            reference_size: if desk { 100_000 } else { 1_000_000 },
            training_kernel: TrainingKernel::Naive,
            dsl: DslConfig::default(),
            nn: MlpConfig::default(),
            pto: PtoOptions::default(),
            plots: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != EXPERIMENT_CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported experiment config version {} (expected {EXPERIMENT_CONFIG_VERSION})",
                self.version
            )));
        }
        if self.replications < 1 {
            return Err(Error::Config("replications must be >= 1".into()));
        }
        if self.sample_sizes.is_empty() || self.sample_sizes.iter().any(|&n| n < 10) {
            return Err(Error::Config("sample sizes must be non-empty and >= 10".into()));
        }
        if self.reference_size < 10 {
            return Err(Error::Config("reference size must be >= 10".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        // relative environment paths are relative to the config file
        if let (Some(env), Some(dir)) = (&cfg.env, path.parent()) {
            if env.is_relative() {
                cfg.env = Some(dir.join(env));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serializing config: {e}")))
    }

    /// Loads the referenced environment (or the bundled default) and applies
    /// the higher-order flag.
    pub fn environment(&self) -> Result<EnvConfig> {
        let mut env = match &self.env {
            Some(p) => EnvConfig::load(p)?,
            None => EnvConfig::default_config(),
        };
        env.params.higher_order = self.higher_order;
        Ok(env)
    }

    /// The config with where-to-write details cleared, so that identical runs
    /// into different directories describe themselves identically.
    pub fn canonical(&self) -> Self {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c
    }

    /// SHA-256 over the canonical JSON form of this config and the resolved
    /// environment. The output directory does not count.
    pub fn hash(&self, env: &EnvConfig) -> Result<String> {
        let cfg = serde_json::to_string(&self.canonical())
            .map_err(|e| Error::Config(format!("hashing config: {e}")))?;
        let env = serde_json::to_string(env)
            .map_err(|e| Error::Config(format!("hashing environment: {e}")))?;
        let mut h = Sha256::new();
        h.update(cfg.as_bytes());
        h.update([0u8]);
        h.update(env.as_bytes());
        Ok(hex::encode(h.finalize()))
    }
}
