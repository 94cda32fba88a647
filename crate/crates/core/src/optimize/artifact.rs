use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dsl::{DslModel, DslPathPoint};
use super::mlp::{MlpPolicy, TrainingLogRow};
use super::pto::{PremiumRule, PtoModel};
use super::ArgmaxPolicy;
use crate::error::{Error, Result};
use crate::types::{ActionSpace, DeterministicPolicy};

pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum PolicyModel {
    Dsl(DslModel),
    Nn(MlpPolicy),
    Pto { model: PtoModel, premium: PremiumRule },
}

/// Portable JSON description of a fitted policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyArtifact {
    pub version: u32,
    pub library_version: String,
    pub feature_names: Vec<String>,
    pub evaluation_actions: ActionSpace,
    pub seed: u64,
    pub model: PolicyModel,
}

impl PolicyArtifact {
    pub fn new(
        model: PolicyModel,
        feature_names: Vec<String>,
        evaluation_actions: ActionSpace,
        seed: u64,
    ) -> Self {
        Self {
            version: ARTIFACT_VERSION,
            library_version: env!("CARGO_PKG_VERSION").to_string(),
            feature_names,
            evaluation_actions,
            seed,
            model,
        }
    }

    pub fn method(&self) -> &'static str {
        match self.model {
            PolicyModel::Dsl(_) => "dsl",
            PolicyModel::Nn(_) => "nn",
            PolicyModel::Pto { .. } => "pto",
        }
    }

    /// The deployed deterministic policy.
    pub fn policy(&self) -> Box<dyn DeterministicPolicy> {
        match &self.model {
            PolicyModel::Dsl(m) => Box::new(m.policy()),
            PolicyModel::Nn(net) => Box::new(ArgmaxPolicy(net.clone())),
            PolicyModel::Pto { model, premium } => Box::new(super::pto::pto_policy(
                model,
                &self.evaluation_actions,
                *premium,
            )),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Parse(format!("serializing policy artifact: {e}")))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let artifact: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        if artifact.version != ARTIFACT_VERSION {
            return Err(Error::Config(format!(
                "unsupported artifact version {} (expected {ARTIFACT_VERSION})",
                artifact.version
            )));
        }
        Ok(artifact)
    }
}

/// Writes the per-epoch MLP log as CSV.
pub fn write_training_log(rows: &[TrainingLogRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the DSL tuning path as CSV.
pub fn write_dsl_path(rows: &[DslPathPoint], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
