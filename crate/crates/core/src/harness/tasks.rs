//! Single-dataset tasks behind the `evaluate`, `kernel` and `optimize`
//! subcommands.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::{MomentSource, TrainingKernel};
use super::experiments::oracle_moments;
use crate::error::{Error, Result};
use crate::estimators::{
    dm_value, estimator_diagnostics, ips_value, kips_value, Diagnostics, EstimatorTag,
};
use crate::kernel::{
    build_design, BasisSpec, BinnedMoments, DesignMatrixPair, KernelSet, MomentProvider,
    OptimalKernelOptions,
};
use crate::optimize::artifact::{write_dsl_path, write_training_log};
use crate::optimize::{
    fit_pto, pto_policy, train_dsl, train_mlp_policy, DslConfig, MlpConfig, PolicyArtifact,
    PolicyModel, PremiumRule, PtoOptions,
};
use crate::seeding::{derive_seed, label};
use crate::simenv::{observed_feature_names, EnvConfig, Simulation};
use crate::types::{ActionSpace, DeterministicPolicy, Policy};

pub const OPTIMIZE_CONFIG_VERSION: u32 = 1;

/// Hyperparameters of the `optimize` subcommand (TOML).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeConfig {
    pub version: u32,
    #[serde(default = "default_training_kernel")]
    pub training_kernel: TrainingKernel,
    #[serde(default = "default_degree")]
    pub basis_degree: u32,
    #[serde(default)]
    pub ridge_jitter: bool,
    #[serde(default = "default_moments")]
    pub moments: MomentSource,
    #[serde(default)]
    pub dsl: DslConfig,
    #[serde(default)]
    pub nn: MlpConfig,
    #[serde(default)]
    pub pto: PtoOptions,
}

fn default_training_kernel() -> TrainingKernel {
    TrainingKernel::Naive
}
fn default_degree() -> u32 {
    2
}
fn default_moments() -> MomentSource {
    MomentSource::Binned { feature: 0, bins: 10 }
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            version: OPTIMIZE_CONFIG_VERSION,
            training_kernel: default_training_kernel(),
            basis_degree: default_degree(),
            ridge_jitter: false,
            moments: default_moments(),
            dsl: DslConfig::default(),
            nn: MlpConfig::default(),
            pto: PtoOptions::default(),
        }
    }
}

impl OptimizeConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("optimize config: {e}")))?;
        if cfg.version != OPTIMIZE_CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported optimize config version {} (expected {OPTIMIZE_CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml_str(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Dsl,
    Nn,
    Pto,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dsl" => Ok(Method::Dsl),
            "nn" => Ok(Method::Nn),
            "pto" => Ok(Method::Pto),
            _ => Err(Error::Config(format!("unknown method '{s}' (dsl, nn, pto)"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Dsl => "dsl",
            Method::Nn => "nn",
            Method::Pto => "pto",
        })
    }
}

/// Moment source for the variance-optimal kernel of a dataset. Oracle
/// moments need the environment that generated the data.
pub fn moments_for(
    source: &MomentSource,
    sim: &Simulation,
    env: &EnvConfig,
) -> Result<Box<dyn MomentProvider>> {
    Ok(match source {
        MomentSource::Oracle => Box::new(oracle_moments(&sim.truths(&env.params), &sim.historical)?),
        MomentSource::Binned { feature, bins } => {
            Box::new(BinnedMoments::fit(&sim.sample, *feature, *bins)?)
        }
    })
}

/// Kernel settings shared by `evaluate`, `kernel` and `optimize`.
#[derive(Clone, Debug)]
pub struct KernelSettings {
    pub basis: BasisSpec,
    pub moments: MomentSource,
    pub ridge_jitter: bool,
}

impl KernelSettings {
    pub fn designs(&self, sim: &Simulation, evaluation: &ActionSpace) -> Result<DesignMatrixPair> {
        build_design(&self.basis, &sim.historical, evaluation)
    }

    pub fn kernels(
        &self,
        kind: TrainingKernel,
        sim: &Simulation,
        env: &EnvConfig,
        evaluation: &ActionSpace,
    ) -> Result<KernelSet> {
        let designs = self.designs(sim, evaluation)?;
        match kind {
            TrainingKernel::Naive => KernelSet::naive(&sim.sample, &designs),
            TrainingKernel::Optimal => {
                let provider = moments_for(&self.moments, sim, env)?;
                KernelSet::optimal(
                    &sim.sample,
                    &designs,
                    provider.as_ref(),
                    OptimalKernelOptions {
                        ridge_jitter: self.ridge_jitter,
                    },
                )
            }
        }
    }
}

/// A fitted policy plus its training record.
pub struct FitOutput {
    pub artifact: PolicyArtifact,
    pub log: TrainingLog,
}

pub enum TrainingLog {
    Nn(Vec<crate::optimize::mlp::TrainingLogRow>),
    Dsl(Vec<crate::optimize::dsl::DslPathPoint>),
    Pto(Vec<CoefficientRow>),
}

/// One PTO coefficient with its asymptotic standard error.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoefficientRow {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
}

impl TrainingLog {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        match self {
            TrainingLog::Nn(rows) => write_training_log(rows, path),
            TrainingLog::Dsl(rows) => write_dsl_path(rows, path),
            TrainingLog::Pto(rows) => {
                let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
                for r in rows {
                    w.serialize(r).map_err(|e| Error::csv(path, e))?;
                }
                w.flush().map_err(|e| Error::io(path, e))
            }
        }
    }
}

fn coefficient_names(features: &[String]) -> Vec<String> {
    let mut names = vec!["intercept".to_string(), "a".into(), "a^2".into()];
    names.extend(features.iter().cloned());
    names.extend(features.iter().map(|f| format!("a*{f}")));
    names
}

/// Fits one method on `sim`, scoring actions on `evaluation`.
pub fn fit_method(
    method: Method,
    sim: &Simulation,
    env: &EnvConfig,
    cfg: &OptimizeConfig,
    evaluation: &ActionSpace,
    seed: u64,
) -> Result<FitOutput> {
    let features = observed_feature_names();
    let settings = KernelSettings {
        basis: BasisSpec::polynomial(cfg.basis_degree),
        moments: cfg.moments.clone(),
        ridge_jitter: cfg.ridge_jitter,
    };
    let (model, log) = match method {
        Method::Dsl => {
            let ks = settings.kernels(cfg.training_kernel, sim, env, evaluation)?;
            let t = train_dsl(&sim.sample, &ks, &cfg.dsl, derive_seed(seed, &[label("dsl")]))?;
            (PolicyModel::Dsl(t.model), TrainingLog::Dsl(t.path))
        }
        Method::Nn => {
            let ks = settings.kernels(cfg.training_kernel, sim, env, evaluation)?;
            let t = train_mlp_policy(&sim.sample, &ks, &cfg.nn, derive_seed(seed, &[label("nn")]))?;
            log::info!(
                "selected restart {} epoch {} (held-out value {})",
                t.best_restart,
                t.best_epoch,
                t.best_value
            );
            (PolicyModel::Nn(t.policy), TrainingLog::Nn(t.log))
        }
        Method::Pto => {
            let model = fit_pto(&sim.sample, &cfg.pto)?;
            let rows = coefficient_names(&features)
                .into_iter()
                .zip(model.coefficients().into_iter().zip(model.std_errors.iter().copied()))
                .map(|(name, (estimate, std_error))| CoefficientRow {
                    name,
                    estimate,
                    std_error,
                })
                .collect();
            (
                PolicyModel::Pto {
                    model,
                    premium: PremiumRule::from_params(&env.params),
                },
                TrainingLog::Pto(rows),
            )
        }
    };
    Ok(FitOutput {
        artifact: PolicyArtifact::new(model, features, evaluation.clone(), seed),
        log,
    })
}

/// One estimator applied to one policy.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvaluationRow {
    pub estimator: String,
    pub value: f64,
    pub std_error: f64,
    /// Exact empirical value from the dataset's true-reward columns.
    pub truth: f64,
    pub n: usize,
    pub weight_mean: Option<f64>,
    pub weight_max: Option<f64>,
    pub effective_sample_size: Option<f64>,
    pub max_abs_kernel_entry: Option<f64>,
    pub max_gram_condition: Option<f64>,
}

impl EvaluationRow {
    fn new(tag: &str, value: f64, std_error: f64, truth: f64, n: usize, diag: Option<Diagnostics>) -> Self {
        Self {
            estimator: tag.to_string(),
            value,
            std_error,
            truth,
            n,
            weight_mean: diag.as_ref().map(|d| d.weight_mean),
            weight_max: diag.as_ref().map(|d| d.weight_max),
            effective_sample_size: diag.as_ref().map(|d| d.effective_sample_size),
            max_abs_kernel_entry: diag.as_ref().and_then(|d| d.max_abs_kernel_entry),
            max_gram_condition: diag.as_ref().and_then(|d| d.max_gram_condition),
        }
    }
}

/// Scores a deterministic policy on `evaluation` with the requested
/// estimators. DM uses a PTO conversion model fitted on the same data.
pub fn evaluate_policy(
    sim: &Simulation,
    env: &EnvConfig,
    policy: &dyn DeterministicPolicy,
    evaluation: &ActionSpace,
    estimators: &[EstimatorTag],
    settings: &KernelSettings,
    pto: &PtoOptions,
) -> Result<Vec<EvaluationRow>> {
    if evaluation != &sim.evaluation {
        return Err(Error::ActionSpaceMismatch(format!(
            "policy grid {evaluation} differs from the dataset's true-reward grid {}",
            sim.evaluation
        )));
    }
    let truth = crate::types::empirical_value(
        &sim.true_reward_matrix(),
        Policy::Deterministic(policy),
        &sim.sample.features(),
    )?;
    let n = sim.sample.len();
    let p = Policy::Deterministic(policy);
    let mut rows = Vec::new();
    for tag in estimators {
        let row = match tag {
            EstimatorTag::Dm => {
                let model = fit_pto(&sim.sample, pto)?;
                let reward = pto_policy(&model, evaluation, PremiumRule::from_params(&env.params)).reward;
                let e = dm_value(&sim.sample, &reward, p, evaluation)?;
                EvaluationRow::new(tag.as_str(), e.value, e.std_error(), truth, n, None)
            }
            EstimatorTag::Ips => {
                let e = ips_value(&sim.sample, p, evaluation)?;
                let d = estimator_diagnostics(&sim.sample, p, None)?;
                EvaluationRow::new(tag.as_str(), e.value, e.std_error(), truth, n, Some(d))
            }
            EstimatorTag::KipsNaive | EstimatorTag::KipsOptimal => {
                let kind = if *tag == EstimatorTag::KipsNaive {
                    TrainingKernel::Naive
                } else {
                    TrainingKernel::Optimal
                };
                let ks = settings.kernels(kind, sim, env, evaluation)?;
                let e = kips_value(&sim.sample, p, &ks)?;
                let d = estimator_diagnostics(&sim.sample, p, Some(&ks))?;
                EvaluationRow::new(tag.as_str(), e.value, e.std_error(), truth, n, Some(d))
            }
        };
        rows.push(row);
    }
    Ok(rows)
}

/// One kernel entry of the `kernel` dump.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KernelEntryRow {
    pub record: usize,
    pub historical_index: usize,
    pub evaluation_index: usize,
    pub historical_action: f64,
    pub evaluation_action: f64,
    pub entry: f64,
}

/// Long-format kernel entries of the first `limit` records.
pub fn kernel_dump(ks: &KernelSet, sim: &Simulation, evaluation: &ActionSpace, limit: usize) -> Vec<KernelEntryRow> {
    let mut rows = Vec::new();
    for i in 0..ks.len().min(limit) {
        let k = ks.get(i);
        let (d, m) = k.shape();
        for h in 0..d {
            for e in 0..m {
                rows.push(KernelEntryRow {
                    record: i,
                    historical_index: h,
                    evaluation_index: e,
                    historical_action: sim.historical.level(h),
                    evaluation_action: evaluation.level(e),
                    entry: k.entry(h, e),
                });
            }
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simenv::simulate;

    fn small_sim(env: &EnvConfig, n: usize) -> Simulation {
        let hist = env.historical_actions.clone();
        simulate(&env.params, n, &env.logging_policy().unwrap(), &hist, &hist).unwrap()
    }

    #[test]
    fn optimize_config_defaults_and_version() {
        let cfg = OptimizeConfig::from_toml_str("version = 1\n[nn]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.nn.epochs, 3);
        assert_eq!(cfg.nn.restarts, MlpConfig::default().restarts);
        assert!(OptimizeConfig::from_toml_str("version = 9\n").is_err());
        assert!(OptimizeConfig::from_toml_str("version = 1\nbogus = 2\n").is_err());
    }

    #[test]
    fn evaluation_rows_carry_truth() {
        let env = EnvConfig::default_config();
        let sim = small_sim(&env, 3_000);
        let policy = crate::types::ConstantPolicy::new(2, 5).unwrap();
        let settings = KernelSettings {
            basis: BasisSpec::quadratic(),
            moments: MomentSource::Oracle,
            ridge_jitter: false,
        };
        let rows = evaluate_policy(
            &sim,
            &env,
            &policy,
            &sim.evaluation.clone(),
            &EstimatorTag::ALL,
            &settings,
            &PtoOptions::default(),
        )
        .unwrap();
        assert_eq!(rows.len(), 4);
        let truth = rows[0].truth;
        for r in &rows {
            assert_eq!(r.truth, truth);
            assert!((r.value - truth).abs() < 8.0 * r.std_error.max(1e-3), "{r:?}");
        }
    }

    #[test]
    fn pto_fit_writes_named_coefficients() {
        let env = EnvConfig::default_config();
        let sim = small_sim(&env, 4_000);
        let out = fit_method(Method::Pto, &sim, &env, &OptimizeConfig::default(), &sim.evaluation.clone(), 1)
            .unwrap();
        let TrainingLog::Pto(rows) = &out.log else { panic!("expected coefficients") };
        assert_eq!(rows.len(), 3 + 2 * sim.sample.feature_dim());
        assert_eq!(rows[0].name, "intercept");
        assert_eq!(out.artifact.method(), "pto");
    }
}
