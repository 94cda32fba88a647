use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ExperimentKind, MomentSource, TrainingKernel};
use crate::error::{Error, Result};
use crate::estimators::{dm_value, ips_value, kips_value, OracleRewardModel};
use crate::kernel::{
    build_design, BasisSpec, BinnedMoments, ConditionalMoments, DesignMatrixPair, KernelSet,
    MomentProvider, OptimalKernelOptions, TabulatedMoments,
};
use crate::numeric;
use crate::optimize::{
    fit_pto, oracle_policy, pto_policy, train_dsl, train_mlp_policy, ArgmaxPolicy, PremiumRule,
    PtoPolicy,
};
use crate::seeding::{derive_seed, label};
use crate::simenv::{simulate, CustomerTruth, EnvConfig, EnvironmentParams, Simulation};
use crate::types::{
    ActionSpace, ConstantPolicy, DeterministicPolicy, FixedDistributionPolicy, Policy,
};

/// One line of the long-format result table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    /// `hx` with the higher-order elasticity term, `no-hx` without.
    pub variant: String,
    pub replication: usize,
    pub n: usize,
    /// Estimator tag, or learning method for policy-gap rows.
    pub method: String,
    /// Target policy: an action level for constant policies, a method name
    /// for learned ones.
    pub target: String,
    pub target_index: usize,
    pub estimate: f64,
    pub truth: f64,
    pub error: f64,
    pub relative_error: f64,
}

impl ResultRow {
    #[allow(clippy::too_many_arguments)]
    fn new(
        kind: ExperimentKind,
        variant: &str,
        replication: usize,
        n: usize,
        method: &str,
        target: String,
        target_index: usize,
        estimate: f64,
        truth: f64,
    ) -> Self {
        let error = estimate - truth;
        Self {
            experiment: kind.to_string(),
            variant: variant.to_string(),
            replication,
            n,
            method: method.to_string(),
            target,
            target_index,
            estimate,
            truth,
            error,
            relative_error: if truth != 0.0 { error / truth.abs() } else { f64::NAN },
        }
    }

    fn sort_key(&self) -> (&str, &str, usize, &str, usize, &str, usize) {
        (
            &self.experiment,
            &self.variant,
            self.n,
            &self.method,
            self.target_index,
            &self.target,
            self.replication,
        )
    }
}

/// Rows of one experiment plus what produced them.
#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub kind: ExperimentKind,
    pub config: ExperimentConfig,
    pub env: EnvConfig,
    pub config_hash: String,
    pub rows: Vec<ResultRow>,
}

impl ExperimentResult {
    fn new(kind: ExperimentKind, config: &ExperimentConfig, env: &EnvConfig, mut rows: Vec<ResultRow>) -> Result<Self> {
        rows.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        let mut config = config.clone();
        config.kind = kind;
        Ok(Self {
            kind,
            config_hash: config.hash(env)?,
            config,
            env: env.clone(),
            rows,
        })
    }

    /// Rows matching `(variant, n, method, target)`, any replication.
    pub fn select<'a>(
        &'a self,
        variant: Option<&'a str>,
        n: Option<usize>,
        method: &'a str,
        target: Option<&'a str>,
    ) -> impl Iterator<Item = &'a ResultRow> + 'a {
        self.rows.iter().filter(move |r| {
            variant.map_or(true, |v| r.variant == v)
                && n.map_or(true, |n| r.n == n)
                && r.method == method
                && target.map_or(true, |t| r.target == t)
        })
    }
}

pub fn action_label(level: f64) -> String {
    format!("{level:+.2}")
}

fn variant_name(higher_order: bool) -> &'static str {
    if higher_order {
        "hx"
    } else {
        "no-hx"
    }
}

/// Everything fixed across replications of one environment setting.
struct Setting {
    params: EnvironmentParams,
    historical: ActionSpace,
    logging: FixedDistributionPolicy,
    basis: BasisSpec,
    variant: &'static str,
}

impl Setting {
    fn new(env: &EnvConfig, cfg: &ExperimentConfig, higher_order: bool) -> Result<Self> {
        Ok(Self {
            params: env.params.with_higher_order(higher_order),
            historical: env.historical_actions.clone(),
            logging: env.logging_policy()?,
            basis: BasisSpec::polynomial(cfg.basis_degree),
            variant: variant_name(higher_order),
        })
    }

    fn simulate(&self, seed: u64, n: usize, evaluation: &ActionSpace) -> Result<Simulation> {
        simulate(&self.params.with_seed(seed), n, &self.logging, &self.historical, evaluation)
    }

    fn designs(&self, evaluation: &ActionSpace) -> Result<DesignMatrixPair> {
        build_design(&self.basis, &self.historical, evaluation)
    }
}

/// Exact conditional reward moments of every record on the historical grid.
pub fn oracle_moments(truths: &[CustomerTruth], historical: &ActionSpace) -> Result<TabulatedMoments> {
    let rows = truths
        .iter()
        .map(|t| {
            let mu = historical.levels().iter().map(|&a| t.expected_reward(a)).collect();
            let s2 = historical.levels().iter().map(|&a| t.reward_variance(a)).collect();
            ConditionalMoments::new(mu, s2)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TabulatedMoments::new(rows))
}

fn moment_provider(
    cfg: &ExperimentConfig,
    sim: &Simulation,
    params: &EnvironmentParams,
) -> Result<Box<dyn MomentProvider>> {
    Ok(match cfg.moments {
        MomentSource::Oracle => Box::new(oracle_moments(&sim.truths(params), &sim.historical)?),
        MomentSource::Binned { feature, bins } => {
            Box::new(BinnedMoments::fit(&sim.sample, feature, bins)?)
        }
    })
}

fn optimal_kernels(
    cfg: &ExperimentConfig,
    setting: &Setting,
    sim: &Simulation,
    designs: &DesignMatrixPair,
) -> Result<KernelSet> {
    let provider = moment_provider(cfg, sim, &setting.params)?;
    KernelSet::optimal(
        &sim.sample,
        designs,
        provider.as_ref(),
        OptimalKernelOptions {
            ridge_jitter: cfg.ridge_jitter,
        },
    )
}

/// Mean true reward of a deterministic policy over the simulated records.
fn policy_truth(sim: &Simulation, policy: &dyn DeterministicPolicy) -> f64 {
    let v: Vec<f64> = sim
        .records
        .iter()
        .map(|r| r.true_expected_rewards[policy.action(&r.encoded_observed)])
        .collect();
    numeric::mean(&v)
}

fn constant_truth(sim: &Simulation, action: usize) -> f64 {
    let v: Vec<f64> = sim.records.iter().map(|r| r.true_expected_rewards[action]).collect();
    numeric::mean(&v)
}

fn replication_grid(cfg: &ExperimentConfig) -> Vec<(usize, usize)> {
    cfg.sample_sizes
        .iter()
        .flat_map(|&n| (0..cfg.replications).map(move |r| (n, r)))
        .collect()
}

fn target_index(cfg: &ExperimentConfig, grid: &ActionSpace) -> Result<usize> {
    grid.index_of(cfg.target_action, 1e-9).ok_or_else(|| {
        Error::ActionSpaceMismatch(format!(
            "target action {} is not on the grid {grid}",
            cfg.target_action
        ))
    })
}

/// Error of DM, IPS and both kernelized IPS variants for a constant target
/// policy, against its exact value on each simulated sample.
pub fn run_rmse_vs_n(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let kind = ExperimentKind::RmseVsN;
    let env = cfg.environment()?;
    let setting = Setting::new(&env, cfg, cfg.higher_order)?;
    let hist = setting.historical.clone();
    let designs = setting.designs(&hist)?;
    let j = target_index(cfg, &hist)?;
    let policy = ConstantPolicy::new(j, hist.len())?;
    let target = action_label(hist.level(j));
    let premium = PremiumRule::from_params(&setting.params);

    let rows = replication_grid(cfg)
        .into_par_iter()
        .map(|(n, rep)| {
            log::debug!("{kind}: n={n} rep={rep}");
            let seed = derive_seed(cfg.seed, &[label(kind.as_str()), n as u64, rep as u64]);
            let sim = setting.simulate(seed, n, &hist)?;
            let truth = constant_truth(&sim, j);
            let p = Policy::Deterministic(&policy);

            let pto = fit_pto(&sim.sample, &cfg.pto)?;
            let dm_model = pto_policy(&pto, &hist, premium).reward;
            let naive = KernelSet::naive(&sim.sample, &designs)?;
            let optimal = optimal_kernels(cfg, &setting, &sim, &designs)?;
            let estimates = [
                dm_value(&sim.sample, &dm_model, p, &hist)?,
                ips_value(&sim.sample, p, &hist)?,
                kips_value(&sim.sample, p, &naive)?,
                kips_value(&sim.sample, p, &optimal)?,
            ];
            Ok(estimates
                .iter()
                .map(|e| {
                    ResultRow::new(kind, setting.variant, rep, n, e.tag.as_str(), target.clone(), j, e.value, truth)
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    ExperimentResult::new(kind, cfg, &env, rows.into_iter().flatten().collect())
}

/// Paired naive and variance-optimal kernelized IPS estimates of a constant
/// policy.
pub fn run_kernel_scatter(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let kind = ExperimentKind::KernelScatter;
    let env = cfg.environment()?;
    let setting = Setting::new(&env, cfg, cfg.higher_order)?;
    let hist = setting.historical.clone();
    let designs = setting.designs(&hist)?;
    let j = target_index(cfg, &hist)?;
    let policy = ConstantPolicy::new(j, hist.len())?;
    let target = action_label(hist.level(j));

    let rows = replication_grid(cfg)
        .into_par_iter()
        .map(|(n, rep)| {
            log::debug!("{kind}: n={n} rep={rep}");
            let seed = derive_seed(cfg.seed, &[label(kind.as_str()), n as u64, rep as u64]);
            let sim = setting.simulate(seed, n, &hist)?;
            let truth = constant_truth(&sim, j);
            let p = Policy::Deterministic(&policy);
            let naive = kips_value(&sim.sample, p, &KernelSet::naive(&sim.sample, &designs)?)?;
            let optimal = kips_value(&sim.sample, p, &optimal_kernels(cfg, &setting, &sim, &designs)?)?;
            Ok([naive, optimal]
                .iter()
                .map(|e| {
                    ResultRow::new(kind, setting.variant, rep, n, e.tag.as_str(), target.clone(), j, e.value, truth)
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    ExperimentResult::new(kind, cfg, &env, rows.into_iter().flatten().collect())
}

/// Evaluation grid of the extrapolation study.
pub fn extrapolation_grid(cfg: &ExperimentConfig) -> Result<ActionSpace> {
    match &cfg.evaluation_actions {
        Some(levels) => ActionSpace::new(levels.clone()),
        None => Ok(ActionSpace::extended_default()),
    }
}

/// Kernelized IPS for every constant policy on a grid that extends past the
/// logged actions.
pub fn run_extrapolation(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let kind = ExperimentKind::Extrapolation;
    let env = cfg.environment()?;
    let setting = Setting::new(&env, cfg, cfg.higher_order)?;
    let grid = extrapolation_grid(cfg)?;
    let designs = setting.designs(&grid)?;
    let m = grid.len();

    let rows = replication_grid(cfg)
        .into_par_iter()
        .map(|(n, rep)| {
            log::debug!("{kind}: n={n} rep={rep}");
            let seed = derive_seed(cfg.seed, &[label(kind.as_str()), n as u64, rep as u64]);
            let sim = setting.simulate(seed, n, &grid)?;
            let kernel_sets = [
                KernelSet::naive(&sim.sample, &designs)?,
                optimal_kernels(cfg, &setting, &sim, &designs)?,
            ];
            let mut rows = Vec::with_capacity(2 * m);
            for j in 0..m {
                let policy = ConstantPolicy::new(j, m)?;
                let truth = constant_truth(&sim, j);
                for ks in &kernel_sets {
                    let e = kips_value(&sim.sample, Policy::Deterministic(&policy), ks)?;
                    rows.push(ResultRow::new(
                        kind,
                        setting.variant,
                        rep,
                        n,
                        e.tag.as_str(),
                        action_label(grid.level(j)),
                        j,
                        e.value,
                        truth,
                    ));
                }
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    ExperimentResult::new(kind, cfg, &env, rows.into_iter().flatten().collect())
}

/// Both halves of the learned-policy study, which share the fitted policies.
#[derive(Clone, Debug)]
pub struct PolicyStudy {
    pub gap: ExperimentResult,
    pub bias: ExperimentResult,
}

pub const METHOD_DSL: &str = "DSL";
pub const METHOD_NN: &str = "NN";
pub const METHOD_PTO: &str = "PTO";
pub const DM_ORACLE: &str = "DM-oracle";

fn policy_grid(cfg: &ExperimentConfig, historical: &ActionSpace) -> Result<ActionSpace> {
    match &cfg.evaluation_actions {
        Some(levels) => ActionSpace::new(levels.clone()),
        None => Ok(historical.clone()),
    }
}

struct LearnedPolicies {
    dsl: Box<dyn DeterministicPolicy>,
    nn: Box<dyn DeterministicPolicy>,
    pto: PtoPolicy,
}

impl LearnedPolicies {
    fn named(&self) -> [(&'static str, usize, &dyn DeterministicPolicy); 3] {
        [
            (METHOD_DSL, 0, self.dsl.as_ref()),
            (METHOD_NN, 1, self.nn.as_ref()),
            (METHOD_PTO, 2, &self.pto),
        ]
    }
}

fn fit_policies(
    cfg: &ExperimentConfig,
    setting: &Setting,
    sim: &Simulation,
    grid: &ActionSpace,
    seed: u64,
) -> Result<LearnedPolicies> {
    let designs = setting.designs(grid)?;
    let kernels = match cfg.training_kernel {
        TrainingKernel::Naive => KernelSet::naive(&sim.sample, &designs)?,
        TrainingKernel::Optimal => optimal_kernels(cfg, setting, sim, &designs)?,
    };
    let dsl = train_dsl(&sim.sample, &kernels, &cfg.dsl, derive_seed(seed, &[label("dsl")]))?;
    log::debug!("DSL tau={} sweeps={}", dsl.model.tau, dsl.model.sweeps);
    let nn = train_mlp_policy(&sim.sample, &kernels, &cfg.nn, derive_seed(seed, &[label("nn")]))?;
    log::debug!("NN best restart={} epoch={}", nn.best_restart, nn.best_epoch);
    let pto = fit_pto(&sim.sample, &cfg.pto)?;
    Ok(LearnedPolicies {
        dsl: Box::new(dsl.model.policy()),
        nn: Box::new(ArgmaxPolicy(nn.policy)),
        pto: pto_policy(&pto, grid, PremiumRule::from_params(&setting.params)),
    })
}

fn study_variants(cfg: &ExperimentConfig) -> Vec<bool> {
    if cfg.higher_order && cfg.ablation {
        vec![true, false]
    } else {
        vec![cfg.higher_order]
    }
}

/// Fits DSL, NN and PTO on each learning sample, then scores them two ways:
/// relative gap to the oracle policy on a shared reference sample, and the
/// bias of DM and kernelized IPS estimates on a fresh sample.
pub fn run_policy_study(cfg: &ExperimentConfig) -> Result<PolicyStudy> {
    cfg.validate()?;
    let env = cfg.environment()?;
    let mut gap_rows = Vec::new();
    let mut bias_rows = Vec::new();
    for higher_order in study_variants(cfg) {
        let setting = Setting::new(&env, cfg, higher_order)?;
        let grid = policy_grid(cfg, &setting.historical)?;
        let eval_designs = setting.designs(&grid)?;
        let vlabel = label(setting.variant);
        let reference = setting.simulate(
            derive_seed(cfg.seed, &[label("reference"), vlabel]),
            cfg.reference_size,
            &grid,
        )?;
        let oracle_value = oracle_policy(&reference.records)?.value;
        log::info!("{}: reference oracle value {oracle_value}", setting.variant);

        for &n in &cfg.sample_sizes {
            let per_sample = (0..cfg.replications)
                .into_par_iter()
                .map(|s| {
                    let seed = derive_seed(cfg.seed, &[label("learning"), vlabel, n as u64, s as u64]);
                    let sim = setting.simulate(seed, n, &setting.historical)?;
                    let learned = fit_policies(cfg, &setting, &sim, &grid, seed)?;
                    drop(sim);
                    log::info!("{}: n={n} sample {s} fitted", setting.variant);

                    let mut gaps = Vec::new();
                    for (name, idx, p) in learned.named() {
                        let v = policy_truth(&reference, p);
                        gaps.push(ResultRow::new(
                            ExperimentKind::PolicyGap,
                            setting.variant,
                            s,
                            n,
                            name,
                            name.to_string(),
                            idx,
                            v,
                            oracle_value,
                        ));
                    }

                    let eval_seed = derive_seed(cfg.seed, &[label("bias-eval"), vlabel, n as u64, s as u64]);
                    let fresh = setting.simulate(eval_seed, n, &grid)?;
                    let naive = KernelSet::naive(&fresh.sample, &eval_designs)?;
                    let optimal = optimal_kernels(cfg, &setting, &fresh, &eval_designs)?;
                    let oracle_model = OracleRewardModel::new(fresh.truths(&setting.params));
                    let mut bias = Vec::new();
                    for (name, idx, p) in learned.named() {
                        let truth = policy_truth(&fresh, p);
                        let pol = Policy::Deterministic(p);
                        let dm = dm_value(&fresh.sample, &learned.pto.reward, pol, &grid)?;
                        let dm_oracle = dm_value(&fresh.sample, &oracle_model, pol, &grid)?;
                        let kn = kips_value(&fresh.sample, pol, &naive)?;
                        let ko = kips_value(&fresh.sample, pol, &optimal)?;
                        let estimates = [
                            (dm.tag.as_str(), dm.value),
                            (DM_ORACLE, dm_oracle.value),
                            (kn.tag.as_str(), kn.value),
                            (ko.tag.as_str(), ko.value),
                        ];
                        for (method, value) in estimates {
                            bias.push(ResultRow::new(
                                ExperimentKind::EstimatorBias,
                                setting.variant,
                                s,
                                n,
                                method,
                                name.to_string(),
                                idx,
                                value,
                                truth,
                            ));
                        }
                    }
                    Ok((gaps, bias))
                })
                .collect::<Result<Vec<_>>>()?;
            for (g, b) in per_sample {
                gap_rows.extend(g);
                bias_rows.extend(b);
            }
        }
    }
    Ok(PolicyStudy {
        gap: ExperimentResult::new(ExperimentKind::PolicyGap, cfg, &env, gap_rows)?,
        bias: ExperimentResult::new(ExperimentKind::EstimatorBias, cfg, &env, bias_rows)?,
    })
}

pub fn run_policy_gap(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    Ok(run_policy_study(cfg)?.gap)
}

pub fn run_estimator_bias(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    Ok(run_policy_study(cfg)?.bias)
}

/// Dispatches on `cfg.kind`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    match cfg.kind {
        ExperimentKind::RmseVsN => run_rmse_vs_n(cfg),
        ExperimentKind::KernelScatter => run_kernel_scatter(cfg),
        ExperimentKind::Extrapolation => run_extrapolation(cfg),
        ExperimentKind::PolicyGap => run_policy_gap(cfg),
        ExperimentKind::EstimatorBias => run_estimator_bias(cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Scale;
    use crate::harness::output::emit_outputs;

    fn small(kind: ExperimentKind) -> ExperimentConfig {
        let mut c = ExperimentConfig::preset(kind, Scale::Desk);
        c.replications = 3;
        c.sample_sizes = vec![300, 600];
        c.reference_size = 2_000;
        c.nn.epochs = 2;
        c.nn.restarts = 2;
        c.nn.batch_size = 128;
        c.dsl.tau_grid_size = 3;
        c
    }

    #[test]
    fn rmse_rows_are_complete_and_deterministic() {
        let cfg = small(ExperimentKind::RmseVsN);
        let a = run_rmse_vs_n(&cfg).unwrap();
        assert_eq!(a.rows.len(), 2 * 3 * 4);
        for r in &a.rows {
            assert!(r.truth.is_finite() && r.estimate.is_finite());
            assert_eq!(r.error, r.estimate - r.truth);
        }
        let b = run_rmse_vs_n(&cfg).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.config_hash, b.config_hash);
    }

    #[test]
    fn outputs_are_byte_identical_and_hash_follows_config() {
        let cfg = small(ExperimentKind::KernelScatter);
        let r = run_kernel_scatter(&cfg).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let f1 = emit_outputs(&r, d1.path()).unwrap();
        emit_outputs(&run_kernel_scatter(&cfg).unwrap(), d2.path()).unwrap();
        assert_eq!(f1.len(), 4);
        for f in &f1 {
            let name = f.file_name().unwrap();
            assert_eq!(std::fs::read(f).unwrap(), std::fs::read(d2.path().join(name)).unwrap());
        }
        let mut other = cfg.clone();
        other.ridge_jitter = true;
        let r2 = run_kernel_scatter(&other).unwrap();
        assert_ne!(r.config_hash, r2.config_hash);
    }

    #[test]
    fn extrapolation_covers_the_whole_grid() {
        let mut cfg = small(ExperimentKind::Extrapolation);
        cfg.sample_sizes = vec![500];
        cfg.replications = 2;
        let r = run_extrapolation(&cfg).unwrap();
        assert_eq!(r.rows.len(), 2 * 61 * 2);
        assert!(r.rows.iter().any(|row| row.target == "+0.05" && row.estimate.is_finite()));
    }

    #[test]
    fn policy_study_gaps_and_oracle_dm() {
        let mut cfg = small(ExperimentKind::PolicyGap);
        cfg.sample_sizes = vec![2_000];
        cfg.replications = 2;
        let s = run_policy_study(&cfg).unwrap();
        // two settings, two samples, three methods
        assert_eq!(s.gap.rows.len(), 2 * 2 * 3);
        assert!(s.gap.rows.iter().all(|r| r.relative_error <= 0.0));
        assert_eq!(s.bias.rows.len(), 2 * 2 * 3 * 4);
        for r in s.bias.rows.iter().filter(|r| r.method == DM_ORACLE) {
            assert_eq!(r.error, 0.0);
        }
        assert_eq!(s.gap.kind, ExperimentKind::PolicyGap);
        assert_eq!(s.bias.kind, ExperimentKind::EstimatorBias);
    }

    #[test]
    fn unknown_target_action_is_rejected() {
        let mut cfg = small(ExperimentKind::RmseVsN);
        cfg.target_action = 0.05;
        assert!(matches!(run_rmse_vs_n(&cfg), Err(Error::ActionSpaceMismatch(_))));
    }
}
