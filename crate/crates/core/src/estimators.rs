//! Policy value estimators: direct method, IPS and kernelized IPS.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{KernelKind, KernelSet};
use crate::numeric;
use crate::simenv::CustomerTruth;
use crate::types::{ActionSpace, FeatureVector, LearningSample, Policy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EstimatorTag {
    #[serde(rename = "DM")]
    Dm,
    #[serde(rename = "IPS")]
    Ips,
    #[serde(rename = "KIPS-naive")]
    KipsNaive,
    #[serde(rename = "KIPS-optimal")]
    KipsOptimal,
}

impl EstimatorTag {
    pub const ALL: [EstimatorTag; 4] = [
        EstimatorTag::Dm,
        EstimatorTag::Ips,
        EstimatorTag::KipsNaive,
        EstimatorTag::KipsOptimal,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorTag::Dm => "DM",
            EstimatorTag::Ips => "IPS",
            EstimatorTag::KipsNaive => "KIPS-naive",
            EstimatorTag::KipsOptimal => "KIPS-optimal",
        }
    }
}

impl fmt::Display for EstimatorTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EstimatorTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dm" => Ok(EstimatorTag::Dm),
            "ips" => Ok(EstimatorTag::Ips),
            "kips-naive" | "kips" | "naive" => Ok(EstimatorTag::KipsNaive),
            "kips-optimal" | "optimal" => Ok(EstimatorTag::KipsOptimal),
            other => Err(Error::InvalidArgument(format!("unknown estimator '{other}'"))),
        }
    }
}

/// An estimate together with the per-record terms it averages.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueEstimate {
    pub value: f64,
    pub per_record: Vec<f64>,
    pub tag: EstimatorTag,
}

impl ValueEstimate {
    pub fn from_contributions(per_record: Vec<f64>, tag: EstimatorTag) -> Self {
        Self {
            value: numeric::mean(&per_record),
            per_record,
            tag,
        }
    }

    /// Standard error of the mean of the contributions.
    pub fn std_error(&self) -> f64 {
        numeric::std_error(&self.per_record)
    }

    pub fn len(&self) -> usize {
        self.per_record.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_record.is_empty()
    }
}

/// Expected reward model for the direct method.
///
/// `record` is the row of the sample being scored. Feature-based models
/// ignore it; the simulator oracle uses it to look up the latent covariates
/// that the observed features leave out.
pub trait RewardModel: Sync {
    fn predict(&self, record: usize, x: &FeatureVector, action: f64) -> f64;
}

/// Constant prediction, mostly useful for tests.
#[derive(Clone, Copy, Debug)]
pub struct ConstantRewardModel(pub f64);

impl RewardModel for ConstantRewardModel {
    fn predict(&self, _record: usize, _x: &FeatureVector, _action: f64) -> f64 {
        self.0
    }
}

/// The simulator's exact expected reward, one customer per record.
#[derive(Clone, Debug)]
pub struct OracleRewardModel {
    truths: Vec<CustomerTruth>,
}

impl OracleRewardModel {
    pub fn new(truths: Vec<CustomerTruth>) -> Self {
        Self { truths }
    }
}

impl RewardModel for OracleRewardModel {
    fn predict(&self, record: usize, _x: &FeatureVector, action: f64) -> f64 {
        self.truths[record].expected_reward(action)
    }
}

fn check_policy(policy: &Policy<'_>, m: usize) -> Result<()> {
    if policy.num_actions() != m {
        return Err(Error::DimensionMismatch {
            context: "policy actions vs evaluation grid",
            expected: m,
            actual: policy.num_actions(),
        });
    }
    Ok(())
}

/// `(1/n) Σ_i Σ_ā ϱ̂(X_i, ā) π(ā | X_i)`.
pub fn dm_value(
    sample: &LearningSample,
    model: &dyn RewardModel,
    policy: Policy<'_>,
    evaluation: &ActionSpace,
) -> Result<ValueEstimate> {
    check_policy(&policy, evaluation.len())?;
    let per_record = sample
        .records()
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let x = r.features();
            match policy {
                Policy::Deterministic(p) => {
                    let a = p.action(x);
                    if a >= evaluation.len() {
                        return Err(Error::InvalidArgument(format!(
                            "policy returned action {a} outside the evaluation grid"
                        )));
                    }
                    Ok(model.predict(i, x, evaluation.level(a)))
                }
                Policy::Stochastic(_) => {
                    let probs = policy.distribution(x)?;
                    Ok(probs
                        .iter()
                        .enumerate()
                        .map(|(a, p)| model.predict(i, x, evaluation.level(a)) * p)
                        .sum())
                }
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ValueEstimate::from_contributions(per_record, EstimatorTag::Dm))
}

/// `(1/n) Σ_i R_i π(A_i | X_i) / π̃(A_i | X_i)`; for deterministic policies
/// the numerator is the indicator `1{A_i = π(X_i)}`.
///
/// IPS can only score actions that were logged, so the evaluation grid must
/// equal the historical one exactly.
pub fn ips_value(
    sample: &LearningSample,
    policy: Policy<'_>,
    evaluation: &ActionSpace,
) -> Result<ValueEstimate> {
    if evaluation != sample.actions() {
        return Err(Error::ActionSpaceMismatch(format!(
            "IPS needs the historical grid {}, got {evaluation}",
            sample.actions()
        )));
    }
    check_policy(&policy, evaluation.len())?;
    let per_record = sample
        .records()
        .par_iter()
        .map(|r| {
            let weight = match policy {
                Policy::Deterministic(p) => {
                    if p.action(r.features()) == r.action_index() {
                        1.0
                    } else {
                        0.0
                    }
                }
                Policy::Stochastic(_) => policy.distribution(r.features())?[r.action_index()],
            };
            Ok(r.reward() * weight / r.propensity())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ValueEstimate::from_contributions(per_record, EstimatorTag::Ips))
}

fn check_kernels(sample: &LearningSample, kernels: &KernelSet, m: usize) -> Result<()> {
    if kernels.len() != sample.len() {
        return Err(Error::DimensionMismatch {
            context: "kernels vs records",
            expected: sample.len(),
            actual: kernels.len(),
        });
    }
    if kernels.historical_len() != sample.actions().len() {
        return Err(Error::DimensionMismatch {
            context: "kernel rows vs historical actions",
            expected: sample.actions().len(),
            actual: kernels.historical_len(),
        });
    }
    if kernels.evaluation_len() != m {
        return Err(Error::DimensionMismatch {
            context: "kernel columns vs policy actions",
            expected: m,
            actual: kernels.evaluation_len(),
        });
    }
    Ok(())
}

/// Kernel weight `⟨e_A, K π⟩ / π̃(A)` of every record.
pub fn kernel_weights(
    sample: &LearningSample,
    policy: Policy<'_>,
    kernels: &KernelSet,
) -> Result<Vec<f64>> {
    check_kernels(sample, kernels, policy.num_actions())?;
    sample
        .records()
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let k = kernels.get(i);
            let a = r.action_index();
            let smoothed = match policy {
                Policy::Deterministic(p) => {
                    let j = p.action(r.features());
                    if j >= kernels.evaluation_len() {
                        return Err(Error::InvalidArgument(format!(
                            "policy returned action {j} outside the evaluation grid"
                        )));
                    }
                    k.entry(a, j)
                }
                Policy::Stochastic(_) => policy
                    .distribution(r.features())?
                    .iter()
                    .enumerate()
                    .map(|(j, p)| k.entry(a, j) * p)
                    .sum(),
            };
            Ok(smoothed / r.propensity())
        })
        .collect()
}

/// `(1/n) Σ_i R_i ⟨e_{A_i}, K_i π(X_i)⟩ / π̃(A_i | X_i)`.
pub fn kips_value(
    sample: &LearningSample,
    policy: Policy<'_>,
    kernels: &KernelSet,
) -> Result<ValueEstimate> {
    let weights = kernel_weights(sample, policy, kernels)?;
    let per_record = sample
        .records()
        .iter()
        .zip(&weights)
        .map(|(r, w)| r.reward() * w)
        .collect();
    let tag = match kernels.kind() {
        KernelKind::Naive => EstimatorTag::KipsNaive,
        KernelKind::Optimal => EstimatorTag::KipsOptimal,
    };
    Ok(ValueEstimate::from_contributions(per_record, tag))
}

/// Summary of the importance weights behind an estimate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Diagnostics {
    pub n: usize,
    pub weight_min: f64,
    pub weight_max: f64,
    pub weight_mean: f64,
    pub weight_std: f64,
    /// Fraction of records with a non-zero weight.
    pub nonzero_fraction: f64,
    /// `(Σ w)² / Σ w²`.
    pub effective_sample_size: f64,
    pub max_abs_kernel_entry: Option<f64>,
    pub max_gram_condition: Option<f64>,
    pub distinct_kernels: Option<usize>,
}

/// Weight diagnostics for IPS (`kernels = None`) or kernelized IPS.
pub fn estimator_diagnostics(
    sample: &LearningSample,
    policy: Policy<'_>,
    kernels: Option<&KernelSet>,
) -> Result<Diagnostics> {
    let weights = match kernels {
        Some(k) => kernel_weights(sample, policy, k)?,
        None => sample
            .records()
            .iter()
            .map(|r| {
                Ok(policy.distribution(r.features())?[r.action_index()] / r.propensity())
            })
            .collect::<Result<Vec<f64>>>()?,
    };
    let sum = numeric::pairwise_sum(&weights);
    let sq: Vec<f64> = weights.iter().map(|w| w * w).collect();
    let sum_sq = numeric::pairwise_sum(&sq);
    let (max_abs, cond, distinct) = match kernels {
        Some(ks) => {
            let mut max_abs = 0.0f64;
            let mut cond = 0.0f64;
            for i in 0..ks.len() {
                let k = ks.get(i);
                max_abs = max_abs.max(k.matrix().amax());
                cond = cond.max(k.gram_condition());
            }
            (Some(max_abs), Some(cond), Some(ks.distinct()))
        }
        None => (None, None, None),
    };
    Ok(Diagnostics {
        n: weights.len(),
        weight_min: weights.iter().cloned().fold(f64::INFINITY, f64::min),
        weight_max: weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        weight_mean: numeric::mean(&weights),
        weight_std: numeric::sample_std(&weights),
        nonzero_fraction: weights.iter().filter(|w| **w != 0.0).count() as f64
            / weights.len() as f64,
        effective_sample_size: if sum_sq > 0.0 { sum * sum / sum_sq } else { 0.0 },
        max_abs_kernel_entry: max_abs,
        max_gram_condition: cond,
        distinct_kernels: distinct,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{build_design, kernel_matrix, naive_weights, BasisSpec};
    use crate::types::{ConstantPolicy, FixedDistributionPolicy, LoggedSample};
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn example_sample() -> LearningSample {
        let actions = ActionSpace::new(vec![0.1, 0.2, 0.3]).unwrap();
        let recs = [(0, 90.0), (1, 0.0), (2, 70.0)]
            .iter()
            .map(|&(a, r)| {
                LoggedSample::new(FeatureVector::new(vec![1.0]).unwrap(), a, r, vec![1.0 / 3.0; 3])
                    .unwrap()
            })
            .collect();
        LearningSample::new(recs, actions).unwrap()
    }

    fn example_kernels(sample: &LearningSample, basis: BasisSpec) -> KernelSet {
        let a = sample.actions();
        let designs = build_design(&basis, a, a).unwrap();
        KernelSet::naive(sample, &designs).unwrap()
    }

    #[test]
    fn example_ips_and_kips() {
        let s = example_sample();
        let ks = example_kernels(&s, BasisSpec::linear());
        assert_eq!(ks.distinct(), 1);
        let ips_expect = [90.0, 0.0, 70.0];
        // exact kernel entries are 5/6, 1/3 and -1/6
        let kips_expect = [380.0 / 6.0, 320.0 / 6.0, 260.0 / 6.0];
        for a in 0..3 {
            let p = ConstantPolicy::new(a, 3).unwrap();
            let ips = ips_value(&s, Policy::Deterministic(&p), s.actions()).unwrap();
            assert!((ips.value - ips_expect[a]).abs() < 1e-9, "{}", ips.value);
            let kips = kips_value(&s, Policy::Deterministic(&p), &ks).unwrap();
            assert!((kips.value - kips_expect[a]).abs() < 1e-9, "{}", kips.value);
            assert_eq!(kips.tag, EstimatorTag::KipsNaive);
        }
    }

    #[test]
    fn kips_lies_on_weighted_fit_of_ips() {
        // Fitting the basis to (action, IPS estimate) with the naive weights
        // predicts the KIPS values.
        let s = example_sample();
        let ks = example_kernels(&s, BasisSpec::linear());
        let ips: Vec<f64> = (0..3)
            .map(|a| {
                let p = ConstantPolicy::new(a, 3).unwrap();
                ips_value(&s, Policy::Deterministic(&p), s.actions()).unwrap().value
            })
            .collect();
        let x = [0.1, 0.2, 0.3];
        // equal weights: plain OLS line
        let xm = x.iter().sum::<f64>() / 3.0;
        let ym = ips.iter().sum::<f64>() / 3.0;
        let slope = x.iter().zip(&ips).map(|(a, b)| (a - xm) * (b - ym)).sum::<f64>()
            / x.iter().map(|a| (a - xm) * (a - xm)).sum::<f64>();
        for (a, xa) in x.iter().enumerate() {
            let p = ConstantPolicy::new(a, 3).unwrap();
            let kips = kips_value(&s, Policy::Deterministic(&p), &ks).unwrap().value;
            assert!((kips - (ym + slope * (xa - xm))).abs() < 1e-8);
        }
    }

    #[test]
    fn saturated_kernel_reduces_to_ips() {
        let s = example_sample();
        let ks = example_kernels(&s, BasisSpec::quadratic());
        for a in 0..3 {
            let p = ConstantPolicy::new(a, 3).unwrap();
            let ips = ips_value(&s, Policy::Deterministic(&p), s.actions()).unwrap();
            let kips = kips_value(&s, Policy::Deterministic(&p), &ks).unwrap();
            assert!((ips.value - kips.value).abs() < 1e-9);
        }
    }

    #[test]
    fn ips_rejects_other_grid() {
        let s = example_sample();
        let other = ActionSpace::new(vec![0.1, 0.2, 0.35]).unwrap();
        let p = ConstantPolicy::new(0, 3).unwrap();
        assert!(matches!(
            ips_value(&s, Policy::Deterministic(&p), &other),
            Err(Error::ActionSpaceMismatch(_))
        ));
    }

    #[test]
    fn deterministic_logging_gives_sample_mean() {
        let actions = ActionSpace::new(vec![0.0, 0.1]).unwrap();
        let recs = [3.0, 5.0, 10.0]
            .iter()
            .map(|&r| {
                LoggedSample::new(FeatureVector::new(vec![0.0]).unwrap(), 1, r, vec![0.0, 1.0])
                    .unwrap()
            })
            .collect();
        let s = LearningSample::new(recs, actions.clone()).unwrap();
        let p = ConstantPolicy::new(1, 2).unwrap();
        let v = ips_value(&s, Policy::Deterministic(&p), &actions).unwrap();
        assert!((v.value - 6.0).abs() < 1e-12);
    }

    #[test]
    fn constant_model_dm() {
        let s = example_sample();
        let p = FixedDistributionPolicy::new(vec![0.2, 0.5, 0.3]).unwrap();
        let v = dm_value(&s, &ConstantRewardModel(4.5), Policy::Stochastic(&p), s.actions()).unwrap();
        assert!((v.value - 4.5).abs() < 1e-12);
        assert_eq!(v.tag, EstimatorTag::Dm);
    }

    #[test]
    fn diagnostics_example() {
        let s = example_sample();
        let ks = example_kernels(&s, BasisSpec::linear());
        let p = ConstantPolicy::new(0, 3).unwrap();
        let d = estimator_diagnostics(&s, Policy::Deterministic(&p), Some(&ks)).unwrap();
        assert!((d.max_abs_kernel_entry.unwrap() - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(d.distinct_kernels, Some(1));

        // all weights equal: ESS = n
        let p = FixedDistributionPolicy::uniform(3);
        let d = estimator_diagnostics(&s, Policy::Stochastic(&p), None).unwrap();
        assert!((d.effective_sample_size - 3.0).abs() < 1e-12);
    }

    #[test]
    fn identity_kernel_set_matches_ips() {
        let s = example_sample();
        let k = kernel_matrix(
            &build_design(&BasisSpec::quadratic(), s.actions(), s.actions()).unwrap(),
            &naive_weights(&[1.0 / 3.0; 3]).unwrap(),
        )
        .unwrap();
        assert!((k.matrix() - DMatrix::identity(3, 3)).amax() < 1e-10);
    }

    proptest! {
        #[test]
        fn kips_linear_in_policy(
            p1 in proptest::collection::vec(0.01f64..1.0, 3),
            p2 in proptest::collection::vec(0.01f64..1.0, 3),
            lam in 0.0f64..1.0,
        ) {
            let norm = |v: &[f64]| { let s: f64 = v.iter().sum(); v.iter().map(|x| x / s).collect::<Vec<_>>() };
            let (q1, q2) = (norm(&p1), norm(&p2));
            let mix: Vec<f64> = q1.iter().zip(&q2).map(|(a, b)| lam * a + (1.0 - lam) * b).collect();
            let s = example_sample();
            let ks = example_kernels(&s, BasisSpec::linear());
            let v = |q: Vec<f64>| {
                let p = FixedDistributionPolicy::new(q).unwrap();
                kips_value(&s, Policy::Stochastic(&p), &ks).unwrap().value
            };
            let (v1, v2) = (v(q1.clone()), v(q2.clone()));
            let vm = v(norm(&mix));
            prop_assert!((vm - (lam * v1 + (1.0 - lam) * v2)).abs() < 1e-10 * (1.0 + vm.abs()));
        }
    }
}
