//! Domain types shared by every module: action spaces, feature vectors,
//! policies, logged samples and the exact (oracle) empirical policy value.

use std::fmt;
use std::ops::Deref;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric;

/// Tolerance for probability vectors summing to one.
pub const PROBABILITY_TOLERANCE: f64 = 1e-9;

/// Finite, strictly increasing grid of price adjustments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ActionSpace {
    levels: Vec<f64>,
}

impl ActionSpace {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::InvalidArgument(
                "action space needs at least one level".into(),
            ));
        }
        if levels.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidArgument(
                "action levels must be finite".into(),
            ));
        }
        if levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(format!(
                "action levels must be strictly increasing: {levels:?}"
            )));
        }
        Ok(Self { levels })
    }

    /// `count` evenly spaced levels from `lo` to `hi` inclusive, rounded to
    /// 1e-12 so that grids such as -0.30, -0.29, ... contain an exact `0.0`.
    pub fn grid(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidArgument("grid needs count >= 1".into()));
        }
        if count == 1 {
            return Self::new(vec![lo]);
        }
        let step = (hi - lo) / (count - 1) as f64;
        let levels = (0..count)
            .map(|k| {
                let v = lo + k as f64 * step;
                (v * 1e12).round() / 1e12
            })
            .collect();
        Self::new(levels)
    }

    /// Historical grid of the travel-insurance study: -20% .. +20% in steps of 10%.
    pub fn historical_default() -> Self {
        Self::new(vec![-0.2, -0.1, 0.0, 0.1, 0.2]).expect("static grid")
    }

    /// Dense extrapolation grid: -30% .. +30% in steps of 1%.
    pub fn extended_default() -> Self {
        Self::grid(-0.3, 0.3, 61).expect("static grid")
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn level(&self, index: usize) -> f64 {
        self.levels[index]
    }

    pub fn max_level(&self) -> f64 {
        *self.levels.last().expect("non-empty")
    }

    pub fn min_level(&self) -> f64 {
        self.levels[0]
    }

    /// Index of the level within `tol` of `value`.
    pub fn index_of(&self, value: f64, tol: f64) -> Option<usize> {
        self.levels.iter().position(|a| (a - value).abs() <= tol)
    }
}

impl TryFrom<Vec<f64>> for ActionSpace {
    type Error = Error;

    fn try_from(levels: Vec<f64>) -> Result<Self> {
        Self::new(levels)
    }
}

impl From<ActionSpace> for Vec<f64> {
    fn from(space: ActionSpace) -> Self {
        space.levels
    }
}

impl fmt::Display for ActionSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, a) in self.levels.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{a}")?;
        }
        write!(f, "}}")
    }
}

/// Encoded covariates of one policyholder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "feature {pos} is not finite"
            )));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for FeatureVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// A rule choosing one action index per policyholder.
pub trait DeterministicPolicy: Send + Sync {
    fn num_actions(&self) -> usize;
    fn action(&self, x: &FeatureVector) -> usize;
}

/// A rule assigning a probability vector over action indices.
pub trait StochasticPolicy: Send + Sync {
    fn num_actions(&self) -> usize;
    fn probabilities(&self, x: &FeatureVector) -> Vec<f64>;
}

/// Borrowed view of either policy kind.
#[derive(Clone, Copy)]
pub enum Policy<'a> {
    Deterministic(&'a dyn DeterministicPolicy),
    Stochastic(&'a dyn StochasticPolicy),
}

impl<'a> Policy<'a> {
    pub fn num_actions(&self) -> usize {
        match self {
            Policy::Deterministic(p) => p.num_actions(),
            Policy::Stochastic(p) => p.num_actions(),
        }
    }

    /// Probability vector of the policy at `x`, validated against the
    /// policy invariants.
    pub fn distribution(&self, x: &FeatureVector) -> Result<Vec<f64>> {
        let m = self.num_actions();
        match self {
            Policy::Deterministic(p) => {
                let a = p.action(x);
                if a >= m {
                    return Err(Error::InvalidArgument(format!(
                        "policy returned action {a} outside [0, {m})"
                    )));
                }
                let mut v = vec![0.0; m];
                v[a] = 1.0;
                Ok(v)
            }
            Policy::Stochastic(p) => {
                let v = p.probabilities(x);
                check_distribution(&v, m)?;
                Ok(v)
            }
        }
    }
}

pub(crate) fn check_distribution(p: &[f64], expected_len: usize) -> Result<()> {
    if p.len() != expected_len {
        return Err(Error::DimensionMismatch {
            context: "probability vector",
            expected: expected_len,
            actual: p.len(),
        });
    }
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "probabilities must be finite and non-negative: {p:?}"
        )));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > PROBABILITY_TOLERANCE {
        return Err(Error::InvalidArgument(format!(
            "probabilities sum to {s}, not 1"
        )));
    }
    Ok(())
}

/// Always plays the same action index.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPolicy {
    pub action: usize,
    pub num_actions: usize,
}

impl ConstantPolicy {
    pub fn new(action: usize, num_actions: usize) -> Result<Self> {
        if action >= num_actions {
            return Err(Error::InvalidArgument(format!(
                "constant action {action} outside [0, {num_actions})"
            )));
        }
        Ok(Self {
            action,
            num_actions,
        })
    }
}

impl DeterministicPolicy for ConstantPolicy {
    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn action(&self, _x: &FeatureVector) -> usize {
        self.action
    }
}

/// The same probability vector for every policyholder (e.g. uniform logging).
#[derive(Debug, Clone)]
pub struct FixedDistributionPolicy {
    probs: Vec<f64>,
}

impl FixedDistributionPolicy {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let m = probs.len();
        check_distribution(&probs, m)?;
        Ok(Self { probs })
    }

    pub fn uniform(m: usize) -> Self {
        Self {
            probs: vec![1.0 / m as f64; m],
        }
    }
}

impl StochasticPolicy for FixedDistributionPolicy {
    fn num_actions(&self) -> usize {
        self.probs.len()
    }

    fn probabilities(&self, _x: &FeatureVector) -> Vec<f64> {
        self.probs.clone()
    }
}

/// Deterministic policy backed by a closure.
pub struct FnPolicy<F> {
    num_actions: usize,
    rule: F,
}

impl<F> FnPolicy<F>
where
    F: Fn(&FeatureVector) -> usize + Send + Sync,
{
    pub fn new(num_actions: usize, rule: F) -> Self {
        Self { num_actions, rule }
    }
}

impl<F> DeterministicPolicy for FnPolicy<F>
where
    F: Fn(&FeatureVector) -> usize + Send + Sync,
{
    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn action(&self, x: &FeatureVector) -> usize {
        (self.rule)(x)
    }
}

/// Stochastic policy backed by a closure.
pub struct FnStochasticPolicy<F> {
    num_actions: usize,
    rule: F,
}

impl<F> FnStochasticPolicy<F>
where
    F: Fn(&FeatureVector) -> Vec<f64> + Send + Sync,
{
    pub fn new(num_actions: usize, rule: F) -> Self {
        Self { num_actions, rule }
    }
}

impl<F> StochasticPolicy for FnStochasticPolicy<F>
where
    F: Fn(&FeatureVector) -> Vec<f64> + Send + Sync,
{
    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn probabilities(&self, x: &FeatureVector) -> Vec<f64> {
        (self.rule)(x)
    }
}

impl<T: DeterministicPolicy + ?Sized> DeterministicPolicy for Arc<T> {
    fn num_actions(&self) -> usize {
        (**self).num_actions()
    }

    fn action(&self, x: &FeatureVector) -> usize {
        (**self).action(x)
    }
}

impl<T: DeterministicPolicy + ?Sized> DeterministicPolicy for Box<T> {
    fn num_actions(&self) -> usize {
        (**self).num_actions()
    }

    fn action(&self, x: &FeatureVector) -> usize {
        (**self).action(x)
    }
}

/// One logged interaction `(x, a, r)` together with the full propensity
/// vector of the logging policy at `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoggedSample {
    features: FeatureVector,
    action_index: usize,
    reward: f64,
    propensities: Vec<f64>,
}

impl LoggedSample {
    pub fn new(
        features: FeatureVector,
        action_index: usize,
        reward: f64,
        propensities: Vec<f64>,
    ) -> Result<Self> {
        check_distribution(&propensities, propensities.len())?;
        if action_index >= propensities.len() {
            return Err(Error::InvalidArgument(format!(
                "action index {action_index} outside propensity vector of length {}",
                propensities.len()
            )));
        }
        if propensities[action_index] <= 0.0 {
            return Err(Error::Overlap(format!(
                "realized action {action_index} has zero logging propensity"
            )));
        }
        if !reward.is_finite() {
            return Err(Error::InvalidArgument("reward must be finite".into()));
        }
        Ok(Self {
            features,
            action_index,
            reward,
            propensities,
        })
    }

    pub fn features(&self) -> &FeatureVector {
        &self.features
    }

    pub fn action_index(&self) -> usize {
        self.action_index
    }

    pub fn reward(&self) -> f64 {
        self.reward
    }

    pub fn propensities(&self) -> &[f64] {
        &self.propensities
    }

    /// Logging propensity of the realized action.
    pub fn propensity(&self) -> f64 {
        self.propensities[self.action_index]
    }
}

/// The observed learning sample together with its historical action space.
#[derive(Debug, Clone)]
pub struct LearningSample {
    records: Vec<LoggedSample>,
    actions: ActionSpace,
}

impl LearningSample {
    pub fn new(records: Vec<LoggedSample>, actions: ActionSpace) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::InvalidArgument("learning sample is empty".into()))?;
        let p = first.features.len();
        let d = actions.len();
        for r in &records {
            if r.features.len() != p {
                return Err(Error::DimensionMismatch {
                    context: "learning sample features",
                    expected: p,
                    actual: r.features.len(),
                });
            }
            if r.propensities.len() != d {
                return Err(Error::DimensionMismatch {
                    context: "learning sample propensities",
                    expected: d,
                    actual: r.propensities.len(),
                });
            }
        }
        Ok(Self { records, actions })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.records[0].features.len()
    }

    pub fn actions(&self) -> &ActionSpace {
        &self.actions
    }

    pub fn records(&self) -> &[LoggedSample] {
        &self.records
    }

    pub fn features(&self) -> Vec<FeatureVector> {
        self.records.iter().map(|r| r.features.clone()).collect()
    }

    /// New sample made of the records at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let records = indices.iter().map(|&i| self.records[i].clone()).collect();
        Self::new(records, self.actions.clone())
    }
}

/// Exact empirical value `(1/n) sum_i sum_a rho(x_i, a) pi(a | x_i)` given the
/// true expected-reward matrix (`n x m`, row `i` for record `i`).
pub fn empirical_value(
    expected_rewards: &DMatrix<f64>,
    policy: Policy<'_>,
    features: &[FeatureVector],
) -> Result<f64> {
    let (n, m) = expected_rewards.shape();
    if features.len() != n {
        return Err(Error::DimensionMismatch {
            context: "empirical value rows",
            expected: n,
            actual: features.len(),
        });
    }
    if policy.num_actions() != m {
        return Err(Error::DimensionMismatch {
            context: "empirical value actions",
            expected: m,
            actual: policy.num_actions(),
        });
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no records".into()));
    }
    let mut per_record = Vec::with_capacity(n);
    for (i, x) in features.iter().enumerate() {
        let v = match policy {
            Policy::Deterministic(p) => {
                let a = p.action(x);
                if a >= m {
                    return Err(Error::InvalidArgument(format!(
                        "policy returned action {a} outside [0, {m})"
                    )));
                }
                expected_rewards[(i, a)]
            }
            Policy::Stochastic(_) => {
                let probs = policy.distribution(x)?;
                probs
                    .iter()
                    .enumerate()
                    .map(|(a, p)| expected_rewards[(i, a)] * p)
                    .sum()
            }
        };
        per_record.push(v);
    }
    Ok(numeric::mean(&per_record))
}

/// Empirical value of a record-wise action assignment.
pub fn assignment_value(expected_rewards: &DMatrix<f64>, actions: &[usize]) -> Result<f64> {
    let (n, m) = expected_rewards.shape();
    if actions.len() != n {
        return Err(Error::DimensionMismatch {
            context: "assignment rows",
            expected: n,
            actual: actions.len(),
        });
    }
    let mut per_record = Vec::with_capacity(n);
    for (i, &a) in actions.iter().enumerate() {
        if a >= m {
            return Err(Error::InvalidArgument(format!(
                "assigned action {a} outside [0, {m})"
            )));
        }
        per_record.push(expected_rewards[(i, a)]);
    }
    Ok(numeric::mean(&per_record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn action_space_validation() {
        assert!(ActionSpace::new(vec![]).is_err());
        assert!(ActionSpace::new(vec![0.1, 0.1]).is_err());
        assert!(ActionSpace::new(vec![0.2, 0.1]).is_err());
        assert!(ActionSpace::new(vec![0.0]).is_ok());
        let g = ActionSpace::extended_default();
        assert_eq!(g.len(), 61);
        assert_eq!(g.index_of(0.0, 0.0), Some(30));
        assert_eq!(g.index_of(0.05, 1e-12), Some(35));
        assert_eq!(g.level(0), -0.3);
        assert_eq!(g.max_level(), 0.3);
    }

    #[test]
    fn single_row_selection() {
        let m = DMatrix::from_row_slice(1, 3, &[90.0, 0.0, 70.0]);
        let pol = ConstantPolicy::new(0, 3).unwrap();
        let v = empirical_value(&m, Policy::Deterministic(&pol), &[fv(&[0.0])]).unwrap();
        assert_eq!(v, 90.0);
    }

    #[test]
    fn uniform_mixing() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let pol = FixedDistributionPolicy::uniform(2);
        let xs = vec![fv(&[0.0]); 3];
        let v = empirical_value(&m, Policy::Stochastic(&pol), &xs).unwrap();
        assert!((v - 3.5).abs() < 1e-12);
    }

    #[test]
    fn dimension_errors() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let pol = ConstantPolicy::new(0, 2).unwrap();
        assert!(empirical_value(&m, Policy::Deterministic(&pol), &[fv(&[0.0])]).is_err());
        let pol3 = ConstantPolicy::new(0, 3).unwrap();
        let xs = vec![fv(&[0.0]); 2];
        assert!(empirical_value(&m, Policy::Deterministic(&pol3), &xs).is_err());
    }

    #[test]
    fn logged_sample_invariants() {
        assert!(LoggedSample::new(fv(&[1.0]), 0, 1.0, vec![0.5, 0.5]).is_ok());
        assert!(matches!(
            LoggedSample::new(fv(&[1.0]), 1, 1.0, vec![1.0, 0.0]),
            Err(Error::Overlap(_))
        ));
        assert!(LoggedSample::new(fv(&[1.0]), 0, 1.0, vec![0.5, 0.6]).is_err());
        assert!(LoggedSample::new(fv(&[1.0]), 0, f64::NAN, vec![1.0]).is_err());
        assert!(FeatureVector::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn learning_sample_rejects_mixed_dims() {
        let a = LoggedSample::new(fv(&[1.0]), 0, 1.0, vec![1.0]).unwrap();
        let b = LoggedSample::new(fv(&[1.0, 2.0]), 0, 1.0, vec![1.0]).unwrap();
        let space = ActionSpace::new(vec![0.0]).unwrap();
        assert!(LearningSample::new(vec![a.clone(), b], space.clone()).is_err());
        assert!(LearningSample::new(vec![], space.clone()).is_err());
        assert!(LearningSample::new(vec![a], space).is_ok());
    }

    proptest! {
        #[test]
        fn one_hot_stochastic_equals_deterministic(
            rows in proptest::collection::vec(proptest::collection::vec(-100.0f64..100.0, 4), 1..20),
            action in 0usize..4,
        ) {
            let n = rows.len();
            let flat: Vec<f64> = rows.concat();
            let m = DMatrix::from_row_slice(n, 4, &flat);
            let xs: Vec<FeatureVector> = (0..n).map(|i| fv(&[i as f64])).collect();
            let det = ConstantPolicy::new(action, 4).unwrap();
            let mut onehot = vec![0.0; 4];
            onehot[action] = 1.0;
            let sto = FixedDistributionPolicy::new(onehot).unwrap();
            let a = empirical_value(&m, Policy::Deterministic(&det), &xs).unwrap();
            let b = empirical_value(&m, Policy::Stochastic(&sto), &xs).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn value_is_linear_in_rewards(
            r1 in proptest::collection::vec(-50.0f64..50.0, 12),
            r2 in proptest::collection::vec(-50.0f64..50.0, 12),
            alpha in -3.0f64..3.0,
            beta in -3.0f64..3.0,
            w in proptest::collection::vec(0.01f64..1.0, 3),
        ) {
            let s: f64 = w.iter().sum();
            let probs: Vec<f64> = w.iter().map(|v| v / s).collect();
            let pol = FnStochasticPolicy::new(3, move |_x: &FeatureVector| probs.clone());
            let m1 = DMatrix::from_row_slice(4, 3, &r1);
            let m2 = DMatrix::from_row_slice(4, 3, &r2);
            let xs: Vec<FeatureVector> = (0..4).map(|i| fv(&[i as f64])).collect();
            let combo = &m1 * alpha + &m2 * beta;
            let v = empirical_value(&combo, Policy::Stochastic(&pol), &xs).unwrap();
            let v1 = empirical_value(&m1, Policy::Stochastic(&pol), &xs).unwrap();
            let v2 = empirical_value(&m2, Policy::Stochastic(&pol), &xs).unwrap();
            let expect = alpha * v1 + beta * v2;
            prop_assert!((v - expect).abs() <= 1e-9 * (1.0 + expect.abs().max(v.abs())));
        }
    }
}
