//! Synthetic travel-insurance market with a known ground truth.
//!
//! A customer is described by seven independent covariates. The insurer
//! offers the fair premium (a fixed share of the ticket price) plus a profit
//! loading scaled by the pricing action; the customer converts with a
//! probability that depends on a baseline logistic score and an individual
//! price elasticity. Because the conversion model is known, the expected
//! reward of every action is available for every simulated customer.

mod config;
mod dataset;

pub use config::{EnvConfig, LoggingSpec, CONFIG_VERSION};
pub use dataset::{read_dataset_csv, write_dataset_csv, DATASET_FIXED_COLUMNS};

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::sigmoid;
use crate::seeding;
use crate::types::{ActionSpace, FeatureVector, LearningSample, LoggedSample, StochasticPolicy};

/// Number of countries for origin and destination.
pub const COUNTRIES: u8 = 7;
/// Standardized numeric covariates (ticket price, lead time, passengers,
/// return trip, trip duration).
pub const NUMERIC_DIM: usize = 5;
/// Observed encoding: numerics plus origin one-hot (first level dropped).
pub const OBSERVED_DIM: usize = NUMERIC_DIM + (COUNTRIES as usize - 1);
/// Full encoding used by the true model: observed plus destination one-hot.
pub const FULL_DIM: usize = OBSERVED_DIM + (COUNTRIES as usize - 1);

const TICKET_RANGE: (f64, f64) = (100.0, 2000.0);
const LEAD_RANGE: (u32, u32) = (1, 365);
const PASSENGER_RANGE: (u32, u32) = (1, 5);
const DURATION_RANGE: (u32, u32) = (1, 30);

/// Weights and constants of the synthetic market.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentParams {
    /// Baseline-conversion weights over the full encoding.
    pub alpha1: Vec<f64>,
    /// Elasticity weights over the full encoding.
    pub alpha2: Vec<f64>,
    /// Weights of the higher-order terms.
    pub alpha3: [f64; 4],
    pub lambda_loading: f64,
    pub fair_rate: f64,
    pub elasticity_cap: f64,
    /// When false the higher-order term is dropped from the elasticity.
    #[serde(default = "default_true")]
    pub higher_order: bool,
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl Default for EnvironmentParams {
    fn default() -> Self {
        EnvConfig::default_config().params
    }
}

impl EnvironmentParams {
    pub fn validate(&self) -> Result<()> {
        if self.alpha1.len() != FULL_DIM {
            return Err(Error::DimensionMismatch {
                context: "alpha1",
                expected: FULL_DIM,
                actual: self.alpha1.len(),
            });
        }
        if self.alpha2.len() != FULL_DIM {
            return Err(Error::DimensionMismatch {
                context: "alpha2",
                expected: FULL_DIM,
                actual: self.alpha2.len(),
            });
        }
        let finite = self
            .alpha1
            .iter()
            .chain(&self.alpha2)
            .chain(&self.alpha3)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("environment weights must be finite".into()));
        }
        if !(self.lambda_loading > 0.0) {
            return Err(Error::Config("lambda_loading must be > 0".into()));
        }
        if !(self.fair_rate > 0.0) {
            return Err(Error::Config("fair_rate must be > 0".into()));
        }
        if !(self.elasticity_cap > 0.0) {
            return Err(Error::Config("elasticity_cap must be > 0".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    /// Ablation switch for the higher-order elasticity term.
    pub fn with_higher_order(&self, enabled: bool) -> Self {
        Self {
            higher_order: enabled,
            ..self.clone()
        }
    }
}

/// Raw covariates as listed in the market description.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawCovariates {
    pub ticket_price: f64,
    pub lead_time: u32,
    pub passengers: u32,
    /// Country of origin, 1..=7.
    pub origin: u8,
    /// Country of destination, 1..=7. Latent: never part of observed features.
    pub destination: u8,
    pub return_trip: bool,
    pub trip_duration: u32,
}

impl RawCovariates {
    pub fn validate(&self) -> Result<()> {
        let ok = (TICKET_RANGE.0..=TICKET_RANGE.1).contains(&self.ticket_price)
            && (LEAD_RANGE.0..=LEAD_RANGE.1).contains(&self.lead_time)
            && (PASSENGER_RANGE.0..=PASSENGER_RANGE.1).contains(&self.passengers)
            && (1..=COUNTRIES).contains(&self.origin)
            && (1..=COUNTRIES).contains(&self.destination)
            && (DURATION_RANGE.0..=DURATION_RANGE.1).contains(&self.trip_duration);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "covariates outside their support: {self:?}"
            )))
        }
    }

    fn draw(rng: &mut ChaCha8Rng) -> Self {
        Self {
            ticket_price: rng.random_range(TICKET_RANGE.0..TICKET_RANGE.1),
            lead_time: rng.random_range(LEAD_RANGE.0..=LEAD_RANGE.1),
            passengers: rng.random_range(PASSENGER_RANGE.0..=PASSENGER_RANGE.1),
            origin: rng.random_range(1..=COUNTRIES),
            destination: rng.random_range(1..=COUNTRIES),
            return_trip: rng.random_bool(0.5),
            trip_duration: rng.random_range(DURATION_RANGE.0..=DURATION_RANGE.1),
        }
    }
}

fn discrete_uniform_moments((lo, hi): (u32, u32)) -> (f64, f64) {
    let k = (hi - lo + 1) as f64;
    ((lo + hi) as f64 / 2.0, ((k * k - 1.0) / 12.0).sqrt())
}

fn ticket_moments() -> (f64, f64) {
    let (lo, hi) = TICKET_RANGE;
    ((lo + hi) / 2.0, (hi - lo) / 12f64.sqrt())
}

/// Numeric covariates standardized with the population moments of their
/// sampling laws: `[ticket, lead, passengers, return(+-1), duration]`.
pub fn standardized_numerics(raw: &RawCovariates) -> [f64; NUMERIC_DIM] {
    let (tm, ts) = ticket_moments();
    let (lm, ls) = discrete_uniform_moments(LEAD_RANGE);
    let (pm, ps) = discrete_uniform_moments(PASSENGER_RANGE);
    let (dm, ds) = discrete_uniform_moments(DURATION_RANGE);
    [
        (raw.ticket_price - tm) / ts,
        (raw.lead_time as f64 - lm) / ls,
        (raw.passengers as f64 - pm) / ps,
        if raw.return_trip { 1.0 } else { -1.0 },
        (raw.trip_duration as f64 - dm) / ds,
    ]
}

/// Observed encoding (destination excluded).
pub fn encode_observed(raw: &RawCovariates) -> FeatureVector {
    let mut v = Vec::with_capacity(OBSERVED_DIM);
    v.extend_from_slice(&standardized_numerics(raw));
    push_one_hot(&mut v, raw.origin);
    FeatureVector::new(v).expect("finite encoding")
}

/// Full encoding including the latent destination.
pub fn encode_full(raw: &RawCovariates) -> Vec<f64> {
    let mut v = Vec::with_capacity(FULL_DIM);
    v.extend_from_slice(&standardized_numerics(raw));
    push_one_hot(&mut v, raw.origin);
    push_one_hot(&mut v, raw.destination);
    v
}

fn push_one_hot(v: &mut Vec<f64>, level: u8) {
    for c in 2..=COUNTRIES {
        v.push(if level == c { 1.0 } else { 0.0 });
    }
}

/// Column names of the observed encoding.
pub fn observed_feature_names() -> Vec<String> {
    let mut names: Vec<String> = [
        "ticket_price",
        "lead_time",
        "passengers",
        "return_trip",
        "trip_duration",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    names.extend((2..=COUNTRIES).map(|c| format!("origin_{c}")));
    names
}

/// Recovers the ticket price from an observed encoding.
pub fn ticket_price_from_observed(x: &[f64]) -> f64 {
    let (tm, ts) = ticket_moments();
    x[0] * ts + tm
}

/// Fair premium: a fixed share of the ticket price.
pub fn fair_premium(raw: &RawCovariates, params: &EnvironmentParams) -> f64 {
    params.fair_rate * raw.ticket_price
}

/// Charged premium `P_fair * (1 + (1 + a) * lambda)`.
pub fn charged_premium(raw: &RawCovariates, action: f64, params: &EnvironmentParams) -> f64 {
    fair_premium(raw, params) * (1.0 + (1.0 + action) * params.lambda_loading)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Higher-order term over standardized ticket price, lead time, passengers
/// and return indicator.
pub fn higher_order_term(raw: &RawCovariates, params: &EnvironmentParams) -> f64 {
    if !params.higher_order {
        return 0.0;
    }
    let z = standardized_numerics(raw);
    let (x1, x2, x3, x6) = (z[0], z[1], z[2], z[3]);
    let terms = [x1 * x1 * x1, x1 * x2, x1 * x3, x3 * x6];
    dot(&params.alpha3, &terms)
}

fn elasticity_from_full(full: &[f64], raw: &RawCovariates, params: &EnvironmentParams) -> f64 {
    let score = dot(full, &params.alpha2) + higher_order_term(raw, params);
    -score.exp().min(params.elasticity_cap)
}

/// Individual price elasticity, in `[-cap, 0)`.
pub fn elasticity(raw: &RawCovariates, params: &EnvironmentParams) -> f64 {
    elasticity_from_full(&encode_full(raw), raw, params)
}

/// Baseline conversion probability `sigma(x' alpha1)` at action 0.
pub fn baseline_conversion(raw: &RawCovariates, params: &EnvironmentParams) -> f64 {
    sigmoid(dot(&encode_full(raw), &params.alpha1))
}

fn clamp_probability(base: f64, elasticity: f64, action: f64) -> f64 {
    (base * (1.0 + elasticity * action)).clamp(0.0, 1.0)
}

/// Conversion probability, truncated to `[0, 1]`.
pub fn conversion_probability(raw: &RawCovariates, action: f64, params: &EnvironmentParams) -> f64 {
    CustomerTruth::new(raw, params).conversion(action)
}

/// Everything about one customer the true model needs, evaluated once.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CustomerTruth {
    pub baseline: f64,
    pub elasticity: f64,
    pub fair_premium: f64,
    pub lambda_loading: f64,
}

impl CustomerTruth {
    pub fn new(raw: &RawCovariates, params: &EnvironmentParams) -> Self {
        let full = encode_full(raw);
        Self {
            baseline: sigmoid(dot(&full, &params.alpha1)),
            elasticity: elasticity_from_full(&full, raw, params),
            fair_premium: fair_premium(raw, params),
            lambda_loading: params.lambda_loading,
        }
    }

    pub fn conversion(&self, action: f64) -> f64 {
        clamp_probability(self.baseline, self.elasticity, action)
    }

    /// Reward when the customer converts.
    pub fn reward_if_converted(&self, action: f64) -> f64 {
        self.fair_premium * (1.0 + action) * self.lambda_loading
    }

    /// Expected reward `p(x, a) * P_fair * (1 + a) * lambda`.
    pub fn expected_reward(&self, action: f64) -> f64 {
        self.conversion(action) * self.reward_if_converted(action)
    }

    /// Reward variance `p (1 - p) c^2` (Bernoulli conversion times a constant).
    pub fn reward_variance(&self, action: f64) -> f64 {
        let p = self.conversion(action);
        let c = self.reward_if_converted(action);
        p * (1.0 - p) * c * c
    }
}

/// One simulated customer with everything needed for validation.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedRecord {
    pub raw: RawCovariates,
    pub encoded_observed: FeatureVector,
    pub encoded_full: Vec<f64>,
    pub action_index: usize,
    pub propensities: Vec<f64>,
    pub conversion: bool,
    pub reward: f64,
    /// Expected reward of every evaluation action.
    pub true_expected_rewards: Vec<f64>,
}

/// Output of [`simulate`].
#[derive(Debug, Clone)]
pub struct Simulation {
    pub sample: LearningSample,
    pub records: Vec<SimulatedRecord>,
    pub historical: ActionSpace,
    pub evaluation: ActionSpace,
}

impl Simulation {
    /// `n x m` matrix of true expected rewards on the evaluation grid.
    pub fn true_reward_matrix(&self) -> DMatrix<f64> {
        let n = self.records.len();
        let m = self.evaluation.len();
        DMatrix::from_fn(n, m, |i, j| self.records[i].true_expected_rewards[j])
    }

    pub fn conversions(&self) -> Vec<bool> {
        self.records.iter().map(|r| r.conversion).collect()
    }

    pub fn truths(&self, params: &EnvironmentParams) -> Vec<CustomerTruth> {
        self.records
            .iter()
            .map(|r| CustomerTruth::new(&r.raw, params))
            .collect()
    }
}

const DATASET_STREAM: u64 = 0x5349_4d;

fn dataset_seed(params: &EnvironmentParams) -> u64 {
    seeding::derive_seed(params.seed, &[DATASET_STREAM])
}

/// I.i.d. covariates, one ChaCha stream per record.
pub fn sample_covariates(params: &EnvironmentParams, n: usize) -> Result<Vec<RawCovariates>> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample size must be >= 1".into()));
    }
    let seed = dataset_seed(params);
    Ok((0..n as u64)
        .into_par_iter()
        .map(|i| RawCovariates::draw(&mut seeding::record_rng(seed, i)))
        .collect())
}

fn draw_index(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // rounding: fall back to the last action with positive mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Simulates `n` customers priced by `logging` on `historical`, recording the
/// true expected reward of every action in `evaluation`.
pub fn simulate(
    params: &EnvironmentParams,
    n: usize,
    logging: &dyn StochasticPolicy,
    historical: &ActionSpace,
    evaluation: &ActionSpace,
) -> Result<Simulation> {
    params.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("sample size must be >= 1".into()));
    }
    if logging.num_actions() != historical.len() {
        return Err(Error::DimensionMismatch {
            context: "logging policy actions",
            expected: historical.len(),
            actual: logging.num_actions(),
        });
    }
    let seed = dataset_seed(params);
    let records: Vec<Result<SimulatedRecord>> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeding::record_rng(seed, i);
            let raw = RawCovariates::draw(&mut rng);
            let observed = encode_observed(&raw);
            let propensities = logging.probabilities(&observed);
            crate::types::check_distribution(&propensities, historical.len())?;
            if let Some(k) = propensities.iter().position(|&p| p <= 0.0) {
                return Err(Error::Overlap(format!(
                    "logging policy gives zero propensity to historical action {k} (record {i})"
                )));
            }
            let action_index = draw_index(&mut rng, &propensities);
            let action = historical.level(action_index);
            let truth = CustomerTruth::new(&raw, params);
            let conversion = rng.random::<f64>() < truth.conversion(action);
            let reward = if conversion {
                truth.reward_if_converted(action)
            } else {
                0.0
            };
            let true_expected_rewards = evaluation
                .levels()
                .iter()
                .map(|&a| truth.expected_reward(a))
                .collect();
            Ok(SimulatedRecord {
                encoded_full: encode_full(&raw),
                raw,
                encoded_observed: observed,
                action_index,
                propensities,
                conversion,
                reward,
                true_expected_rewards,
            })
        })
        .collect();
    let records = records.into_iter().collect::<Result<Vec<_>>>()?;
    let logged = records
        .iter()
        .map(|r| {
            LoggedSample::new(
                r.encoded_observed.clone(),
                r.action_index,
                r.reward,
                r.propensities.clone(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Simulation {
        sample: LearningSample::new(logged, historical.clone())?,
        records,
        historical: historical.clone(),
        evaluation: evaluation.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::FixedDistributionPolicy;

    fn raw(ticket: f64) -> RawCovariates {
        RawCovariates {
            ticket_price: ticket,
            lead_time: 10,
            passengers: 2,
            origin: 3,
            destination: 5,
            return_trip: true,
            trip_duration: 7,
        }
    }

    fn zero_params() -> EnvironmentParams {
        EnvironmentParams {
            alpha1: vec![0.0; FULL_DIM],
            alpha2: vec![0.0; FULL_DIM],
            alpha3: [0.0; 4],
            ..EnvironmentParams::default()
        }
    }

    #[test]
    fn default_params_are_valid() {
        let p = EnvironmentParams::default();
        p.validate().unwrap();
        assert_eq!(p.lambda_loading, 0.05);
        assert_eq!(p.fair_rate, 0.10);
        assert_eq!(p.elasticity_cap, 4.0);
    }

    #[test]
    fn premiums() {
        let p = EnvironmentParams::default();
        assert!((fair_premium(&raw(1000.0), &p) - 100.0).abs() < 1e-12);
        assert!((fair_premium(&raw(100.0), &p) - 10.0).abs() < 1e-12);
        assert!((fair_premium(&raw(2000.0), &p) - 200.0).abs() < 1e-12);
        let r = raw(1000.0);
        assert!((charged_premium(&r, 0.0, &p) - 105.0).abs() < 1e-9);
        assert!((charged_premium(&r, 0.2, &p) - 106.0).abs() < 1e-9);
        assert!((charged_premium(&r, -1.0, &p) - 100.0).abs() < 1e-9);
    }

    #[test]
    fn elasticity_with_zero_weights_is_minus_one() {
        assert_eq!(elasticity(&raw(500.0), &zero_params()), -1.0);
    }

    #[test]
    fn elasticity_cap_binds() {
        let mut p = zero_params();
        // ticket price standardized coefficient chosen so the score is 10
        let z = standardized_numerics(&raw(1500.0))[0];
        p.alpha2[0] = 10.0 / z;
        assert_eq!(elasticity(&raw(1500.0), &p), -4.0);
    }

    #[test]
    fn disabling_higher_order_matches_zero_alpha3_bitwise() {
        let p = EnvironmentParams::default();
        let off = p.with_higher_order(false);
        let zeroed = EnvironmentParams {
            alpha3: [0.0; 4],
            ..p.clone()
        };
        for t in [100.0, 777.7, 1999.0] {
            let r = raw(t);
            assert_eq!(
                elasticity(&r, &off).to_bits(),
                elasticity(&r, &zeroed).to_bits()
            );
        }
    }

    #[test]
    fn conversion_examples() {
        let t = CustomerTruth {
            baseline: 0.5,
            elasticity: -2.0,
            fair_premium: 100.0,
            lambda_loading: 0.05,
        };
        assert!((t.conversion(0.2) - 0.30).abs() < 1e-12);
        assert_eq!(t.conversion(0.0), 0.5);
        let capped = CustomerTruth {
            baseline: 0.9,
            elasticity: -4.0,
            ..t
        };
        assert_eq!(capped.conversion(-0.3), 1.0);
        // lower clamp
        let low = CustomerTruth {
            baseline: 0.5,
            elasticity: -4.0,
            ..t
        };
        assert_eq!(low.conversion(0.3), 0.0);
    }

    #[test]
    fn baseline_conversion_at_zero_action() {
        let p = EnvironmentParams::default();
        let r = raw(640.0);
        assert_eq!(conversion_probability(&r, 0.0, &p), baseline_conversion(&r, &p));
    }

    #[test]
    fn zero_sample_size_is_an_error() {
        assert!(sample_covariates(&EnvironmentParams::default(), 0).is_err());
    }

    #[test]
    fn encodings_exclude_destination() {
        let r = raw(1000.0);
        let obs = encode_observed(&r);
        let full = encode_full(&r);
        assert_eq!(obs.len(), OBSERVED_DIM);
        assert_eq!(full.len(), FULL_DIM);
        assert_eq!(&full[..OBSERVED_DIM], obs.as_slice());
        // destination 5 -> slot 3 of the destination block
        assert_eq!(full[OBSERVED_DIM + 3], 1.0);
        assert!((ticket_price_from_observed(&obs) - 1000.0).abs() < 1e-9);
        assert_eq!(observed_feature_names().len(), OBSERVED_DIM);
    }

    #[test]
    fn simulate_rejects_zero_propensity() {
        let p = EnvironmentParams::default();
        let h = ActionSpace::historical_default();
        let logging = FixedDistributionPolicy::new(vec![0.25, 0.25, 0.0, 0.25, 0.25]).unwrap();
        let err = simulate(&p, 10, &logging, &h, &h).unwrap_err();
        assert!(matches!(err, Error::Overlap(_)));
    }

    #[test]
    fn record_invariants_hold() {
        let p = EnvironmentParams::default();
        let h = ActionSpace::historical_default();
        let e = ActionSpace::extended_default();
        let sim = simulate(&p, 2000, &FixedDistributionPolicy::uniform(5), &h, &e).unwrap();
        for r in &sim.records {
            r.raw.validate().unwrap();
            let t = CustomerTruth::new(&r.raw, &p);
            let a = h.level(r.action_index);
            if r.conversion {
                assert_eq!(r.reward, t.fair_premium * (1.0 + a) * p.lambda_loading);
            } else {
                assert_eq!(r.reward, 0.0);
            }
            let upper = t.fair_premium * (1.0 + e.max_level()) * p.lambda_loading;
            for (j, &v) in r.true_expected_rewards.iter().enumerate() {
                assert!((0.0..=upper).contains(&v));
                let expect = conversion_probability(&r.raw, e.level(j), &p)
                    * (fair_premium(&r.raw, &p) * (1.0 + e.level(j)) * p.lambda_loading);
                assert_eq!(v, expect);
            }
            assert!((-4.0..0.0).contains(&t.elasticity));
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let p = EnvironmentParams::default();
        let h = ActionSpace::historical_default();
        let a = simulate(&p, 500, &FixedDistributionPolicy::uniform(5), &h, &h).unwrap();
        let b = simulate(&p, 500, &FixedDistributionPolicy::uniform(5), &h, &h).unwrap();
        assert_eq!(a.records, b.records);
        let c = simulate(&p.with_seed(1), 500, &FixedDistributionPolicy::uniform(5), &h, &h).unwrap();
        assert_ne!(a.records, c.records);
    }
}
