use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric;
use crate::simenv::SimulatedRecord;
use crate::types::{DeterministicPolicy, FeatureVector};

/// Record-wise optimal actions and their empirical value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSolution {
    pub actions: Vec<usize>,
    pub value: f64,
}

/// `argmax_ā ρ(x_i, ā)` for every record, ties to the lowest index.
///
/// The optimum depends on latent covariates, so it is a property of the
/// records rather than a function of the observed features; see
/// [`OracleSolution::lookup_policy`] for a feature-keyed view.
pub fn oracle_policy(records: &[SimulatedRecord]) -> Result<OracleSolution> {
    let first = records
        .first()
        .ok_or_else(|| Error::InvalidArgument("no records".into()))?;
    let m = first.true_expected_rewards.len();
    let mut actions = Vec::with_capacity(records.len());
    let mut best = Vec::with_capacity(records.len());
    for r in records {
        if r.true_expected_rewards.len() != m {
            return Err(Error::DimensionMismatch {
                context: "true expected rewards",
                expected: m,
                actual: r.true_expected_rewards.len(),
            });
        }
        let a = numeric::argmax(&r.true_expected_rewards);
        actions.push(a);
        best.push(r.true_expected_rewards[a]);
    }
    Ok(OracleSolution {
        actions,
        value: numeric::mean(&best),
    })
}

impl OracleSolution {
    /// Policy answering with the oracle action of the record whose observed
    /// features match exactly. Unknown features get action 0.
    pub fn lookup_policy(&self, records: &[SimulatedRecord]) -> LookupPolicy {
        let m = records.first().map_or(0, |r| r.true_expected_rewards.len());
        let table = records
            .iter()
            .zip(&self.actions)
            .map(|(r, a)| (feature_key(&r.encoded_observed), *a))
            .collect();
        LookupPolicy { table, m }
    }
}

fn feature_key(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| v.to_bits()).collect()
}

#[derive(Clone, Debug)]
pub struct LookupPolicy {
    table: HashMap<Vec<u64>, usize>,
    m: usize,
}

impl DeterministicPolicy for LookupPolicy {
    fn num_actions(&self) -> usize {
        self.m
    }

    fn action(&self, x: &FeatureVector) -> usize {
        self.table.get(&feature_key(x)).copied().unwrap_or(0)
    }
}
