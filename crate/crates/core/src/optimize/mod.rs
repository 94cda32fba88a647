//! Policy optimizers: data-shared Lasso, softmax network and
//! predict-then-optimize, plus the oracle policy used as reference.

pub mod artifact;
pub mod dsl;
pub mod mlp;
pub mod oracle;
pub mod pto;
pub mod standardize;

pub use artifact::{PolicyArtifact, PolicyModel};
pub use dsl::{
    default_gamma, dsl_targets, fit_dsl, fit_dsl_traced, train_dsl, DslConfig, DslModel,
    DslPolicy, DslSolverOptions,
};
pub use mlp::{train_mlp_on_targets, train_mlp_policy, Activation, MlpConfig, MlpPolicy};
pub use oracle::{oracle_policy, OracleSolution};
pub use pto::{fit_pto, fit_pto_labels, pto_policy, PremiumRule, PtoModel, PtoOptions, PtoPolicy};
pub use standardize::Standardizer;

use crate::numeric;
use crate::types::{DeterministicPolicy, FeatureVector, StochasticPolicy};

/// Deterministic version of a stochastic policy: its most likely action,
/// ties to the lowest index.
#[derive(Clone, Debug)]
pub struct ArgmaxPolicy<P>(pub P);

impl<P: StochasticPolicy> DeterministicPolicy for ArgmaxPolicy<P> {
    fn num_actions(&self) -> usize {
        self.0.num_actions()
    }

    fn action(&self, x: &FeatureVector) -> usize {
        numeric::argmax(&self.0.probabilities(x))
    }
}
