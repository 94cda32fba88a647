//! Predict-then-optimize: a logistic conversion model, then greedy pricing.
//!
//! Score `η(x, a) = φ₁ᵀ(1, a, a²) + φ₂ᵀx + a φ₃ᵀx`, fitted by maximum
//! likelihood with damped Newton steps.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::RewardModel;
use crate::numeric::{self, sigmoid};
use crate::simenv::{ticket_price_from_observed, EnvironmentParams};
use crate::types::{ActionSpace, DeterministicPolicy, FeatureVector, LearningSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PtoModel {
    pub phi1: [f64; 3],
    pub phi2: Vec<f64>,
    pub phi3: Vec<f64>,
    /// Asymptotic standard errors in the order `(φ₁, φ₂, φ₃)`.
    pub std_errors: Vec<f64>,
    pub log_likelihood: f64,
    pub iterations: usize,
}

impl PtoModel {
    pub fn feature_dim(&self) -> usize {
        self.phi2.len()
    }

    pub fn score(&self, x: &[f64], a: f64) -> f64 {
        let mut eta = self.phi1[0] + self.phi1[1] * a + self.phi1[2] * a * a;
        for ((xj, p2), p3) in x.iter().zip(&self.phi2).zip(&self.phi3) {
            eta += xj * (p2 + a * p3);
        }
        eta
    }

    pub fn conversion(&self, x: &[f64], a: f64) -> f64 {
        sigmoid(self.score(x, a))
    }

    /// Coefficients flattened as `(φ₁, φ₂, φ₃)`.
    pub fn coefficients(&self) -> Vec<f64> {
        let mut v = self.phi1.to_vec();
        v.extend(&self.phi2);
        v.extend(&self.phi3);
        v
    }

    /// Model with coefficients `[φ1 (3), φ2 (p), φ3 (p)]` and no fit statistics.
    pub fn from_coefficients(beta: &[f64], p: usize) -> Self {
        Self {
            phi1: [beta[0], beta[1], beta[2]],
            phi2: beta[3..3 + p].to_vec(),
            phi3: beta[3 + p..3 + 2 * p].to_vec(),
            std_errors: Vec::new(),
            log_likelihood: f64::NAN,
            iterations: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PtoOptions {
    pub max_iterations: usize,
    /// Convergence threshold on `‖∇ℓ‖₂ / n`.
    pub gradient_tolerance: f64,
    /// Optional ridge penalty `(l2 / 2) ‖β‖²` on all coefficients.
    pub l2: f64,
    /// Coefficients beyond this magnitude are taken as separation.
    pub divergence_bound: f64,
}

impl Default for PtoOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            gradient_tolerance: 1e-6,
            l2: 0.0,
            divergence_bound: 1e3,
        }
    }
}

fn design_row(x: &[f64], a: f64, out: &mut [f64]) {
    let p = x.len();
    out[0] = 1.0;
    out[1] = a;
    out[2] = a * a;
    for j in 0..p {
        out[3 + j] = x[j];
        out[3 + p + j] = a * x[j];
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn log_likelihood(design: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>, l2: f64) -> f64 {
    let eta = design * beta;
    let terms: Vec<f64> = eta.iter().zip(y).map(|(e, yi)| yi * e - softplus(*e)).collect();
    numeric::pairwise_sum(&terms) - 0.5 * l2 * beta.norm_squared()
}

/// Fits the model to explicit conversion labels.
pub fn fit_pto_labels(
    features: &[FeatureVector],
    actions: &[f64],
    conversions: &[bool],
    opts: &PtoOptions,
) -> Result<PtoModel> {
    let n = features.len();
    if n == 0 || actions.len() != n || conversions.len() != n {
        return Err(Error::DimensionMismatch {
            context: "logistic fit inputs",
            expected: n,
            actual: actions.len().min(conversions.len()),
        });
    }
    let positives = conversions.iter().filter(|c| **c).count();
    if opts.l2 == 0.0 && (positives == 0 || positives == n) {
        return Err(Error::Separation(format!(
            "all {n} conversion labels are {}",
            positives == n
        )));
    }
    let p = features[0].len();
    let k = 3 + 2 * p;
    let mut design = DMatrix::zeros(n, k);
    let mut row = vec![0.0; k];
    for (i, (x, a)) in features.iter().zip(actions).enumerate() {
        design_row(x, *a, &mut row);
        for j in 0..k {
            design[(i, j)] = row[j];
        }
    }
    let y: Vec<f64> = conversions.iter().map(|c| if *c { 1.0 } else { 0.0 }).collect();

    let mut beta = DVector::zeros(k);
    let mut ll = log_likelihood(&design, &y, &beta, opts.l2);
    for iter in 0..opts.max_iterations {
        let eta = &design * &beta;
        let prob: Vec<f64> = eta.iter().map(|e| sigmoid(*e)).collect();
        let resid = DVector::from_iterator(n, prob.iter().zip(&y).map(|(pi, yi)| yi - pi));
        let grad = design.tr_mul(&resid) - &beta * opts.l2;
        if grad.norm() / (n as f64) < opts.gradient_tolerance {
            return finish(&design, &prob, beta, ll, iter, p, opts);
        }
        let hessian = information(&design, &prob, opts.l2);
        let chol = hessian.cholesky().ok_or_else(|| {
            Error::Separation("information matrix is singular".into())
        })?;
        let step = chol.solve(&grad);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let candidate = &beta + &step * t;
            let cand_ll = log_likelihood(&design, &y, &candidate, opts.l2);
            if cand_ll >= ll {
                beta = candidate;
                ll = cand_ll;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if beta.amax() > opts.divergence_bound {
            return Err(Error::Separation(format!(
                "coefficients exceed {} after {} iterations",
                opts.divergence_bound,
                iter + 1
            )));
        }
        if !accepted {
            // no ascent along the Newton direction: we are at the optimum up
            // to rounding
            let prob: Vec<f64> = (&design * &beta).iter().map(|e| sigmoid(*e)).collect();
            return finish(&design, &prob, beta, ll, iter + 1, p, opts);
        }
    }
    Err(Error::NonConvergence {
        method: "logistic Newton",
        iterations: opts.max_iterations,
        last_objective: ll,
    })
}

fn information(design: &DMatrix<f64>, prob: &[f64], l2: f64) -> DMatrix<f64> {
    let mut weighted = design.clone();
    for (i, pi) in prob.iter().enumerate() {
        let w = pi * (1.0 - pi);
        weighted.row_mut(i).scale_mut(w);
    }
    let mut h = design.tr_mul(&weighted);
    for j in 0..h.nrows() {
        h[(j, j)] += l2;
    }
    h
}

fn finish(
    design: &DMatrix<f64>,
    prob: &[f64],
    beta: DVector<f64>,
    ll: f64,
    iterations: usize,
    p: usize,
    opts: &PtoOptions,
) -> Result<PtoModel> {
    let mut model = PtoModel::from_coefficients(beta.as_slice(), p);
    model.log_likelihood = ll;
    model.iterations = iterations;
    let info = information(design, prob, opts.l2);
    model.std_errors = match info.cholesky() {
        Some(c) => c.inverse().diagonal().iter().map(|v| v.sqrt()).collect(),
        None => vec![f64::NAN; beta.len()],
    };
    Ok(model)
}

/// Fits to a learning sample; a record converted iff its reward is positive
/// (the converted reward `P_fair (1 + a) λ` is strictly positive for a > -1).
pub fn fit_pto(sample: &LearningSample, opts: &PtoOptions) -> Result<PtoModel> {
    let actions: Vec<f64> = sample
        .records()
        .iter()
        .map(|r| sample.actions().level(r.action_index()))
        .collect();
    let conversions: Vec<bool> = sample.records().iter().map(|r| r.reward() > 0.0).collect();
    fit_pto_labels(&sample.features(), &actions, &conversions, opts)
}

/// Mean log-likelihood of labelled data under a conversion model.
pub fn mean_log_likelihood(
    conversion: impl Fn(usize, f64) -> f64,
    actions: &[f64],
    conversions: &[bool],
) -> f64 {
    let terms: Vec<f64> = actions
        .iter()
        .zip(conversions)
        .enumerate()
        .map(|(i, (a, c))| {
            let p = conversion(i, *a).clamp(1e-15, 1.0 - 1e-15);
            if *c {
                p.ln()
            } else {
                (1.0 - p).ln()
            }
        })
        .collect();
    numeric::mean(&terms)
}

/// Charged and fair premium as functions of the observed features.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PremiumRule {
    pub fair_rate: f64,
    pub lambda_loading: f64,
}

impl PremiumRule {
    pub fn from_params(params: &EnvironmentParams) -> Self {
        Self {
            fair_rate: params.fair_rate,
            lambda_loading: params.lambda_loading,
        }
    }

    pub fn fair_premium(&self, x: &[f64]) -> f64 {
        self.fair_rate * ticket_price_from_observed(x)
    }

    pub fn charged_premium(&self, x: &[f64], a: f64) -> f64 {
        self.fair_premium(x) * (1.0 + (1.0 + a) * self.lambda_loading)
    }

    /// `P(x, a) − P_fair(x)`.
    pub fn margin(&self, x: &[f64], a: f64) -> f64 {
        self.fair_premium(x) * (1.0 + a) * self.lambda_loading
    }
}

/// `ϱ̂(x, a) = p̂(x, a) (P(x, a) − P_fair(x))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PtoRewardModel {
    pub model: PtoModel,
    pub premium: PremiumRule,
}

impl RewardModel for PtoRewardModel {
    fn predict(&self, _record: usize, x: &FeatureVector, action: f64) -> f64 {
        self.model.conversion(x, action) * self.premium.margin(x, action)
    }
}

/// `argmax_ā ϱ̂(x, ā)` over the evaluation grid, ties to the lowest index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PtoPolicy {
    pub reward: PtoRewardModel,
    pub evaluation: ActionSpace,
}

impl PtoPolicy {
    pub fn expected_rewards(&self, x: &FeatureVector) -> Vec<f64> {
        self.evaluation
            .levels()
            .iter()
            .map(|&a| self.reward.predict(0, x, a))
            .collect()
    }
}

impl DeterministicPolicy for PtoPolicy {
    fn num_actions(&self) -> usize {
        self.evaluation.len()
    }

    fn action(&self, x: &FeatureVector) -> usize {
        numeric::argmax(&self.expected_rewards(x))
    }
}

pub fn pto_policy(model: &PtoModel, evaluation: &ActionSpace, premium: PremiumRule) -> PtoPolicy {
    PtoPolicy {
        reward: PtoRewardModel {
            model: model.clone(),
            premium,
        },
        evaluation: evaluation.clone(),
    }
}
