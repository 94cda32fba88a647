//! Data-shared Lasso on kernelized IPS targets.
//!
//! The stacked regression `V_{i,ā} ≈ z_iᵀ(w_0 + w_ā)` over all `n·m`
//! (record, action) pairs is solved by cyclic coordinate descent in
//! covariance form: with `G = ZᵀZ` and `C = ZᵀV` a sweep costs
//! `O((m + 1) p²)` regardless of `n`. `z_i` is the standardized feature
//! vector with a trailing 1, whose shared coefficient is left unpenalized.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::standardize::Standardizer;
use crate::error::{Error, Result};
use crate::kernel::KernelSet;
use crate::numeric;
use crate::seeding;
use crate::types::{DeterministicPolicy, FeatureVector, LearningSample};

/// `V_{i,ā} = R_i K_i[A_i, ā] / π̃_i(A_i)`, an `n x m` matrix whose column
/// means are the kernelized IPS values of the constant policies.
pub fn dsl_targets(sample: &LearningSample, kernels: &KernelSet) -> Result<DMatrix<f64>> {
    if kernels.len() != sample.len() || kernels.historical_len() != sample.actions().len() {
        return Err(Error::DimensionMismatch {
            context: "kernels vs sample",
            expected: sample.len(),
            actual: kernels.len(),
        });
    }
    let m = kernels.evaluation_len();
    let recs = sample.records();
    Ok(DMatrix::from_fn(sample.len(), m, |i, j| {
        let r = &recs[i];
        r.reward() * (kernels.get(i).entry(r.action_index(), j) / r.propensity())
    }))
}

/// Default per-action penalty multipliers `1/√m`.
pub fn default_gamma(m: usize) -> Vec<f64> {
    vec![1.0 / (m as f64).sqrt(); m]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DslSolverOptions {
    pub max_sweeps: usize,
    /// Convergence threshold on the largest coefficient change in a sweep.
    pub tolerance: f64,
    /// Standardize features before fitting (coefficients are always
    /// reported on the original scale).
    pub standardize: bool,
}

impl Default for DslSolverOptions {
    fn default() -> Self {
        Self {
            max_sweeps: 10_000,
            tolerance: 1e-6,
            standardize: true,
        }
    }
}

/// Fitted model on the original feature scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DslModel {
    pub w0: Vec<f64>,
    pub b0: f64,
    pub w_per_action: Vec<Vec<f64>>,
    pub b_per_action: Vec<f64>,
    pub tau: f64,
    pub gamma: Vec<f64>,
    pub standardizer: Standardizer,
    pub sweeps: usize,
}

impl DslModel {
    pub fn num_actions(&self) -> usize {
        self.w_per_action.len()
    }

    /// Action-specific scores `xᵀw_ā + b_ā` (the shared part is omitted; it
    /// does not change the argmax).
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        self.w_per_action
            .iter()
            .zip(&self.b_per_action)
            .map(|(w, b)| dot(w, x) + b)
            .collect()
    }

    /// Full fitted target `xᵀ(w_0 + w_ā) + b_0 + b_ā`.
    pub fn predict(&self, x: &[f64], action: usize) -> f64 {
        dot(&self.w0, x) + self.b0 + dot(&self.w_per_action[action], x) + self.b_per_action[action]
    }

    pub fn policy(&self) -> DslPolicy {
        DslPolicy { model: self.clone() }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `argmax_ā xᵀŵ_ā`, ties to the lowest index.
#[derive(Clone, Debug)]
pub struct DslPolicy {
    model: DslModel,
}

impl DslPolicy {
    pub fn model(&self) -> &DslModel {
        &self.model
    }
}

impl DeterministicPolicy for DslPolicy {
    fn num_actions(&self) -> usize {
        self.model.num_actions()
    }

    fn action(&self, x: &FeatureVector) -> usize {
        numeric::argmax(&self.model.scores(x))
    }
}

/// Sufficient statistics and warm-startable coordinate-descent state.
struct Solver {
    p1: usize,
    m: usize,
    gram: DMatrix<f64>,
    c: DMatrix<f64>,
    c0: Vec<f64>,
    v_norm2: f64,
    w0: Vec<f64>,
    wa: Vec<Vec<f64>>,
    g_w0: Vec<f64>,
    g_wa: Vec<Vec<f64>>,
    g_sum: Vec<f64>,
    standardizer: Standardizer,
}

impl Solver {
    fn new(targets: &DMatrix<f64>, features: &[FeatureVector], standardize: bool) -> Result<Self> {
        let (n, m) = targets.shape();
        if features.len() != n {
            return Err(Error::DimensionMismatch {
                context: "DSL features vs targets",
                expected: n,
                actual: features.len(),
            });
        }
        if n == 0 || m == 0 {
            return Err(Error::InvalidArgument("empty DSL target matrix".into()));
        }
        if targets.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite DSL targets".into()));
        }
        let p = features[0].len();
        let standardizer = if standardize {
            Standardizer::fit(features)?
        } else {
            Standardizer::identity(p)
        };
        let p1 = p + 1;
        let mut z = DMatrix::zeros(n, p1);
        let mut buf = vec![0.0; p];
        for (i, x) in features.iter().enumerate() {
            standardizer.transform_into(x, &mut buf);
            for j in 0..p {
                z[(i, j)] = buf[j];
            }
            z[(i, p)] = 1.0;
        }
        let gram = z.tr_mul(&z);
        let c = z.tr_mul(targets);
        let c0 = (0..p1).map(|j| c.row(j).sum()).collect();
        Ok(Self {
            p1,
            m,
            gram,
            c,
            c0,
            v_norm2: targets.norm_squared(),
            w0: vec![0.0; p1],
            wa: vec![vec![0.0; p1]; m],
            g_w0: vec![0.0; p1],
            g_wa: vec![vec![0.0; p1]; m],
            g_sum: vec![0.0; p1],
            standardizer,
        })
    }

    fn intercept(&self) -> usize {
        self.p1 - 1
    }

    /// Smallest `τ` for which every penalized coefficient is zero.
    fn tau_max(&self, gamma: &[f64]) -> f64 {
        let k = self.intercept();
        let gkk = self.gram[(k, k)];
        let b = self.c0[k] / (self.m as f64 * gkk);
        let mut t = 0.0f64;
        for j in 0..self.p1 {
            if j != k {
                t = t.max(2.0 * (self.c0[j] - self.m as f64 * self.gram[(j, k)] * b).abs());
            }
            for (a, g) in gamma.iter().enumerate() {
                t = t.max(2.0 * (self.c[(j, a)] - self.gram[(j, k)] * b).abs() / g);
            }
        }
        t
    }

    fn objective(&self, tau: f64, gamma: &[f64]) -> f64 {
        let k = self.intercept();
        let mut fit = self.v_norm2;
        for a in 0..self.m {
            for j in 0..self.p1 {
                let w = self.w0[j] + self.wa[a][j];
                fit += w * (self.g_w0[j] + self.g_wa[a][j]) - 2.0 * self.c[(j, a)] * w;
            }
        }
        let l1_0: f64 = (0..self.p1).filter(|&j| j != k).map(|j| self.w0[j].abs()).sum();
        let l1_a: f64 = self
            .wa
            .iter()
            .zip(gamma)
            .map(|(w, g)| g * w.iter().map(|v| v.abs()).sum::<f64>())
            .sum();
        fit + tau * (l1_0 + l1_a)
    }

    fn shift(&mut self, block: Option<usize>, j: usize, delta: f64) {
        let col = self.gram.column(j);
        match block {
            None => {
                self.w0[j] += delta;
                for (g, c) in self.g_w0.iter_mut().zip(col.iter()) {
                    *g += delta * c;
                }
            }
            Some(a) => {
                self.wa[a][j] += delta;
                for ((g, s), c) in self.g_wa[a].iter_mut().zip(self.g_sum.iter_mut()).zip(col.iter()) {
                    *g += delta * c;
                    *s += delta * c;
                }
            }
        }
    }

    /// One cyclic sweep; returns the largest absolute coefficient change.
    fn sweep(&mut self, tau: f64, gamma: &[f64]) -> f64 {
        let m = self.m as f64;
        let k = self.intercept();
        let mut max_change = 0.0f64;
        for j in 0..self.p1 {
            let gjj = self.gram[(j, j)];
            if gjj <= 0.0 {
                continue;
            }
            let r = self.c0[j] - m * self.g_w0[j] + m * gjj * self.w0[j] - self.g_sum[j];
            let thr = if j == k { 0.0 } else { tau / 2.0 };
            let new = soft_threshold(r, thr) / (m * gjj);
            let delta = new - self.w0[j];
            if delta != 0.0 {
                self.shift(None, j, delta);
                max_change = max_change.max(delta.abs());
            }
        }
        for a in 0..self.m {
            for j in 0..self.p1 {
                let gjj = self.gram[(j, j)];
                if gjj <= 0.0 {
                    continue;
                }
                let r = self.c[(j, a)] - self.g_w0[j] - self.g_wa[a][j] + gjj * self.wa[a][j];
                let new = soft_threshold(r, tau * gamma[a] / 2.0) / gjj;
                let delta = new - self.wa[a][j];
                if delta != 0.0 {
                    self.shift(Some(a), j, delta);
                    max_change = max_change.max(delta.abs());
                }
            }
        }
        max_change
    }

    fn solve(&mut self, tau: f64, gamma: &[f64], opts: &DslSolverOptions) -> Result<(usize, Vec<f64>)> {
        let mut trace = vec![self.objective(tau, gamma)];
        for sweep in 1..=opts.max_sweeps {
            let change = self.sweep(tau, gamma);
            trace.push(self.objective(tau, gamma));
            if change < opts.tolerance {
                return Ok((sweep, trace));
            }
        }
        Err(Error::NonConvergence {
            method: "data-shared Lasso",
            iterations: opts.max_sweeps,
            last_objective: *trace.last().unwrap_or(&f64::NAN),
        })
    }

    fn model(&self, tau: f64, gamma: &[f64], sweeps: usize) -> DslModel {
        let k = self.intercept();
        let s = &self.standardizer;
        let unscale = |w: &[f64]| -> (Vec<f64>, f64) {
            let coef: Vec<f64> = (0..k).map(|j| w[j] / s.scale[j]).collect();
            let b = w[k] - (0..k).map(|j| coef[j] * s.mean[j]).sum::<f64>();
            (coef, b)
        };
        let (w0, b0) = unscale(&self.w0);
        let (w_per_action, b_per_action) = self.wa.iter().map(|w| unscale(w)).unzip();
        DslModel {
            w0,
            b0,
            w_per_action,
            b_per_action,
            tau,
            gamma: gamma.to_vec(),
            standardizer: self.standardizer.clone(),
            sweeps,
        }
    }
}

fn soft_threshold(r: f64, t: f64) -> f64 {
    if r > t {
        r - t
    } else if r < -t {
        r + t
    } else {
        0.0
    }
}

fn check_penalties(tau: f64, gamma: &[f64], m: usize) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be > 0, got {tau}")));
    }
    if gamma.len() != m || gamma.iter().any(|g| !(*g > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "gamma must hold {m} positive entries"
        )));
    }
    Ok(())
}

/// Fits the data-shared Lasso for one `(τ, γ)`.
pub fn fit_dsl(
    targets: &DMatrix<f64>,
    features: &[FeatureVector],
    tau: f64,
    gamma: &[f64],
    opts: &DslSolverOptions,
) -> Result<DslModel> {
    Ok(fit_dsl_traced(targets, features, tau, gamma, opts)?.0)
}

/// Like [`fit_dsl`], also returning the objective after every sweep (the
/// first entry is the objective at zero).
pub fn fit_dsl_traced(
    targets: &DMatrix<f64>,
    features: &[FeatureVector],
    tau: f64,
    gamma: &[f64],
    opts: &DslSolverOptions,
) -> Result<(DslModel, Vec<f64>)> {
    check_penalties(tau, gamma, targets.ncols())?;
    let mut solver = Solver::new(targets, features, opts.standardize)?;
    let (sweeps, trace) = solver.solve(tau, gamma, opts)?;
    Ok((solver.model(tau, gamma, sweeps), trace))
}

/// Tuning of the data-shared Lasso on held-out kernelized IPS value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DslConfig {
    /// Fixed `τ`; when absent `τ` is chosen from a log grid below `τ_max`.
    pub tau: Option<f64>,
    pub tau_grid_size: usize,
    /// Smallest grid value as a fraction of `τ_max`.
    pub tau_min_ratio: f64,
    /// Multipliers applied to the default `γ_ā = 1/√m`.
    pub gamma_scales: Vec<f64>,
    pub held_out_fraction: f64,
    pub solver: DslSolverOptions,
}

impl Default for DslConfig {
    fn default() -> Self {
        Self {
            tau: None,
            tau_grid_size: 9,
            tau_min_ratio: 1e-4,
            gamma_scales: vec![1.0],
            held_out_fraction: 0.2,
            solver: DslSolverOptions::default(),
        }
    }
}

/// One point of the tuning path.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DslPathPoint {
    pub tau: f64,
    pub gamma_scale: f64,
    pub held_out_value: f64,
    pub sweeps: usize,
}

#[derive(Clone, Debug)]
pub struct DslTraining {
    pub model: DslModel,
    pub path: Vec<DslPathPoint>,
}

/// Splits `0..n` into (train, held-out) index lists with a seeded shuffle.
pub fn holdout_split(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "held-out fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let n_hold = ((n as f64 * fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    if n < 2 {
        return Err(Error::InvalidArgument("need at least 2 records to hold out".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeding::task_rng(seed, &[seeding::label("holdout")]));
    let mut hold = idx.split_off(n - n_hold);
    idx.sort_unstable();
    hold.sort_unstable();
    Ok((idx, hold))
}

fn rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    m.select_rows(idx)
}

/// Value of a deterministic assignment under the target matrix rows.
fn assignment_target_value(targets: &DMatrix<f64>, rows: &[usize], actions: &[usize]) -> f64 {
    let v: Vec<f64> = rows.iter().zip(actions).map(|(&i, &a)| targets[(i, a)]).collect();
    numeric::mean(&v)
}

/// Fits along a descending `τ` path (warm-started) on a training split,
/// picks the `(τ, γ)` with the best held-out kernelized IPS value of the
/// argmax policy, then refits on the full sample.
pub fn train_dsl(
    sample: &LearningSample,
    kernels: &KernelSet,
    config: &DslConfig,
    seed: u64,
) -> Result<DslTraining> {
    let targets = dsl_targets(sample, kernels)?;
    let features = sample.features();
    let m = targets.ncols();
    let base_gamma = default_gamma(m);
    let scales = if config.gamma_scales.is_empty() {
        vec![1.0]
    } else {
        config.gamma_scales.clone()
    };

    if let Some(tau) = config.tau {
        let gamma: Vec<f64> = base_gamma.iter().map(|g| g * scales[0]).collect();
        let model = fit_dsl(&targets, &features, tau, &gamma, &config.solver)?;
        return Ok(DslTraining { model, path: Vec::new() });
    }

    let (train, hold) = holdout_split(sample.len(), config.held_out_fraction, seed)?;
    let train_targets = rows(&targets, &train);
    let train_features: Vec<FeatureVector> = train.iter().map(|&i| features[i].clone()).collect();
    let mut path = Vec::new();
    let mut best: Option<(f64, f64, f64)> = None;
    for &scale in &scales {
        let gamma: Vec<f64> = base_gamma.iter().map(|g| g * scale).collect();
        let mut solver = Solver::new(&train_targets, &train_features, config.solver.standardize)?;
        for tau in tau_grid(solver.tau_max(&gamma), config) {
            let (sweeps, _) = solver.solve(tau, &gamma, &config.solver)?;
            let policy = solver.model(tau, &gamma, sweeps).policy();
            let actions: Vec<usize> = hold.iter().map(|&i| policy.action(&features[i])).collect();
            let value = assignment_target_value(&targets, &hold, &actions);
            path.push(DslPathPoint {
                tau,
                gamma_scale: scale,
                held_out_value: value,
                sweeps,
            });
            if best.map_or(true, |(v, _, _)| value > v) {
                best = Some((value, tau, scale));
            }
        }
    }
    let (_, tau, scale) = best.expect("non-empty tau grid");
    let gamma: Vec<f64> = base_gamma.iter().map(|g| g * scale).collect();
    // refit on everything, warm-started along the same path
    let mut solver = Solver::new(&targets, &features, config.solver.standardize)?;
    for t in tau_grid(solver.tau_max(&gamma), config).into_iter().filter(|t| *t > tau) {
        solver.solve(t, &gamma, &config.solver)?;
    }
    let (sweeps, _) = solver.solve(tau, &gamma, &config.solver)?;
    Ok(DslTraining {
        model: solver.model(tau, &gamma, sweeps),
        path,
    })
}

fn tau_grid(tau_max: f64, config: &DslConfig) -> Vec<f64> {
    let k = config.tau_grid_size.max(1);
    let tau_max = if tau_max > 0.0 { tau_max } else { 1e-8 };
    if k == 1 {
        return vec![tau_max];
    }
    (0..k)
        .map(|i| tau_max * config.tau_min_ratio.powf(i as f64 / (k - 1) as f64))
        .collect()
}
