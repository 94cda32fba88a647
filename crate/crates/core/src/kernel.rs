//! Kernel matrices mapping logged actions onto an evaluation grid.
//!
//! For a weight matrix `W` and design matrices `D` (historical actions) and
//! `D̄` (evaluation actions) the kernel is `K = W D (Dᵀ W D)⁻¹ D̄ᵀ`, the
//! transpose of the weighted least-squares hat map followed by prediction on
//! the evaluation grid. Column sums equal one and `Kᵀ D = D̄` for every SPD
//! `W` because the basis contains a constant. The variance-optimal kernel uses
//! `W = Σ⁻¹`, with `Σ` the conditional covariance of the per-action IPS
//! weights. Inverses are never formed; every product with an inverse is a
//! Cholesky solve.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, RwLock};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::types::{ActionSpace, LearningSample};

/// Gram matrices above this condition number trigger a warning.
pub const CONDITION_WARNING: f64 = 1e10;
/// Relative ridge added to `Σ` when jitter is enabled.
pub const RIDGE_EPSILON: f64 = 1e-8;

/// One non-constant basis function of the action.
#[derive(Clone)]
pub enum BasisFunction {
    /// `a^k`, `k >= 1`.
    Power(u32),
    Custom {
        name: String,
        f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    },
}

impl BasisFunction {
    pub fn eval(&self, a: f64) -> f64 {
        match self {
            BasisFunction::Power(k) => a.powi(*k as i32),
            BasisFunction::Custom { f, .. } => f(a),
        }
    }

    fn name(&self) -> String {
        match self {
            BasisFunction::Power(1) => "a".into(),
            BasisFunction::Power(k) => format!("a^{k}"),
            BasisFunction::Custom { name, .. } => name.clone(),
        }
    }
}

impl fmt::Debug for BasisFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Basis `f(a) = (1, f_1(a), ..., f_q(a))`; the constant is implicit.
#[derive(Clone, Debug)]
pub struct BasisSpec {
    functions: Vec<BasisFunction>,
}

impl BasisSpec {
    pub fn new(functions: Vec<BasisFunction>) -> Self {
        Self { functions }
    }

    /// Polynomial basis `1, a, ..., a^degree`.
    pub fn polynomial(degree: u32) -> Self {
        Self::new((1..=degree).map(BasisFunction::Power).collect())
    }

    pub fn linear() -> Self {
        Self::polynomial(1)
    }

    pub fn quadratic() -> Self {
        Self::polynomial(2)
    }

    /// Number of non-constant functions.
    pub fn q(&self) -> usize {
        self.functions.len()
    }

    pub fn columns(&self) -> usize {
        self.q() + 1
    }

    pub fn eval(&self, a: f64) -> Vec<f64> {
        std::iter::once(1.0)
            .chain(self.functions.iter().map(|f| f.eval(a)))
            .collect()
    }

    pub fn name(&self) -> String {
        let mut parts = vec!["1".to_string()];
        parts.extend(self.functions.iter().map(BasisFunction::name));
        format!("({})", parts.join(", "))
    }

    fn design(&self, actions: &ActionSpace) -> DMatrix<f64> {
        let cols = self.columns();
        DMatrix::from_fn(actions.len(), cols, |i, j| {
            let a = actions.level(i);
            if j == 0 {
                1.0
            } else {
                self.functions[j - 1].eval(a)
            }
        })
    }
}

impl Default for BasisSpec {
    fn default() -> Self {
        Self::quadratic()
    }
}

/// `D` on the historical grid and `D̄` on the evaluation grid.
#[derive(Clone, Debug)]
pub struct DesignMatrixPair {
    pub d: DMatrix<f64>,
    pub dbar: DMatrix<f64>,
}

impl DesignMatrixPair {
    pub fn historical_len(&self) -> usize {
        self.d.nrows()
    }

    pub fn evaluation_len(&self) -> usize {
        self.dbar.nrows()
    }
}

fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let tol = max * (m.nrows().max(m.ncols()) as f64) * f64::EPSILON * 16.0;
    sv.iter().filter(|&&s| s > tol).count()
}

/// Evaluates the basis on both grids and checks that `D` has full column rank.
pub fn build_design(
    basis: &BasisSpec,
    historical: &ActionSpace,
    evaluation: &ActionSpace,
) -> Result<DesignMatrixPair> {
    let cols = basis.columns();
    if cols > historical.len() {
        return Err(Error::InvalidArgument(format!(
            "basis {} has {cols} columns but only {} historical actions",
            basis.name(),
            historical.len()
        )));
    }
    let d = basis.design(historical);
    let dbar = basis.design(evaluation);
    if d.iter().chain(dbar.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "basis {} is not finite on the action grids",
            basis.name()
        )));
    }
    let rank = numerical_rank(&d);
    if rank < cols {
        return Err(Error::RankDeficient {
            basis: basis.name(),
            rank,
            required: cols,
        });
    }
    Ok(DesignMatrixPair { d, dbar })
}

fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square()
        && (0..m.nrows()).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol))
}

fn symmetric_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    m.clone().symmetric_eigen().eigenvalues
}

/// Ratio of extreme eigenvalues of a symmetric matrix (infinite if singular).
pub fn symmetric_condition(m: &DMatrix<f64>) -> f64 {
    let ev = symmetric_eigenvalues(m);
    let max = ev.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = ev.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Symmetric positive-definite weight matrix of the local regression.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMatrix(DMatrix<f64>);

impl WeightMatrix {
    pub fn new(w: DMatrix<f64>) -> Result<Self> {
        if !is_symmetric(&w, 1e-10) {
            return Err(Error::InvalidArgument(
                "weight matrix must be square and symmetric".into(),
            ));
        }
        if w.clone().cholesky().is_none() {
            return Err(Error::InvalidArgument(
                "weight matrix must be positive definite".into(),
            ));
        }
        Ok(Self(w))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }
}

/// `W = diag(propensities)`: the classical weighted least-squares choice.
pub fn naive_weights(propensities: &[f64]) -> Result<WeightMatrix> {
    if propensities.is_empty() {
        return Err(Error::InvalidArgument("empty propensity vector".into()));
    }
    if let Some(k) = propensities.iter().position(|&p| !(p > 0.0)) {
        return Err(Error::Overlap(format!(
            "propensity of action {k} is {} (must be > 0)",
            propensities[k]
        )));
    }
    Ok(WeightMatrix(DMatrix::from_diagonal(&DVector::from_column_slice(
        propensities,
    ))))
}

/// Conditional mean and variance of the reward for every historical action.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalMoments {
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
}

impl ConditionalMoments {
    pub fn new(mu: Vec<f64>, sigma2: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma2.len() {
            return Err(Error::DimensionMismatch {
                context: "conditional moments",
                expected: mu.len(),
                actual: sigma2.len(),
            });
        }
        if sigma2.iter().any(|&s| !(s >= 0.0)) || mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument(
                "moments must be finite with non-negative variances".into(),
            ));
        }
        Ok(Self { mu, sigma2 })
    }
}

/// Conditional covariance of the per-action IPS weights of one record.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceMatrix(DMatrix<f64>);

impl CovarianceMatrix {
    /// Validates symmetry and positive semi-definiteness (tolerance 1e-8,
    /// relative to the largest entry).
    pub fn new(sigma: DMatrix<f64>) -> Result<Self> {
        let scale = sigma.amax().max(1.0);
        if !is_symmetric(&sigma, 1e-10 * scale) {
            return Err(Error::InvalidArgument(
                "covariance must be square and symmetric".into(),
            ));
        }
        let min = symmetric_eigenvalues(&sigma)
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min < -1e-8 * scale {
            return Err(Error::InvalidArgument(format!(
                "covariance is not positive semi-definite (min eigenvalue {min:e})"
            )));
        }
        Ok(Self(sigma))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }
}

/// Covariance of `Y_j = R 1{A = a_j} / π̃_j`: diagonal
/// `σ_j²/π̃_j + μ_j²(1 - π̃_j)/π̃_j`, off-diagonal `-μ_j μ_k`.
pub fn covariance_entries(
    moments: &ConditionalMoments,
    propensities: &[f64],
) -> Result<CovarianceMatrix> {
    let d = moments.mu.len();
    if propensities.len() != d {
        return Err(Error::DimensionMismatch {
            context: "covariance propensities",
            expected: d,
            actual: propensities.len(),
        });
    }
    if let Some(k) = propensities.iter().position(|&p| !(p > 0.0)) {
        return Err(Error::Overlap(format!(
            "propensity of action {k} must be > 0"
        )));
    }
    let mu = &moments.mu;
    let sigma = DMatrix::from_fn(d, d, |j, k| {
        if j == k {
            let p = propensities[j];
            moments.sigma2[j] / p + mu[j] * mu[j] * (1.0 - p) / p
        } else {
            -mu[j] * mu[k]
        }
    });
    Ok(CovarianceMatrix(sigma))
}

/// `d x m` kernel matrix plus the condition number of the Gram matrix it was
/// solved from.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelMatrix {
    k: DMatrix<f64>,
    gram_condition: f64,
}

impl KernelMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn gram_condition(&self) -> f64 {
        self.gram_condition
    }

    pub fn entry(&self, historical: usize, evaluation: usize) -> f64 {
        self.k[(historical, evaluation)]
    }

    pub fn shape(&self) -> (usize, usize) {
        self.k.shape()
    }

    /// Largest deviations from the two kernel identities:
    /// `(max |colsum - 1|, max |Kᵀ D - D̄|)`.
    pub fn identity_errors(&self, designs: &DesignMatrixPair) -> (f64, f64) {
        let colsum = self
            .k
            .column_iter()
            .map(|c| (c.sum() - 1.0).abs())
            .fold(0.0, f64::max);
        let ktd = self.k.transpose() * &designs.d - &designs.dbar;
        (colsum, ktd.amax())
    }
}

fn gram_condition_of(r: &DMatrix<f64>) -> f64 {
    let sv = r.singular_values();
    let (max, min) = (sv.max(), sv.min());
    if min > max * r.nrows() as f64 * f64::EPSILON {
        (max / min).powi(2)
    } else {
        f64::INFINITY
    }
}

/// Kernel for `W = F Fᵀ` given `M = Fᵀ D` and a way to apply `F`.
///
/// With the thin factorization `M = Q R`, `Dᵀ W D = Rᵀ R` and
/// `K = F Q (D̄ R⁻¹)ᵀ`. The Gram matrix is never formed, so rounding grows
/// with the condition number of `M` rather than its square. A square `D`
/// (saturated basis) makes the kernel the interpolation matrix
/// `(D̄ D⁻¹)ᵀ`, which does not depend on `W` and is solved for directly.
fn project(
    designs: &DesignMatrixPair,
    m: DMatrix<f64>,
    apply_f: impl FnOnce(&DMatrix<f64>) -> Option<DMatrix<f64>>,
    context: &'static str,
) -> Result<KernelMatrix> {
    let qr = m.qr();
    let r = qr.r();
    let condition = gram_condition_of(&r);
    if condition > CONDITION_WARNING {
        log::warn!("{context}: Gram matrix condition number {condition:e}");
    }
    let singular = || Error::Singular {
        context,
        condition,
        hint: "",
    };
    if !condition.is_finite() {
        return Err(singular());
    }
    let k = if designs.d.is_square() {
        designs.d.transpose().lu().solve(&designs.dbar.transpose()).ok_or_else(singular)?
    } else {
        let zt = r.tr_solve_upper_triangular(&designs.dbar.transpose()).ok_or_else(singular)?;
        apply_f(&qr.q()).ok_or_else(singular)? * zt
    };
    Ok(KernelMatrix {
        k,
        gram_condition: condition,
    })
}

/// `K = W D (Dᵀ W D)⁻¹ D̄ᵀ`.
pub fn kernel_matrix(designs: &DesignMatrixPair, w: &WeightMatrix) -> Result<KernelMatrix> {
    let d = designs.historical_len();
    if w.dim() != d {
        return Err(Error::DimensionMismatch {
            context: "weight matrix",
            expected: d,
            actual: w.dim(),
        });
    }
    let l = w
        .matrix()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("weight matrix must be positive definite".into()))?
        .unpack();
    let m = l.transpose() * &designs.d;
    project(designs, m, |q| Some(&l * q), "Dᵀ W D")
}

/// Options for the variance-optimal kernel.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OptimalKernelOptions {
    /// Add `ε trace(Σ)/d · I` before factorizing.
    pub ridge_jitter: bool,
}

/// `K* = Σ⁻¹ D (Dᵀ Σ⁻¹ D)⁻¹ D̄ᵀ`.
pub fn optimal_kernel_matrix(
    designs: &DesignMatrixPair,
    sigma: &CovarianceMatrix,
) -> Result<KernelMatrix> {
    optimal_kernel_matrix_with(designs, sigma, OptimalKernelOptions::default())
}

pub fn optimal_kernel_matrix_with(
    designs: &DesignMatrixPair,
    sigma: &CovarianceMatrix,
    options: OptimalKernelOptions,
) -> Result<KernelMatrix> {
    let d = designs.historical_len();
    if sigma.dim() != d {
        return Err(Error::DimensionMismatch {
            context: "covariance matrix",
            expected: d,
            actual: sigma.dim(),
        });
    }
    let mut s = sigma.matrix().clone();
    if options.ridge_jitter {
        let ridge = RIDGE_EPSILON * s.trace() / d as f64;
        for i in 0..d {
            s[(i, i)] += ridge;
        }
    }
    let l = s
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular {
            context: "Σ",
            condition: symmetric_condition(&s),
            hint: "; enable ridge jitter for degenerate reward moments",
        })?
        .unpack();
    // W = Σ⁻¹ = L⁻ᵀ L⁻¹, so F = L⁻ᵀ and Fᵀ D = L⁻¹ D.
    let m = l
        .solve_lower_triangular(&designs.d)
        .ok_or(Error::Singular {
            context: "Σ",
            condition: f64::INFINITY,
            hint: "",
        })?;
    project(designs, m, |q| l.tr_solve_lower_triangular(q), "Dᵀ Σ⁻¹ D")
}

/// Conditional variance `ωᵀ Σ ω` of one record's kernelized contribution,
/// with `ω = K e` for the evaluation action `column`.
pub fn conditional_variance(kernel: &KernelMatrix, sigma: &CovarianceMatrix, column: usize) -> f64 {
    let omega = kernel.k.column(column);
    (omega.transpose() * sigma.matrix() * omega)[(0, 0)]
}

/// Spectral condition number of `W Σ`, computed through the similar
/// symmetric matrix `W^{1/2} Σ W^{1/2}`.
pub fn weighted_condition(w: &WeightMatrix, sigma: &CovarianceMatrix) -> f64 {
    let eig = w.matrix().clone().symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose();
    let sym = &root * sigma.matrix() * &root;
    symmetric_condition(&(&sym + sym.transpose()).scale(0.5))
}

/// Supplies conditional reward moments for the records of a sample.
pub trait MomentProvider: Sync {
    fn moments(&self, record: usize) -> Result<ConditionalMoments>;
}

/// Moments given record by record (e.g. the simulator's ground truth).
#[derive(Clone, Debug)]
pub struct TabulatedMoments {
    rows: Vec<ConditionalMoments>,
}

impl TabulatedMoments {
    pub fn new(rows: Vec<ConditionalMoments>) -> Self {
        Self { rows }
    }
}

impl MomentProvider for TabulatedMoments {
    fn moments(&self, record: usize) -> Result<ConditionalMoments> {
        self.rows.get(record).cloned().ok_or(Error::DimensionMismatch {
            context: "tabulated moments",
            expected: self.rows.len(),
            actual: record + 1,
        })
    }
}

/// Plug-in moments: per-action sample means and variances of the reward
/// inside quantile bins of one feature column, cross-fitted over two folds so
/// a record's own reward never enters its moments.
#[derive(Clone, Debug)]
pub struct BinnedMoments {
    bins: Vec<usize>,
    folds: Vec<usize>,
    // [fold][bin][action] -> (mean, variance) estimated on the *other* fold
    table: Vec<Vec<Vec<(f64, f64)>>>,
}

impl BinnedMoments {
    pub fn fit(sample: &LearningSample, feature: usize, num_bins: usize) -> Result<Self> {
        if feature >= sample.feature_dim() {
            return Err(Error::InvalidArgument(format!(
                "feature column {feature} outside [0, {})",
                sample.feature_dim()
            )));
        }
        let num_bins = num_bins.max(1);
        let n = sample.len();
        let d = sample.actions().len();
        let values: Vec<f64> = sample
            .records()
            .iter()
            .map(|r| r.features()[feature])
            .collect();
        let mut sorted = values.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let cuts: Vec<f64> = (1..num_bins)
            .map(|b| sorted[(b * n / num_bins).min(n - 1)])
            .collect();
        let bins: Vec<usize> = values
            .iter()
            .map(|v| cuts.iter().take_while(|&&c| *v >= c).count())
            .collect();
        let folds: Vec<usize> = (0..n).map(|i| i % 2).collect();

        // (count, sum, sum of squares) per fold, bin and action
        let mut acc = vec![vec![vec![(0usize, 0.0f64, 0.0f64); d]; num_bins]; 2];
        let mut global = vec![vec![(0usize, 0.0f64, 0.0f64); d]; 2];
        for (i, r) in sample.records().iter().enumerate() {
            let cell = &mut acc[folds[i]][bins[i]][r.action_index()];
            cell.0 += 1;
            cell.1 += r.reward();
            cell.2 += r.reward() * r.reward();
            let g = &mut global[folds[i]][r.action_index()];
            g.0 += 1;
            g.1 += r.reward();
            g.2 += r.reward() * r.reward();
        }
        let stats = |(c, s, ss): (usize, f64, f64)| -> Option<(f64, f64)> {
            if c < 2 {
                return None;
            }
            let m = s / c as f64;
            let v = ((ss - c as f64 * m * m) / (c - 1) as f64).max(0.0);
            Some((m, v))
        };
        let mut table = vec![vec![vec![(0.0, 0.0); d]; num_bins]; 2];
        for fold in 0..2 {
            let other = 1 - fold;
            for b in 0..num_bins {
                for a in 0..d {
                    let est = stats(acc[other][b][a])
                        .or_else(|| stats(global[other][a]))
                        .unwrap_or((0.0, 0.0));
                    table[fold][b][a] = est;
                }
            }
        }
        Ok(Self { bins, folds, table })
    }
}

impl MomentProvider for BinnedMoments {
    fn moments(&self, record: usize) -> Result<ConditionalMoments> {
        let cell = &self.table[self.folds[record]][self.bins[record]];
        ConditionalMoments::new(
            cell.iter().map(|c| c.0).collect(),
            cell.iter().map(|c| c.1).collect(),
        )
    }
}

/// Naive kernels keyed by the bit pattern of the propensity vector, so
/// records sharing a logging distribution share one matrix.
#[derive(Debug)]
pub struct KernelCache {
    designs: DesignMatrixPair,
    map: RwLock<HashMap<Vec<u64>, Arc<KernelMatrix>>>,
}

impl KernelCache {
    pub fn new(designs: DesignMatrixPair) -> Self {
        Self {
            designs,
            map: RwLock::new(HashMap::new()),
        }
    }

    pub fn designs(&self) -> &DesignMatrixPair {
        &self.designs
    }

    pub fn naive(&self, propensities: &[f64]) -> Result<Arc<KernelMatrix>> {
        let key: Vec<u64> = propensities.iter().map(|p| p.to_bits()).collect();
        if let Some(k) = self.map.read().expect("cache lock").get(&key) {
            return Ok(Arc::clone(k));
        }
        let k = Arc::new(kernel_matrix(&self.designs, &naive_weights(propensities)?)?);
        let mut map = self.map.write().expect("cache lock");
        Ok(Arc::clone(map.entry(key).or_insert(k)))
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// How the kernels of a [`KernelSet`] were weighted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelKind {
    /// `W = diag(propensities)` or any other fixed weight choice.
    Naive,
    /// `W = Σ⁻¹`.
    Optimal,
}

/// One kernel per record of a learning sample.
#[derive(Clone, Debug)]
pub struct KernelSet {
    kernels: Vec<Arc<KernelMatrix>>,
    historical: usize,
    evaluation: usize,
    kind: KernelKind,
}

impl KernelSet {
    pub fn from_kernels(kernels: Vec<Arc<KernelMatrix>>, kind: KernelKind) -> Result<Self> {
        let first = kernels
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty kernel set".into()))?;
        let (d, m) = first.shape();
        if let Some(bad) = kernels.iter().find(|k| k.shape() != (d, m)) {
            return Err(Error::DimensionMismatch {
                context: "kernel set",
                expected: d * m,
                actual: bad.shape().0 * bad.shape().1,
            });
        }
        Ok(Self {
            kernels,
            historical: d,
            evaluation: m,
            kind,
        })
    }

    /// Same kernel for `n` records.
    pub fn shared(kernel: KernelMatrix, n: usize, kind: KernelKind) -> Self {
        let (d, m) = kernel.shape();
        let k = Arc::new(kernel);
        Self {
            kernels: vec![k; n],
            historical: d,
            evaluation: m,
            kind,
        }
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    /// Naive kernels for every record, built once per distinct propensity vector.
    pub fn naive(sample: &LearningSample, designs: &DesignMatrixPair) -> Result<Self> {
        check_design(sample, designs)?;
        let cache = KernelCache::new(designs.clone());
        let kernels = sample
            .records()
            .iter()
            .map(|r| cache.naive(r.propensities()))
            .collect::<Result<Vec<_>>>()?;
        Self::from_kernels(kernels, KernelKind::Naive)
    }

    /// Variance-optimal kernels from per-record moments.
    pub fn optimal(
        sample: &LearningSample,
        designs: &DesignMatrixPair,
        moments: &dyn MomentProvider,
        options: OptimalKernelOptions,
    ) -> Result<Self> {
        check_design(sample, designs)?;
        let kernels = sample
            .records()
            .par_iter()
            .enumerate()
            .map(|(i, r)| {
                let sigma = covariance_entries(&moments.moments(i)?, r.propensities())?;
                Ok(Arc::new(optimal_kernel_matrix_with(designs, &sigma, options)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_kernels(kernels, KernelKind::Optimal)
    }

    pub fn get(&self, record: usize) -> &KernelMatrix {
        &self.kernels[record]
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn historical_len(&self) -> usize {
        self.historical
    }

    pub fn evaluation_len(&self) -> usize {
        self.evaluation
    }

    /// Number of distinct kernel allocations.
    pub fn distinct(&self) -> usize {
        let mut ptrs: Vec<*const KernelMatrix> = self.kernels.iter().map(Arc::as_ptr).collect();
        ptrs.sort();
        ptrs.dedup();
        ptrs.len()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            kernels: indices.iter().map(|&i| Arc::clone(&self.kernels[i])).collect(),
            historical: self.historical,
            evaluation: self.evaluation,
            kind: self.kind,
        }
    }
}

fn check_design(sample: &LearningSample, designs: &DesignMatrixPair) -> Result<()> {
    if designs.historical_len() != sample.actions().len() {
        return Err(Error::DimensionMismatch {
            context: "design rows vs historical actions",
            expected: sample.actions().len(),
            actual: designs.historical_len(),
        });
    }
    Ok(())
}
