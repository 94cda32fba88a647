//! Independent oracles for the kernels, the estimators and the simulator.

use kernel_ope::estimators::{dm_value, ips_value, kips_value, OracleRewardModel};
use kernel_ope::kernel::{
    build_design, covariance_entries, kernel_matrix, optimal_kernel_matrix, BasisSpec,
    ConditionalMoments, KernelSet, WeightMatrix,
};
use kernel_ope::simenv::{simulate, EnvConfig};
use kernel_ope::{
    numeric, ActionSpace, ConstantPolicy, FeatureVector, FixedDistributionPolicy, LearningSample,
    LoggedSample, Policy,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn spd(raw: &[f64], d: usize, ridge: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |i, j| raw[(i * d + j) % raw.len()]);
    let m = &a * a.transpose() + DMatrix::identity(d, d) * ridge;
    (&m + m.transpose()).scale(0.5)
}

/// Column `j` of the optimal kernel minimizes `ωᵀΣω` subject to
/// `Dᵀω = d̄_j`; solve the KKT system `[Σ D; Dᵀ 0]` densely.
fn kkt_column(sigma: &DMatrix<f64>, d: &DMatrix<f64>, dbar_row: DVector<f64>) -> DVector<f64> {
    let (n, q) = d.shape();
    let mut a = DMatrix::zeros(n + q, n + q);
    a.view_mut((0, 0), (n, n)).copy_from(sigma);
    a.view_mut((0, n), (n, q)).copy_from(d);
    a.view_mut((n, 0), (q, n)).copy_from(&d.transpose());
    let mut b = DVector::zeros(n + q);
    b.rows_mut(n, q).copy_from(&dbar_row);
    a.lu().solve(&b).unwrap().rows(0, n).into_owned()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn optimal_kernel_solves_constrained_variance_problem(
        raw in proptest::collection::vec(-1.0f64..1.0, 25),
        ridge in 0.01f64..1.0,
        shift in -0.3f64..0.3,
    ) {
        let h = ActionSpace::historical_default();
        let e = ActionSpace::new(vec![-0.25 + shift, 0.03 + shift, 0.22 + shift]).unwrap();
        let designs = build_design(&BasisSpec::quadratic(), &h, &e).unwrap();
        let sigma = spd(&raw, 5, ridge);
        let k = optimal_kernel_matrix(
            &designs,
            &kernel_ope::CovarianceMatrix::new(sigma.clone()).unwrap(),
        ).unwrap();
        for j in 0..e.len() {
            let want = kkt_column(&sigma, &designs.d, designs.dbar.row(j).transpose());
            let got = k.matrix().column(j);
            prop_assert!((got - &want).amax() < 1e-7 * want.amax().max(1.0));
        }
    }

    #[test]
    fn kernel_weights_reproduce_weighted_least_squares(
        raw in proptest::collection::vec(-1.0f64..1.0, 25),
        y in proptest::collection::vec(-5.0f64..5.0, 5),
        at in -0.4f64..0.4,
    ) {
        // Σ_i K_{i·} y_i is the weighted least-squares prediction at `at`.
        let h = ActionSpace::historical_default();
        let e = ActionSpace::new(vec![at]).unwrap();
        let designs = build_design(&BasisSpec::quadratic(), &h, &e).unwrap();
        let w = spd(&raw, 5, 0.2);
        let k = kernel_matrix(&designs, &WeightMatrix::new(w.clone()).unwrap()).unwrap();
        let yv = DVector::from_vec(y);
        let dt = designs.d.transpose();
        let beta = (&dt * &w * &designs.d).try_inverse().unwrap() * (&dt * &w * &yv);
        let pred = (designs.dbar.row(0) * beta)[(0, 0)];
        let via_kernel = (k.matrix().column(0).transpose() * &yv)[(0, 0)];
        prop_assert!((pred - via_kernel).abs() < 1e-8 * pred.abs().max(1.0));
    }

    #[test]
    fn saturated_kips_equals_ips_for_any_stochastic_policy(
        rewards in proptest::collection::vec(0.0f64..50.0, 12),
        raw_pol in proptest::collection::vec(0.01f64..1.0, 5),
        raw_log in proptest::collection::vec(0.05f64..1.0, 5),
    ) {
        let h = ActionSpace::historical_default();
        let s: f64 = raw_log.iter().sum();
        let log: Vec<f64> = raw_log.iter().map(|v| v / s).collect();
        let recs = rewards
            .iter()
            .enumerate()
            .map(|(i, r)| {
                LoggedSample::new(FeatureVector::new(vec![i as f64]).unwrap(), i % 5, *r, log.clone()).unwrap()
            })
            .collect();
        let sample = LearningSample::new(recs, h.clone()).unwrap();
        let s: f64 = raw_pol.iter().sum();
        let pol = FixedDistributionPolicy::new(raw_pol.iter().map(|v| v / s).collect()).unwrap();
        let designs = build_design(&BasisSpec::polynomial(4), &h, &h).unwrap();
        let ks = KernelSet::naive(&sample, &designs).unwrap();
        let ips = ips_value(&sample, Policy::Stochastic(&pol), &h).unwrap().value;
        let kips = kips_value(&sample, Policy::Stochastic(&pol), &ks).unwrap().value;
        prop_assert!((ips - kips).abs() < 1e-9 * ips.abs().max(1.0));
    }

    #[test]
    fn covariance_is_positive_semidefinite(
        mu in proptest::collection::vec(-3.0f64..3.0, 4),
        s2 in proptest::collection::vec(0.0f64..2.0, 4),
        raw in proptest::collection::vec(0.05f64..1.0, 4),
    ) {
        let t: f64 = raw.iter().sum();
        let props: Vec<f64> = raw.iter().map(|v| v / t).collect();
        let m = ConditionalMoments::new(mu, s2).unwrap();
        let sigma = covariance_entries(&m, &props).unwrap();
        let min = sigma.matrix().clone().symmetric_eigen().eigenvalues.min();
        prop_assert!(min > -1e-9 * sigma.matrix().amax().max(1.0));
    }
}

#[test]
fn simulator_frequencies_match_exact_conversion() {
    // Realized conversion rates and rewards per logged action against the
    // exact per-customer probabilities, 200k customers.
    let env = EnvConfig::default_config();
    let h = env.historical_actions.clone();
    let sim = simulate(&env.params.with_seed(77), 200_000, &env.logging_policy().unwrap(), &h, &h).unwrap();
    let truths = sim.truths(&env.params);
    for a in 0..h.len() {
        let idx: Vec<usize> = (0..sim.records.len()).filter(|&i| sim.records[i].action_index == a).collect();
        let conv: Vec<f64> = idx.iter().map(|&i| sim.records[i].conversion as u8 as f64).collect();
        let p: Vec<f64> = idx.iter().map(|&i| truths[i].conversion(h.level(a))).collect();
        let diff: Vec<f64> = conv.iter().zip(&p).map(|(c, q)| c - q).collect();
        let z = numeric::mean(&diff) / numeric::std_error(&diff);
        assert!(z.abs() < 4.0, "action {a}: conversion z = {z}");

        let r: Vec<f64> = idx.iter().map(|&i| sim.records[i].reward - sim.records[i].true_expected_rewards[a]).collect();
        let z = numeric::mean(&r) / numeric::std_error(&r);
        assert!(z.abs() < 4.0, "action {a}: reward z = {z}");
    }
}

#[test]
fn oracle_direct_method_is_exact_and_estimators_agree_on_average() {
    let env = EnvConfig::default_config();
    let h = env.historical_actions.clone();
    let sim = simulate(&env.params.with_seed(5), 50_000, &env.logging_policy().unwrap(), &h, &h).unwrap();
    let model = OracleRewardModel::new(sim.truths(&env.params));
    let p = ConstantPolicy::new(3, h.len()).unwrap();
    let truth = numeric::mean(&sim.records.iter().map(|r| r.true_expected_rewards[3]).collect::<Vec<_>>());
    let dm = dm_value(&sim.sample, &model, Policy::Deterministic(&p), &h).unwrap();
    assert!((dm.value - truth).abs() < 1e-9 * truth.abs());

    let ips = ips_value(&sim.sample, Policy::Deterministic(&p), &h).unwrap();
    let designs = build_design(&BasisSpec::quadratic(), &h, &h).unwrap();
    let kips = kips_value(&sim.sample, Policy::Deterministic(&p), &KernelSet::naive(&sim.sample, &designs).unwrap()).unwrap();
    for v in [ips, kips] {
        assert!((v.value - truth).abs() < 4.0 * v.std_error(), "{:?} {} vs {truth}", v.tag, v.value);
    }
}
