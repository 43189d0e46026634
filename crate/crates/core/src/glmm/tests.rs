use super::*;
use crate::rng;
use crate::stats::logistic;
use approx::assert_abs_diff_eq;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn design(x_rows: &[Vec<f64>], names: &[&str], y: &[f64], groups: &[usize]) -> DesignMatrix {
    let n = y.len();
    let p = names.len();
    let j = groups.iter().max().map_or(0, |m| m + 1);
    DesignMatrix {
        y: DVector::from_column_slice(y),
        x: DMatrix::from_fn(n, p, |i, k| x_rows[i][k]),
        t: y.iter().map(|&v| if v > 0.0 { 3.0 } else { 0.0 }).collect(),
        groups: groups.to_vec(),
        study_ids: (0..j).map(|s| format!("S{s}")).collect(),
        column_names: names.iter().map(|s| s.to_string()).collect(),
        threshold: 1.96,
        sqrt_n_centre: None,
        categorical: vec![],
        warnings: vec![],
    }
}

/// Intercept plus one binary covariate, normal study effects.
fn simulate(seed: u64, studies: usize, per_study: usize, beta: [f64; 2], sigma: f64) -> DesignMatrix {
    let mut r = rng::stream(seed, 0);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let (mut rows, mut y, mut groups) = (vec![], vec![], vec![]);
    for s in 0..studies {
        let u = sigma * normal.sample(&mut r);
        for _ in 0..per_study {
            let x: f64 = if r.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
            let p = logistic(beta[0] + beta[1] * x + u);
            y.push(if r.random::<f64>() < p { 1.0 } else { 0.0 });
            rows.push(vec![1.0, x]);
            groups.push(s);
        }
    }
    design(&rows, &["(Intercept)", "x"], &y, &groups)
}

fn chain_network(j: usize) -> CoauthorNetwork {
    let mut raw = DMatrix::zeros(j, j);
    for k in 1..j {
        raw[(k, k - 1)] = 1.0;
        if k % 3 == 0 {
            raw[(k - 1, k)] = 1.0;
        }
    }
    CoauthorNetwork::from_raw((0..j).map(|s| format!("S{s}")).collect(), raw).unwrap()
}

#[test]
fn single_estimate_matches_trapezoid_oracle() {
    for y in [0.0, 1.0] {
        let d = design(&[vec![1.0]], &["(Intercept)"], &[y], &[0]);
        let got = loglik_independent(&[0.0], 0.0, &d, 15).unwrap();
        let m = 10_001;
        let h = 20.0 / (m - 1) as f64;
        let mut acc = 0.0;
        for k in 0..m {
            let u = -10.0 + k as f64 * h;
            let p = logistic(u);
            let lik = if y > 0.0 { p } else { 1.0 - p };
            let w = if k == 0 || k == m - 1 { 0.5 } else { 1.0 };
            acc += w * lik * stats::normal_pdf(u);
        }
        assert_abs_diff_eq!(got, (acc * h).ln(), epsilon = 1e-6);
    }
}

#[test]
fn vanishing_variance_recovers_ordinary_logit() {
    let d = simulate(3, 12, 8, [-0.3, 0.8], 1.0);
    let beta = [-0.2, 0.5];
    let marginal = logit_loglik(&d, &DVector::from_column_slice(&beta));
    assert_abs_diff_eq!(loglik_independent(&beta, -20.0, &d, 15).unwrap(), marginal, epsilon = 1e-6);
    assert_abs_diff_eq!(loglik_sar(&beta, -20.0, 0.4, &d, &chain_network(12)).unwrap(), marginal, epsilon = 1e-6);
}

#[test]
fn relabelling_studies_is_harmless() {
    let d = simulate(5, 10, 6, [0.2, -0.7], 1.2);
    let mut relabelled = d.clone();
    relabelled.groups = d.groups.iter().map(|&g| 9 - g).collect();
    let a = loglik_independent(&[0.1, -0.4], 0.3, &d, 15).unwrap();
    let b = loglik_independent(&[0.1, -0.4], 0.3, &relabelled, 15).unwrap();
    assert_abs_diff_eq!(a, b, epsilon = 1e-10);
}

#[test]
fn quadrature_has_converged_at_fifteen_nodes() {
    let d = simulate(11, 50, 20, [-0.5, 1.0], 1.0);
    let a = loglik_independent(&[-0.5, 1.0], 0.0, &d, 15).unwrap();
    let b = loglik_independent(&[-0.5, 1.0], 0.0, &d, 51).unwrap();
    assert!(((a - b) / b).abs() < 1e-6, "{a} vs {b}");
}

#[test]
fn laplace_agrees_with_quadrature() {
    let d = simulate(17, 20, 12, [-0.5, 1.0], 1.0);
    let beta = [-0.5, 1.0];
    let aghq = loglik_independent(&beta, 0.0, &d, 15).unwrap();
    let one_node = loglik_independent(&beta, 0.0, &d, 1).unwrap();
    let joint = loglik_sar(&beta, 0.0, 0.0, &d, &chain_network(20)).unwrap();
    assert!(((joint - aghq) / aghq).abs() < 0.005, "{joint} vs {aghq}");
    // with ρ = 0 the joint Laplace factorises into per-study Laplace terms
    assert_abs_diff_eq!(joint, one_node, epsilon = 1e-8);
    assert_abs_diff_eq!(loglik_independent_laplace(&beta, 0.0, &d).unwrap(), one_node, epsilon = 1e-8);
}

#[test]
fn single_study_network_reduces_to_independent() {
    let d = simulate(2, 1, 15, [0.0, 0.5], 0.8);
    let net = CoauthorNetwork::from_raw(vec!["S0".into()], DMatrix::zeros(1, 1)).unwrap();
    let sar = loglik_sar(&[0.1, 0.5], -0.2, 0.7, &d, &net).unwrap();
    let laplace = loglik_independent(&[0.1, 0.5], -0.2, &d, 1).unwrap();
    assert_abs_diff_eq!(sar, laplace, epsilon = 1e-8);
}

#[test]
fn sar_rejects_mismatched_network() {
    let d = simulate(2, 4, 5, [0.0, 0.5], 0.8);
    assert!(loglik_sar(&[0.0, 0.0], 0.0, 0.0, &d, &chain_network(5)).is_err());
    let spec = ModelSpec::sar(d, chain_network(3));
    assert!(spec.validate().is_err());
}

#[test]
fn chi_bar_reference_values() {
    assert_abs_diff_eq!(chibar_from_lr(2.706).unwrap().p_value, 0.05, epsilon = 1e-3);
    assert!(chibar_from_lr(30.56).unwrap().p_value < 1e-7);
    assert_eq!(chibar_from_lr(0.0).unwrap().p_value, 1.0);
    assert_eq!(chibar_from_lr(-1e-9).unwrap().lr, 0.0);
    assert!(chibar_from_lr(-0.01).is_err());
}

#[test]
fn icc_reference_values() {
    assert_abs_diff_eq!(icc(1.144).unwrap(), 0.258, epsilon = 1e-3);
    assert_abs_diff_eq!(icc(1.211).unwrap(), 0.269, epsilon = 1e-3);
    assert_eq!(icc(0.0).unwrap(), 0.0);
    assert!(icc(-0.1).is_err());
}

#[test]
fn fit_recovers_a_clear_signal() {
    let d = simulate(21, 40, 20, [-0.5, 1.0], 1.0);
    let fitted = fit(&ModelSpec::independent(d)).unwrap();
    assert!(fitted.converged);
    assert!(fitted.vcov_reliable);
    assert!((fitted.beta[1] - 1.0).abs() < 0.35, "{:?}", fitted.beta);
    assert!((fitted.sigma_u - 1.0).abs() < 0.45, "{}", fitted.sigma_u);
    assert!(fitted.rho.is_none());
    assert!(fitted.loglik >= fitted.logit_loglik);
    let v = fitted.vcov_matrix();
    assert_abs_diff_eq!((&v - v.transpose()).amax(), 0.0, epsilon = 1e-12);
    assert!(v.clone().symmetric_eigen().eigenvalues.min() > -1e-8);
    assert!((0..v.nrows()).all(|i| v[(i, i)] > 0.0));
    assert_eq!(fitted.param_names, ["(Intercept)", "x", "sigma_u"]);
    assert!(fitted.lr_vs_logit().unwrap().p_value < 0.01);
}

#[test]
fn duplicated_studies_double_the_likelihood() {
    let d = simulate(8, 15, 10, [-0.2, 0.9], 0.9);
    let base = fit(&ModelSpec::independent(d.clone())).unwrap();
    let mut twice = d.clone();
    let n = d.n_obs();
    let j = d.n_studies();
    twice.x = DMatrix::from_fn(2 * n, d.n_cols(), |i, k| d.x[(i % n, k)]);
    twice.y = DVector::from_fn(2 * n, |i, _| d.y[i % n]);
    twice.t = d.t.iter().chain(&d.t).copied().collect();
    twice.groups = d.groups.iter().copied().chain(d.groups.iter().map(|g| g + j)).collect();
    twice.study_ids = (0..2 * j).map(|s| format!("S{s}")).collect();
    let doubled = fit(&ModelSpec::independent(twice)).unwrap();
    for (a, b) in base.beta.iter().zip(&doubled.beta) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-4);
    }
    assert!((doubled.loglik / base.loglik - 2.0).abs() < 1e-4);
}

#[test]
fn recoding_a_binary_covariate_flips_its_sign() {
    let d = simulate(9, 20, 10, [-0.4, 0.8], 0.7);
    let mut flipped = d.clone();
    for i in 0..d.n_obs() {
        flipped.x[(i, 1)] = 1.0 - d.x[(i, 1)];
    }
    let a = fit(&ModelSpec::independent(d)).unwrap();
    let b = fit(&ModelSpec::independent(flipped)).unwrap();
    assert_abs_diff_eq!(a.loglik, b.loglik, epsilon = 1e-6);
    assert_abs_diff_eq!(a.beta[1], -b.beta[1], epsilon = 1e-4);
    assert_abs_diff_eq!(a.beta[0] + a.beta[1], b.beta[0], epsilon = 1e-4);
}

#[test]
fn sar_with_rho_fixed_at_zero_matches_independent() {
    let d = simulate(13, 25, 12, [-0.5, 1.0], 1.0);
    let indep = fit(&ModelSpec::independent(d.clone())).unwrap();
    let mut spec = ModelSpec::sar(d, chain_network(25));
    spec.fixed_rho = Some(0.0);
    let sar = fit(&spec).unwrap();
    assert_eq!(sar.rho, Some(0.0));
    assert_eq!(sar.n_params(), 3);
    for (a, b) in indep.beta.iter().zip(&sar.beta) {
        assert!((a - b).abs() < 0.02, "{a} vs {b}");
    }
    assert!((indep.sigma_u - sar.sigma_u).abs() < 0.02);
}

#[test]
fn sar_fit_reports_rho() {
    let d = simulate(31, 30, 10, [-0.5, 1.0], 1.0);
    let fitted = fit(&ModelSpec::sar(d, chain_network(30))).unwrap();
    let rho = fitted.rho.unwrap();
    assert!(rho.abs() < RHO_BOUND);
    assert_eq!(fitted.param_names.last().unwrap(), RHO_NAME);
    assert_eq!(fitted.random_part().len(), 3);
}

#[test]
fn boundary_estimate_is_reported_as_zero() {
    let d = simulate(4, 30, 15, [0.0, 0.6], 0.0);
    let fitted = fit(&ModelSpec::independent(d)).unwrap();
    if fitted.boundary {
        assert_eq!(fitted.sigma_u, 0.0);
        assert!(fitted.random_part()[0].se.is_none());
        assert!(fitted.se(0).is_some());
    }
    assert!(fitted.sigma_u < 0.3);
}

#[test]
fn identical_specifications_compare_to_nothing() {
    let d = simulate(6, 15, 10, [-0.5, 1.0], 0.8);
    let spec = ModelSpec::independent(d);
    let cmp = compare_models(&spec, &spec).unwrap();
    assert_eq!(cmp.lr, 0.0);
    assert_eq!(cmp.df, 0);
    assert_eq!(cmp.p_value, 1.0);
}

#[test]
fn comparison_rejects_non_nested_specs() {
    let d = simulate(6, 15, 10, [-0.5, 1.0], 0.8);
    let mut other = d.clone();
    other.column_names[1] = "z".into();
    assert!(compare_models(&ModelSpec::independent(d), &ModelSpec::independent(other)).is_err());
}

#[test]
fn fitted_model_round_trips_through_json_shape() {
    let d = simulate(6, 10, 8, [-0.5, 1.0], 0.8);
    let fitted = fit(&ModelSpec::independent(d)).unwrap();
    assert_eq!(fitted.vcov.len(), fitted.n_params());
    assert_abs_diff_eq!(fitted.aic(), 2.0 * 3.0 - 2.0 * fitted.loglik, epsilon = 1e-12);
    let rows = fitted.coefficients();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.se.is_some()));
}
