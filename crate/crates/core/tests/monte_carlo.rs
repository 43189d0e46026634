//! Seeded Monte Carlo checks of the estimators' sampling behaviour.

use metareg::domain::build_design;
use metareg::glmm::{compare_models, fit, ModelSpec};
use metareg::rng::child_seed;
use metareg::simulate::*;
use rayon::prelude::*;

fn two_covariates(seed: u64) -> SimConfig {
    SimConfig {
        n_studies: 50,
        estimates_per_study: EstimatesPerStudy::Poisson(20.0),
        beta_true: vec![-0.5, 1.0],
        sigma_u_true: 1.0,
        rho_true: 0.0,
        network: NetworkConfig::None,
        covariates: vec![CovariateSpec::Bernoulli { name: "x".into(), p: 0.5, level: CovariateLevel::Estimate }],
        p_hack: None,
        threshold: 1.96,
        seed,
    }
}

fn interaction_config(seed: u64, interaction: f64) -> SimConfig {
    SimConfig {
        n_studies: 30,
        estimates_per_study: EstimatesPerStudy::Fixed(10),
        beta_true: vec![-0.5, 0.5, 0.5, interaction],
        sigma_u_true: 0.8,
        covariates: vec![
            CovariateSpec::Bernoulli { name: "a".into(), p: 0.5, level: CovariateLevel::Estimate },
            CovariateSpec::Normal { name: "b".into(), mean: 0.0, sd: 1.0, level: CovariateLevel::Estimate },
            CovariateSpec::Product { name: "ab".into(), factors: ["a".into(), "b".into()] },
        ],
        ..two_covariates(seed)
    }
}

fn interaction_rejection_rate(interaction: f64, reps: usize, base_seed: u64) -> f64 {
    let rejections: Vec<bool> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let cfg = interaction_config(child_seed(base_seed, r as u64), interaction);
            let data = simulate_dataset(&cfg).unwrap().dataset;
            let base = build_design(&data, &cfg.formula_excluding(&["ab"])).unwrap();
            let full = build_design(&data, &cfg.formula()).unwrap();
            let cmp = compare_models(&ModelSpec::independent(base), &ModelSpec::independent(full)).unwrap();
            assert_eq!(cmp.df, 1);
            cmp.p_value < 0.05
        })
        .collect();
    rejections.iter().filter(|&&r| r).count() as f64 / reps as f64
}

#[test]
fn interaction_screening_has_power() {
    let rate = interaction_rejection_rate(1.0, 100, 501);
    assert!(rate >= 0.8, "power {rate}");
}

#[test]
fn interaction_screening_holds_its_size() {
    let rate = interaction_rejection_rate(0.0, 200, 502);
    assert!((0.02..=0.09).contains(&rate), "size {rate}");
}

#[test]
fn zero_variance_is_found_near_the_boundary() {
    let fits: Vec<(bool, bool)> = (0..100u64)
        .into_par_iter()
        .map(|r| {
            let cfg = SimConfig {
                n_studies: 100,
                estimates_per_study: EstimatesPerStudy::Fixed(50),
                sigma_u_true: 0.0,
                ..two_covariates(child_seed(77, r))
            };
            let data = simulate_dataset(&cfg).unwrap().dataset;
            let fitted = fit(&ModelSpec::independent(build_design(&data, &cfg.formula()).unwrap())).unwrap();
            (fitted.sigma_u < 0.15, fitted.boundary)
        })
        .collect();
    let share = fits.iter().filter(|f| f.0).count() as f64 / 100.0;
    let boundary = fits.iter().filter(|f| f.1).count();
    assert!(share >= 0.9, "{share}");
    assert!(boundary >= 30, "{boundary}");
}

#[test]
fn more_estimates_per_study_shrink_the_error() {
    let opts = RecoveryOptions::default();
    let mut cfg = two_covariates(31);
    cfg.estimates_per_study = EstimatesPerStudy::Fixed(10);
    let few = monte_carlo_recovery(&cfg, 60, &opts).unwrap();
    cfg.estimates_per_study = EstimatesPerStudy::Fixed(20);
    let many = monte_carlo_recovery(&cfg, 60, &opts).unwrap();
    assert!(many.parameters[1].rmse < few.parameters[1].rmse);
}

#[test]
fn recovery_is_deterministic() {
    let opts = RecoveryOptions::default();
    let mut cfg = two_covariates(9);
    cfg.n_studies = 15;
    let a = monte_carlo_recovery(&cfg, 6, &opts).unwrap();
    let b = monte_carlo_recovery(&cfg, 6, &opts).unwrap();
    assert_eq!(a, b);
}
