//! Synthetic literatures with known ground truth.
//!
//! Every random quantity is drawn from its own ChaCha8 stream of the
//! configured seed, so a dataset is a pure function of its configuration.

use std::collections::BTreeSet;

use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{self, build_design, level_column_name, Dataset, EstimateRecord, Formula, StudyRecord, Term, Value};
use crate::error::{Error, Result};
use crate::glmm::{self, ModelSpec, RandomStructure};
use crate::network::{build_adjacency, CoauthorNetwork};
use crate::rng::{self, StreamRng};
use crate::stats;

/// Width of the band below the threshold from which p-hacked values are moved.
pub const P_HACK_BAND: f64 = 0.3;

const STREAM_NETWORK: u64 = 0;
const STREAM_EFFECTS: u64 = 1;
const STREAM_ESTIMATES: u64 = 2;
const STREAM_P_HACK: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatesPerStudy {
    Fixed(usize),
    /// Poisson with this mean, at least one estimate per study.
    Poisson(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateLevel {
    #[default]
    Estimate,
    Study,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateSpec {
    Bernoulli {
        name: String,
        p: f64,
        #[serde(default)]
        level: CovariateLevel,
    },
    Normal {
        name: String,
        mean: f64,
        sd: f64,
        #[serde(default)]
        level: CovariateLevel,
    },
    /// The first level is the reference.
    Categorical {
        name: String,
        levels: Vec<String>,
        probs: Vec<f64>,
        #[serde(default)]
        level: CovariateLevel,
    },
    /// Product of two earlier numeric covariates.
    Product { name: String, factors: [String; 2] },
}

impl CovariateSpec {
    pub fn name(&self) -> &str {
        match self {
            CovariateSpec::Bernoulli { name, .. }
            | CovariateSpec::Normal { name, .. }
            | CovariateSpec::Categorical { name, .. }
            | CovariateSpec::Product { name, .. } => name,
        }
    }

    fn n_columns(&self) -> usize {
        match self {
            CovariateSpec::Categorical { levels, .. } => levels.len().saturating_sub(1),
            _ => 1,
        }
    }

    fn level(&self) -> CovariateLevel {
        match self {
            CovariateSpec::Bernoulli { level, .. }
            | CovariateSpec::Normal { level, .. }
            | CovariateSpec::Categorical { level, .. } => *level,
            CovariateSpec::Product { .. } => CovariateLevel::Estimate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedNetwork {
    pub author_pool: usize,
    /// Mean number of studies each author contributes to.
    pub studies_per_author: f64,
    pub year_min: i32,
    pub year_max: i32,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkConfig {
    #[default]
    None,
    Generated(GeneratedNetwork),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PHackConfig {
    pub threshold: f64,
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_studies: usize,
    pub estimates_per_study: EstimatesPerStudy,
    /// Intercept first, then one entry per design column of `covariates`.
    pub beta_true: Vec<f64>,
    pub sigma_u_true: f64,
    #[serde(default)]
    pub rho_true: f64,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub covariates: Vec<CovariateSpec>,
    #[serde(default)]
    pub p_hack: Option<PHackConfig>,
    pub threshold: f64,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_studies == 0 {
            return Err(Error::invalid("n_studies must be positive"));
        }
        match self.estimates_per_study {
            EstimatesPerStudy::Fixed(0) => return Err(Error::invalid("estimates_per_study must be positive")),
            EstimatesPerStudy::Poisson(m) if !(m > 0.0 && m.is_finite()) => {
                return Err(Error::invalid("Poisson mean must be positive"))
            }
            _ => {}
        }
        if !(self.sigma_u_true >= 0.0 && self.sigma_u_true.is_finite()) {
            return Err(Error::invalid("sigma_u_true must be >= 0"));
        }
        if !(self.rho_true.abs() < 1.0) {
            return Err(Error::invalid("rho_true must lie in (-1, 1)"));
        }
        if !self.threshold.is_finite() {
            return Err(Error::invalid("threshold must be finite"));
        }
        let mut seen: Vec<&str> = Vec::new();
        for c in &self.covariates {
            if seen.contains(&c.name()) || matches!(c.name(), "published" | "year" | "sample_size") {
                return Err(Error::invalid(format!("covariate name '{}' is duplicated or reserved", c.name())));
            }
            match c {
                CovariateSpec::Bernoulli { p, .. } if !(0.0..=1.0).contains(p) => {
                    return Err(Error::invalid(format!("'{}': p must lie in [0, 1]", c.name())))
                }
                CovariateSpec::Normal { sd, mean, .. } if !(*sd >= 0.0 && mean.is_finite()) => {
                    return Err(Error::invalid(format!("'{}': sd must be >= 0", c.name())))
                }
                CovariateSpec::Categorical { levels, probs, .. } => {
                    if levels.len() < 2 || levels.len() != probs.len() {
                        return Err(Error::invalid(format!("'{}': need >= 2 levels with one probability each", c.name())));
                    }
                    if probs.iter().any(|p| !(*p >= 0.0)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                        return Err(Error::invalid(format!("'{}': probabilities must be >= 0 and sum to 1", c.name())));
                    }
                    if levels.iter().any(|l| l.parse::<f64>().is_ok()) {
                        return Err(Error::invalid(format!("'{}': levels must not be numbers", c.name())));
                    }
                }
                CovariateSpec::Product { factors, .. } => {
                    for f in factors {
                        let ok = self.covariates.iter().take_while(|o| o.name() != c.name()).any(|o| {
                            o.name() == f && matches!(o, CovariateSpec::Bernoulli { .. } | CovariateSpec::Normal { .. })
                        });
                        if !ok {
                            return Err(Error::invalid(format!(
                                "'{}': factor '{f}' must be an earlier numeric covariate",
                                c.name()
                            )));
                        }
                    }
                }
                _ => {}
            }
            seen.push(c.name());
        }
        let p = 1 + self.covariates.iter().map(CovariateSpec::n_columns).sum::<usize>();
        if self.beta_true.len() != p {
            return Err(Error::invalid(format!("beta_true has {} entries, the covariates need {p}", self.beta_true.len())));
        }
        if let Some(ph) = self.p_hack {
            if !(0.0..=1.0).contains(&ph.intensity) {
                return Err(Error::invalid("p-hacking intensity must lie in [0, 1]"));
            }
        }
        if let NetworkConfig::Generated(g) = &self.network {
            if g.author_pool == 0 || g.year_min > g.year_max || !(g.studies_per_author > 0.0) {
                return Err(Error::invalid("infeasible network configuration"));
            }
            if (g.author_pool as f64) * g.studies_per_author < self.n_studies as f64 {
                return Err(Error::invalid(format!(
                    "infeasible network configuration: {} authors x {} studies each cannot cover {} studies",
                    g.author_pool, g.studies_per_author, self.n_studies
                )));
            }
        }
        Ok(())
    }

    /// The analysis formula matching the generating model.
    pub fn formula(&self) -> Formula {
        self.formula_excluding(&[])
    }

    /// As [`SimConfig::formula`], leaving out the named covariates.
    pub fn formula_excluding(&self, excluded: &[&str]) -> Formula {
        let terms = self
            .covariates
            .iter()
            .filter(|c| !excluded.contains(&c.name()))
            .map(|c| match c {
                CovariateSpec::Categorical { name, levels, .. } => {
                    Term::Categorical { name: name.clone(), reference: Some(levels[0].clone()) }
                }
                other => Term::Numeric { name: other.name().to_string() },
            })
            .collect();
        Formula::new(self.threshold, terms)
    }

    /// Design column names in `beta_true` order.
    pub fn column_names(&self) -> Vec<String> {
        let mut names = vec![domain::INTERCEPT.to_string()];
        for c in &self.covariates {
            match c {
                CovariateSpec::Categorical { name, levels, .. } => {
                    let mut rest: Vec<&String> = levels[1..].iter().collect();
                    rest.sort();
                    names.extend(rest.into_iter().map(|l| level_column_name(name, l)));
                }
                other => names.push(other.name().to_string()),
            }
        }
        names
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub column_names: Vec<String>,
    pub beta: Vec<f64>,
    pub sigma_u: f64,
    pub rho: f64,
    pub threshold: f64,
    /// Realised study effects (after SAR filtering when a network is used).
    pub study_effects: IndexMap<String, f64>,
    pub n_estimates: usize,
    pub n_p_hacked: usize,
}

#[derive(Debug, Clone)]
pub struct Simulated {
    pub dataset: Dataset,
    pub truth: Truth,
    pub network: Option<CoauthorNetwork>,
}

fn draw_level(r: &mut StreamRng, levels: &[String], probs: &[f64]) -> String {
    let mut u: f64 = r.random();
    for (l, p) in levels.iter().zip(probs) {
        if u < *p {
            return l.clone();
        }
        u -= p;
    }
    levels.last().expect("validated").clone()
}

fn draw_covariate(r: &mut StreamRng, spec: &CovariateSpec) -> Value {
    match spec {
        CovariateSpec::Bernoulli { p, .. } => Value::Real(if r.random::<f64>() < *p { 1.0 } else { 0.0 }),
        CovariateSpec::Normal { mean, sd, .. } => {
            let z: f64 = r.sample(rand_distr::StandardNormal);
            Value::Real(mean + sd * z)
        }
        CovariateSpec::Categorical { levels, probs, .. } => Value::Level(draw_level(r, levels, probs)),
        CovariateSpec::Product { .. } => unreachable!("products are derived"),
    }
}

/// Authors and years for every study.
fn generate_studies(config: &SimConfig) -> Result<Vec<StudyRecord>> {
    let mut r = rng::stream(config.seed, STREAM_NETWORK);
    let ids: Vec<String> = (0..config.n_studies).map(|j| format!("S{:03}", j + 1)).collect();
    let mut studies = Vec::with_capacity(config.n_studies);
    for id in ids {
        let (authors, year) = match &config.network {
            NetworkConfig::None => (BTreeSet::from([format!("author_{id}")]), 2000 + r.random_range(0..20)),
            NetworkConfig::Generated(g) => {
                let mean_authors = g.author_pool as f64 * g.studies_per_author / config.n_studies as f64;
                let extra = if mean_authors > 1.0 {
                    Poisson::new(mean_authors - 1.0).map_err(|e| Error::invalid(e.to_string()))?.sample(&mut r) as usize
                } else {
                    0
                };
                let k = (1 + extra).min(g.author_pool);
                let picked = index::sample(&mut r, g.author_pool, k);
                let authors = picked.iter().map(|a| format!("A{:03}", a + 1)).collect();
                (authors, r.random_range(g.year_min..=g.year_max))
            }
        };
        studies.push(StudyRecord {
            study_id: id,
            authors,
            year,
            published: r.random::<f64>() < 0.6,
            sample_size: r.random_range(50..=5000),
            study_covariates: IndexMap::new(),
        });
    }
    Ok(studies)
}

/// SAR-filtered (or independent) study effects.
fn study_effects(config: &SimConfig, net: Option<&CoauthorNetwork>) -> Result<Vec<f64>> {
    let mut r = rng::stream(config.seed, STREAM_EFFECTS);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let u: Vec<f64> = (0..config.n_studies).map(|_| config.sigma_u_true * normal.sample(&mut r)).collect();
    if config.sigma_u_true == 0.0 {
        return Ok(vec![0.0; config.n_studies]);
    }
    match net {
        Some(net) if config.rho_true != 0.0 => sar_filter(&u, config.rho_true, net),
        _ => Ok(u),
    }
}

/// `v = (I − ρW)⁻¹ u`.
pub fn sar_filter(u: &[f64], rho: f64, net: &CoauthorNetwork) -> Result<Vec<f64>> {
    let j = net.len();
    let a = DMatrix::identity(j, j) - &net.row_std_w * rho;
    let v = a
        .lu()
        .solve(&DVector::from_column_slice(u))
        .ok_or_else(|| Error::Singular(format!("I - {rho}W is singular")))?;
    Ok(v.iter().copied().collect())
}

pub fn simulate_dataset(config: &SimConfig) -> Result<Simulated> {
    config.validate()?;
    let mut studies = generate_studies(config)?;
    let network = match config.network {
        NetworkConfig::None => None,
        NetworkConfig::Generated(_) => Some(build_adjacency(&studies)?),
    };
    let effects = study_effects(config, network.as_ref())?;

    let mut r = rng::stream(config.seed, STREAM_ESTIMATES);
    let beta = &config.beta_true;
    let mut estimates = Vec::new();
    let mut t_values = Vec::new();
    for (j, study) in studies.iter_mut().enumerate() {
        for spec in config.covariates.iter().filter(|c| c.level() == CovariateLevel::Study) {
            let v = draw_covariate(&mut r, spec);
            study.study_covariates.insert(spec.name().to_string(), v);
        }
        let n_j = match config.estimates_per_study {
            EstimatesPerStudy::Fixed(n) => n,
            EstimatesPerStudy::Poisson(m) => {
                (Poisson::new(m).map_err(|e| Error::invalid(e.to_string()))?.sample(&mut r) as usize).max(1)
            }
        };
        for k in 0..n_j {
            let mut covariates = IndexMap::new();
            let mut eta = beta[0] + effects[j];
            let mut col = 1;
            for spec in &config.covariates {
                let value = match spec {
                    CovariateSpec::Product { factors, .. } => {
                        let get = |f: &str| {
                            covariates
                                .get(f)
                                .or_else(|| study.study_covariates.get(f))
                                .and_then(Value::as_real)
                                .expect("validated factor")
                        };
                        Value::Real(get(&factors[0]) * get(&factors[1]))
                    }
                    _ if spec.level() == CovariateLevel::Study => study.study_covariates[spec.name()].clone(),
                    _ => draw_covariate(&mut r, spec),
                };
                match (spec, &value) {
                    (CovariateSpec::Categorical { name, levels, .. }, Value::Level(l)) => {
                        let mut rest: Vec<&String> = levels[1..].iter().collect();
                        rest.sort();
                        if let Some(pos) = rest.iter().position(|x| *x == l) {
                            eta += beta[col + pos];
                        }
                        col += rest.len();
                        let _ = name;
                    }
                    (_, v) => {
                        eta += beta[col] * v.as_real().expect("numeric covariate");
                        col += 1;
                    }
                }
                if spec.level() == CovariateLevel::Estimate {
                    covariates.insert(spec.name().to_string(), value);
                }
            }
            // P(t > threshold) = logistic(eta)
            let z: f64 = r.sample(rand_distr::StandardNormal);
            let t = config.threshold + stats::normal_quantile(stats::logistic(eta)) + z;
            t_values.push(t);
            estimates.push(EstimateRecord {
                estimate_id: format!("{}_{:03}", study.study_id, k + 1),
                study_id: study.study_id.clone(),
                raw_effect: 0.0,
                std_error: 1.0,
                negative_is_good: false,
                covariates,
            });
        }
    }

    let mut n_p_hacked = 0;
    if let Some(ph) = config.p_hack {
        let hacked = inject_p_hacking(&t_values, ph.threshold, ph.intensity, rng::child_seed(config.seed, STREAM_P_HACK))?;
        n_p_hacked = hacked.iter().zip(&t_values).filter(|(a, b)| a != b).count();
        t_values = hacked;
    }
    for (e, t) in estimates.iter_mut().zip(&t_values) {
        e.raw_effect = *t;
    }

    let n_estimates = estimates.len();
    let study_effects = studies.iter().map(|s| s.study_id.clone()).zip(effects).collect();
    let dataset = Dataset::new(estimates, studies)?;
    Ok(Simulated {
        dataset,
        truth: Truth {
            column_names: config.column_names(),
            beta: config.beta_true.clone(),
            sigma_u: config.sigma_u_true,
            rho: config.rho_true,
            threshold: config.threshold,
            study_effects,
            n_estimates,
            n_p_hacked,
        },
        network,
    })
}

/// Move each value in `[threshold − 0.3, threshold)` with probability
/// `intensity` to a uniform draw on `[threshold, threshold + 0.3]`.
pub fn inject_p_hacking(t_samples: &[f64], threshold: f64, intensity: f64, seed: u64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&intensity) {
        return Err(Error::invalid(format!("intensity must lie in [0, 1], got {intensity}")));
    }
    let mut r = rng::stream(seed, 0);
    Ok(t_samples
        .iter()
        .map(|&t| {
            // two draws per value keep streams aligned across intensities
            let (coin, pos): (f64, f64) = (r.random(), r.random());
            if t >= threshold - P_HACK_BAND && t < threshold && coin < intensity {
                threshold + P_HACK_BAND * pos
            } else {
                t
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryStructure {
    #[default]
    Independent,
    Sar,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryOptions {
    pub structure: RecoveryStructure,
    pub quadrature_nodes: usize,
}

impl Default for RecoveryOptions {
    fn default() -> Self {
        RecoveryOptions { structure: RecoveryStructure::Independent, quadrature_nodes: glmm::DEFAULT_NODES }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterRecovery {
    pub name: String,
    pub truth: f64,
    pub mean_estimate: f64,
    pub bias: f64,
    pub rmse: f64,
    /// Share of replications whose 95% Wald interval covers the truth,
    /// among those with a standard error.
    pub coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub replications: usize,
    pub successful: usize,
    pub failures: usize,
    pub not_converged: usize,
    pub parameters: Vec<ParameterRecovery>,
    /// Point estimates of every successful replication, in replication order.
    pub estimates: Vec<Vec<f64>>,
}

/// One seeded replication: simulate, then fit the configured structure.
pub fn fit_replication(config: &SimConfig, options: &RecoveryOptions) -> Result<(glmm::FittedModel, Simulated)> {
    let sim = simulate_dataset(config)?;
    let design = build_design(&sim.dataset, &config.formula())?;
    let mut spec = match options.structure {
        RecoveryStructure::Independent => ModelSpec::independent(design),
        RecoveryStructure::Sar => {
            let net = match &sim.network {
                Some(n) => n.clone(),
                None => build_adjacency(sim.dataset.studies().values())?,
            };
            ModelSpec { random_structure: RandomStructure::SarNetwork(net), ..ModelSpec::independent(design) }
        }
    };
    spec.quadrature_nodes = options.quadrature_nodes;
    Ok((glmm::fit(&spec)?, sim))
}

/// Bias, RMSE and interval coverage over seeded replications. Replication
/// `r` uses seed `child_seed(config.seed, r)`; replications run in parallel
/// and are aggregated in index order.
pub fn monte_carlo_recovery(config: &SimConfig, replications: usize, options: &RecoveryOptions) -> Result<RecoveryReport> {
    if replications == 0 {
        return Err(Error::invalid("replications must be >= 1"));
    }
    config.validate()?;
    let with_rho = options.structure == RecoveryStructure::Sar;
    let mut names = config.column_names();
    let mut truth = config.beta_true.clone();
    names.push(glmm::SIGMA_NAME.into());
    truth.push(config.sigma_u_true);
    if with_rho {
        names.push(glmm::RHO_NAME.into());
        truth.push(config.rho_true);
    }

    let outcomes: Vec<Result<glmm::FittedModel>> = (0..replications)
        .into_par_iter()
        .map(|r| {
            let cfg = SimConfig { seed: rng::child_seed(config.seed, r as u64), ..config.clone() };
            fit_replication(&cfg, options).map(|(f, _)| f)
        })
        .collect();

    let k = truth.len();
    let (mut failures, mut not_converged) = (0, 0);
    let mut estimates = Vec::new();
    let mut covered = vec![0usize; k];
    let mut with_se = vec![0usize; k];
    for outcome in outcomes {
        let fitted = match outcome {
            Ok(f) => f,
            Err(_) => {
                failures += 1;
                continue;
            }
        };
        if !fitted.converged {
            not_converged += 1;
            continue;
        }
        let p = fitted.beta.len();
        let mut point = fitted.beta.clone();
        point.push(fitted.sigma_u);
        if with_rho {
            point.push(fitted.rho.unwrap_or(0.0));
        }
        for i in 0..k {
            let se = if i == p && fitted.boundary { None } else { fitted.se(i) };
            if let Some(se) = se {
                with_se[i] += 1;
                if (point[i] - truth[i]).abs() <= 1.96 * se {
                    covered[i] += 1;
                }
            }
        }
        estimates.push(point);
    }
    let successful = estimates.len();
    let parameters = (0..k)
        .map(|i| {
            let values: Vec<f64> = estimates.iter().map(|e| e[i]).collect();
            let mean = if values.is_empty() { f64::NAN } else { stats::mean(&values) };
            let mse = values.iter().map(|v| (v - truth[i]).powi(2)).sum::<f64>() / values.len().max(1) as f64;
            ParameterRecovery {
                name: names[i].clone(),
                truth: truth[i],
                mean_estimate: mean,
                bias: mean - truth[i],
                rmse: if values.is_empty() { f64::NAN } else { mse.sqrt() },
                coverage: (with_se[i] > 0).then(|| covered[i] as f64 / with_se[i] as f64),
            }
        })
        .collect();
    Ok(RecoveryReport { replications, successful, failures, not_converged, parameters, estimates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glmm::sigma_matrix;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn base_config(seed: u64) -> SimConfig {
        SimConfig {
            n_studies: 30,
            estimates_per_study: EstimatesPerStudy::Poisson(12.0),
            beta_true: vec![-0.5, 1.0, 0.4, -0.6],
            sigma_u_true: 0.8,
            rho_true: 0.0,
            network: NetworkConfig::None,
            covariates: vec![
                CovariateSpec::Bernoulli { name: "x1".into(), p: 0.5, level: CovariateLevel::Estimate },
                CovariateSpec::Categorical {
                    name: "aim".into(),
                    levels: vec!["rd".into(), "investment".into(), "employment".into()],
                    probs: vec![0.4, 0.3, 0.3],
                    level: CovariateLevel::Estimate,
                },
            ],
            p_hack: None,
            threshold: 1.96,
            seed,
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = simulate_dataset(&base_config(7)).unwrap();
        let b = simulate_dataset(&base_config(7)).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.truth, b.truth);
        let c = simulate_dataset(&base_config(8)).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn zero_variance_means_zero_effects() {
        let mut cfg = base_config(3);
        cfg.sigma_u_true = 0.0;
        cfg.rho_true = 0.6;
        let sim = simulate_dataset(&cfg).unwrap();
        assert!(sim.truth.study_effects.values().all(|&v| v == 0.0));
    }

    #[test]
    fn poisson_totals_concentrate() {
        for seed in 0..100 {
            let cfg = SimConfig {
                n_studies: 50,
                estimates_per_study: EstimatesPerStudy::Poisson(20.0),
                beta_true: vec![0.0],
                covariates: vec![],
                ..base_config(seed)
            };
            let n = simulate_dataset(&cfg).unwrap().dataset.n_estimates();
            assert!((700..=1300).contains(&n), "seed {seed}: {n}");
        }
    }

    #[test]
    fn design_columns_follow_beta_order() {
        let cfg = base_config(1);
        let sim = simulate_dataset(&cfg).unwrap();
        let design = build_design(&sim.dataset, &cfg.formula()).unwrap();
        assert_eq!(design.column_names, cfg.column_names());
        assert_eq!(design.column_names, ["(Intercept)", "x1", "aim[employment]", "aim[investment]"]);
    }

    #[test]
    fn exceedance_matches_the_logistic_probability() {
        let cfg = SimConfig {
            n_studies: 200,
            estimates_per_study: EstimatesPerStudy::Fixed(50),
            beta_true: vec![0.7],
            sigma_u_true: 0.0,
            covariates: vec![],
            ..base_config(5)
        };
        let sim = simulate_dataset(&cfg).unwrap();
        let t = sim.dataset.t_values();
        let share = t.iter().filter(|&&v| v > cfg.threshold).count() as f64 / t.len() as f64;
        assert!((share - stats::logistic(0.7)).abs() < 0.015, "{share}");
    }

    #[test]
    fn product_covariate_is_the_product() {
        let mut cfg = base_config(2);
        cfg.covariates = vec![
            CovariateSpec::Bernoulli { name: "a".into(), p: 0.5, level: CovariateLevel::Estimate },
            CovariateSpec::Normal { name: "b".into(), mean: 0.0, sd: 1.0, level: CovariateLevel::Study },
            CovariateSpec::Product { name: "ab".into(), factors: ["a".into(), "b".into()] },
        ];
        let sim = simulate_dataset(&cfg).unwrap();
        let d = &sim.dataset;
        for e in d.estimates() {
            let a = d.covariate(e, "a").unwrap().as_real().unwrap();
            let b = d.covariate(e, "b").unwrap().as_real().unwrap();
            assert_eq!(d.covariate(e, "ab").unwrap().as_real().unwrap(), a * b);
        }
        assert_eq!(cfg.formula_excluding(&["ab"]).terms.len(), 2);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = base_config(1);
        cfg.beta_true.pop();
        assert!(simulate_dataset(&cfg).is_err());
        let mut cfg = base_config(1);
        cfg.network = NetworkConfig::Generated(GeneratedNetwork {
            author_pool: 5,
            studies_per_author: 1.0,
            year_min: 2000,
            year_max: 2010,
        });
        assert!(simulate_dataset(&cfg).is_err());
        let mut cfg = base_config(1);
        cfg.p_hack = Some(PHackConfig { threshold: 1.96, intensity: 1.5 });
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sar_effects_have_the_sar_covariance() {
        let mut cfg = base_config(11);
        cfg.n_studies = 6;
        cfg.sigma_u_true = 1.2;
        cfg.rho_true = 0.5;
        cfg.network = NetworkConfig::Generated(GeneratedNetwork {
            author_pool: 4,
            studies_per_author: 3.0,
            year_min: 2000,
            year_max: 2008,
        });
        let net = simulate_dataset(&cfg).unwrap().network.unwrap();
        assert!(net.edge_count() > 0);
        let target = sigma_matrix(1.2, 0.5, &net).unwrap();
        let draws = 10_000;
        let j = net.len();
        let mut acc = DMatrix::<f64>::zeros(j, j);
        let mut r = rng::stream(42, 0);
        for _ in 0..draws {
            let u: Vec<f64> = (0..j).map(|_| 1.2 * r.sample::<f64, _>(rand_distr::StandardNormal)).collect();
            let v = DVector::from_vec(sar_filter(&u, 0.5, &net).unwrap());
            acc += &v * v.transpose();
        }
        acc /= draws as f64;
        for i in 0..j {
            for k in 0..j {
                // 5% of the entry's scale; exactly relative on the diagonal
                let scale = (target[(i, i)] * target[(k, k)]).sqrt();
                let (a, b) = (acc[(i, k)], target[(i, k)]);
                assert!((a - b).abs() < 0.05 * scale, "({i},{k}): {a} vs {b}");
            }
        }
    }

    #[test]
    fn p_hacking_examples() {
        let mut r = rng::stream(1, 9);
        let t: Vec<f64> = (0..10_000).map(|_| r.random_range(0.0..3.0)).collect();
        assert_eq!(inject_p_hacking(&t, 1.96, 0.0, 5).unwrap(), t);
        let all = inject_p_hacking(&t, 1.96, 1.0, 5).unwrap();
        assert!(all.iter().all(|&v| !(1.66..1.96).contains(&v)));
        let in_band = |xs: &[f64]| xs.iter().filter(|&&v| (1.66..1.96).contains(&v)).count() as f64;
        let half = inject_p_hacking(&t, 1.96, 0.5, 5).unwrap();
        let ratio = in_band(&half) / in_band(&t);
        assert!((ratio - 0.5).abs() < 0.05, "{ratio}");
        assert!(inject_p_hacking(&t, 1.96, -0.1, 5).is_err());
    }

    #[test]
    fn single_replication_report_is_the_fit_error() {
        let cfg = base_config(4);
        let opts = RecoveryOptions::default();
        let report = monte_carlo_recovery(&cfg, 1, &opts).unwrap();
        let (fitted, _) = fit_replication(&SimConfig { seed: rng::child_seed(4, 0), ..cfg.clone() }, &opts).unwrap();
        assert_eq!(report.successful, 1);
        for (i, p) in report.parameters.iter().enumerate().take(fitted.beta.len()) {
            assert_abs_diff_eq!(p.bias, fitted.beta[i] - cfg.beta_true[i], epsilon = 1e-12);
            assert_abs_diff_eq!(p.rmse, p.bias.abs(), epsilon = 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn p_hacking_only_touches_the_band(
            t in proptest::collection::vec(-1.0..4.0f64, 0..200),
            intensity in 0.0..=1.0f64,
            seed in any::<u64>(),
        ) {
            let out = inject_p_hacking(&t, 1.645, intensity, seed).unwrap();
            prop_assert_eq!(out.len(), t.len());
            for (a, b) in t.iter().zip(&out) {
                if !(1.345..1.645).contains(a) {
                    prop_assert_eq!(a, b);
                } else if a != b {
                    prop_assert!((1.645..=1.945).contains(b));
                }
            }
        }
    }
}
