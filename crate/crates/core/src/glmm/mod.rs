//! Maximum-likelihood multilevel logit with independent or
//! network-autocorrelated (SAR) study intercepts.

mod laplace;
mod logit;
pub mod optimize;
mod quadrature;

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::domain::{CategoricalEncoding, DesignMatrix};
use crate::error::{Error, Result};
use crate::network::CoauthorNetwork;
use crate::stats::{self, LOGISTIC_VARIANCE};

pub use laplace::{
    laplace_marginal, loglik_independent_laplace, loglik_sar, rho_from_unconstrained, rho_to_unconstrained,
    sigma_matrix, LaplaceFit, SarPrior, RHO_BOUND,
};
pub use logit::{fit_logit, logit_loglik, LogitFit};
pub use optimize::{BfgsOptions, BfgsResult};
pub use quadrature::{loglik_independent, GaussHermite};

use quadrature::IndependentLikelihood;

pub const DEFAULT_NODES: usize = 15;
/// Estimates of σ_u at or below this are reported as zero.
pub const BOUNDARY_SIGMA: f64 = 1e-4;
/// The optimiser never evaluates log σ_u below this.
pub const LOG_SIGMA_FLOOR: f64 = -20.0;
/// Below σ_u = 0.01 the boundary value is tried as well.
const SNAP_LOG_SIGMA: f64 = -4.605_170_185_988_091;
pub const SIGMA_NAME: &str = "sigma_u";
pub const RHO_NAME: &str = "rho";

#[derive(Debug, Clone)]
pub enum RandomStructure {
    Independent,
    SarNetwork(CoauthorNetwork),
}

#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub design: DesignMatrix,
    pub random_structure: RandomStructure,
    pub quadrature_nodes: usize,
    pub grad_tol: f64,
    pub step_tol: f64,
    pub max_iter: usize,
    /// Hold ρ at this value instead of estimating it (SAR only).
    pub fixed_rho: Option<f64>,
}

impl ModelSpec {
    pub fn independent(design: DesignMatrix) -> Self {
        ModelSpec {
            design,
            random_structure: RandomStructure::Independent,
            quadrature_nodes: DEFAULT_NODES,
            grad_tol: 1e-6,
            step_tol: 1e-9,
            max_iter: 500,
            fixed_rho: None,
        }
    }

    pub fn sar(design: DesignMatrix, net: CoauthorNetwork) -> Self {
        ModelSpec { random_structure: RandomStructure::SarNetwork(net), ..ModelSpec::independent(design) }
    }

    pub fn validate(&self) -> Result<()> {
        self.design.check()?;
        if self.quadrature_nodes == 0 {
            return Err(Error::invalid("quadrature_nodes must be >= 1"));
        }
        if let RandomStructure::SarNetwork(net) = &self.random_structure {
            laplace::check_network(&self.design, net)?;
        } else if self.fixed_rho.is_some() {
            return Err(Error::invalid("fixed_rho requires a SAR random structure"));
        }
        if let Some(rho) = self.fixed_rho {
            if !(rho.abs() < RHO_BOUND) {
                return Err(Error::invalid(format!("fixed rho {rho} outside (-{RHO_BOUND}, {RHO_BOUND})")));
            }
        }
        let ones = self.design.y.sum();
        if ones == 0.0 || ones == self.design.n_obs() as f64 {
            return Err(Error::invalid("response is constant; nothing to estimate"));
        }
        if self.design.n_obs() <= self.design.n_cols() {
            return Err(Error::TooFewObservations(format!(
                "{} observations for {} coefficients",
                self.design.n_obs(),
                self.design.n_cols()
            )));
        }
        Ok(())
    }

    fn free_rho(&self) -> bool {
        matches!(self.random_structure, RandomStructure::SarNetwork(_)) && self.fixed_rho.is_none()
    }

    fn structure(&self) -> Structure {
        match self.random_structure {
            RandomStructure::Independent => Structure::Independent,
            RandomStructure::SarNetwork(_) => Structure::Sar,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    Independent,
    Sar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub structure: Structure,
    pub column_names: Vec<String>,
    pub beta: Vec<f64>,
    pub sigma_u: f64,
    pub rho: Option<f64>,
    /// True when ρ was held fixed rather than estimated.
    pub rho_fixed: bool,
    pub loglik: f64,
    /// Ordinary logit log-likelihood with the same covariates.
    pub logit_loglik: f64,
    /// Free parameters on the reporting scale: β, then σ_u, then ρ if estimated.
    pub param_names: Vec<String>,
    pub vcov: Vec<Vec<f64>>,
    pub converged: bool,
    pub boundary: bool,
    pub vcov_reliable: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub n_obs: usize,
    pub n_studies: usize,
    pub quadrature_nodes: usize,
    pub threshold: f64,
    pub sqrt_n_centre: Option<f64>,
    pub column_means: Vec<f64>,
    pub categorical: Vec<CategoricalEncoding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub name: String,
    pub estimate: f64,
    pub se: Option<f64>,
    pub z: Option<f64>,
    pub p_value: Option<f64>,
    pub stars: String,
}

impl CoefficientRow {
    fn new(name: &str, estimate: f64, se: Option<f64>) -> Self {
        let se = se.filter(|s| s.is_finite() && *s > 0.0);
        let z = se.map(|s| estimate / s);
        let p_value = z.map(stats::two_sided_p);
        CoefficientRow {
            name: name.to_string(),
            estimate,
            se,
            z,
            p_value,
            stars: p_value.map(stats::stars).unwrap_or("").to_string(),
        }
    }
}

impl FittedModel {
    pub fn n_params(&self) -> usize {
        self.param_names.len()
    }

    pub fn aic(&self) -> f64 {
        2.0 * self.n_params() as f64 - 2.0 * self.loglik
    }

    pub fn vcov_matrix(&self) -> DMatrix<f64> {
        let k = self.vcov.len();
        DMatrix::from_fn(k, k, |i, j| self.vcov[i][j])
    }

    /// Covariance block of the fixed effects.
    pub fn beta_vcov(&self) -> DMatrix<f64> {
        let p = self.beta.len();
        DMatrix::from_fn(p, p, |i, j| self.vcov[i][j])
    }

    pub fn se(&self, index: usize) -> Option<f64> {
        let v = *self.vcov.get(index)?.get(index)?;
        (v > 0.0 && v.is_finite()).then(|| v.sqrt())
    }

    pub fn coefficients(&self) -> Vec<CoefficientRow> {
        self.column_names
            .iter()
            .enumerate()
            .map(|(i, name)| CoefficientRow::new(name, self.beta[i], self.se(i)))
            .collect()
    }

    /// σ_u, σ_u² and ρ (if any), with delta-method standard errors.
    pub fn random_part(&self) -> Vec<CoefficientRow> {
        let p = self.beta.len();
        let sigma_se = if self.boundary { None } else { self.se(p) };
        let mut rows = vec![
            CoefficientRow::new(SIGMA_NAME, self.sigma_u, sigma_se),
            CoefficientRow::new("sigma_u^2", self.sigma_u.powi(2), sigma_se.map(|s| 2.0 * self.sigma_u * s)),
        ];
        if let Some(rho) = self.rho {
            let se = if self.rho_fixed || self.boundary { None } else { self.se(p + 1) };
            rows.push(CoefficientRow::new(RHO_NAME, rho, se));
        }
        rows
    }

    pub fn icc(&self) -> f64 {
        icc(self.sigma_u * self.sigma_u).unwrap_or(0.0)
    }

    pub fn lr_vs_logit(&self) -> Result<ChiBarTest> {
        lr_chibar_test(self, self.logit_loglik)
    }
}

/// Fit by quasi-Newton maximisation of the marginal likelihood over
/// `(β, log σ_u [, atanh-scaled ρ])`.
pub fn fit(spec: &ModelSpec) -> Result<FittedModel> {
    spec.validate()?;
    let design = &spec.design;
    let p = design.n_cols();
    let logit = fit_logit(design, 100)?;

    let independent = match spec.random_structure {
        RandomStructure::Independent => Some(IndependentLikelihood::new(design, spec.quadrature_nodes)?),
        RandomStructure::SarNetwork(_) => None,
    };
    let fixed_r = spec.fixed_rho.map(rho_to_unconstrained);
    let loglik = |theta: &[f64]| -> Result<f64> {
        let log_sigma = theta[p].max(LOG_SIGMA_FLOOR);
        match (&spec.random_structure, &independent) {
            (RandomStructure::Independent, Some(lik)) => lik.eval(&theta[..p], log_sigma),
            (RandomStructure::SarNetwork(net), _) => {
                let r = fixed_r.unwrap_or_else(|| theta[p + 1]);
                loglik_sar(&theta[..p], log_sigma, r, design, net)
            }
            _ => unreachable!(),
        }
    };
    let objective = |theta: &[f64]| loglik(theta).map(|v| -v);

    let mut start: Vec<f64> = logit.beta.iter().copied().collect();
    start.push(0.0);
    if spec.free_rho() {
        start.push(0.0);
    }
    let opts = BfgsOptions { grad_tol: spec.grad_tol, step_tol: spec.step_tol, max_iter: spec.max_iter, ..Default::default() };
    let result = optimize::minimize(objective, &start, &opts)?;
    let mut theta = result.x.clone();
    theta[p] = theta[p].max(LOG_SIGMA_FLOOR);
    let mut f_best = result.f;
    // the score in log σ vanishes as σ → 0, so iterations stall short of the boundary
    if theta[p] < SNAP_LOG_SIGMA {
        let mut at_floor = theta.clone();
        at_floor[p] = LOG_SIGMA_FLOOR;
        if let Ok(f_floor) = objective(&at_floor) {
            if f_floor <= f_best + 1e-9 * (1.0 + f_best.abs()) {
                theta = at_floor;
                f_best = f_floor.min(f_best);
            }
        }
    }

    let sigma = theta[p].exp();
    let boundary = sigma <= BOUNDARY_SIGMA;
    let k = theta.len();
    // at the boundary the variance parameters are dropped from the Hessian
    let free: Vec<usize> = if boundary { (0..p).collect() } else { (0..k).collect() };
    let sub_objective = |sub: &[f64]| {
        let mut full = theta.clone();
        for (&i, &v) in free.iter().zip(sub) {
            full[i] = v;
        }
        objective(&full)
    };
    let at: Vec<f64> = free.iter().map(|&i| theta[i]).collect();
    let hessian = optimize::numeric_hessian(&sub_objective, &at, opts.fd_step)?;
    let (sub_vcov, reliable) = invert_information(hessian);

    // delta method to the reporting scale
    let jacobian: Vec<f64> = (0..k)
        .map(|i| match i {
            i if i < p => 1.0,
            i if i == p => sigma,
            _ => RHO_BOUND * (1.0 - theta[i].tanh().powi(2)),
        })
        .collect();
    let mut vcov = vec![vec![0.0; k]; k];
    for (a, &i) in free.iter().enumerate() {
        for (b, &j) in free.iter().enumerate() {
            vcov[i][j] = jacobian[i] * sub_vcov[(a, b)] * jacobian[j];
        }
    }

    let rho = match (&spec.random_structure, spec.fixed_rho) {
        (RandomStructure::Independent, _) => None,
        (_, Some(r)) => Some(r),
        (_, None) => Some(rho_from_unconstrained(theta[p + 1])),
    };
    let mut param_names = design.column_names.clone();
    param_names.push(SIGMA_NAME.to_string());
    if spec.free_rho() {
        param_names.push(RHO_NAME.to_string());
    }
    let loglik_value = -f_best;
    if result.converged && !loglik_value.is_finite() {
        return Err(Error::Numeric("converged to a non-finite log-likelihood".into()));
    }
    Ok(FittedModel {
        structure: spec.structure(),
        column_names: design.column_names.clone(),
        beta: theta[..p].to_vec(),
        sigma_u: if boundary { 0.0 } else { sigma },
        rho,
        rho_fixed: spec.fixed_rho.is_some(),
        loglik: loglik_value,
        logit_loglik: logit.loglik,
        param_names,
        vcov,
        converged: result.converged,
        boundary,
        vcov_reliable: reliable,
        iterations: result.iterations,
        gradient_norm: result.grad.iter().fold(0.0, |m, g| m.max(g.abs())),
        n_obs: design.n_obs(),
        n_studies: design.n_studies(),
        quadrature_nodes: spec.quadrature_nodes,
        threshold: design.threshold,
        sqrt_n_centre: design.sqrt_n_centre,
        column_means: design.column_means(),
        categorical: design.categorical.clone(),
    })
}

/// Inverse of the observed information; a positive-part pseudo-inverse,
/// flagged unreliable, when it is not positive definite.
fn invert_information(h: DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let h = (&h + h.transpose()) * 0.5;
    if let Some(chol) = Cholesky::new(h.clone()) {
        let inv = chol.inverse();
        let sym = (&inv + inv.transpose()) * 0.5;
        return (sym, true);
    }
    let eig = SymmetricEigen::new(h);
    let n = eig.eigenvalues.len();
    let mut inv = DMatrix::zeros(n, n);
    for k in 0..n {
        let lambda = eig.eigenvalues[k];
        if lambda > 0.0 {
            let v = eig.eigenvectors.column(k);
            inv += (v * v.transpose()) / lambda;
        }
    }
    (inv, false)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiBarTest {
    pub lr: f64,
    pub p_value: f64,
}

/// LR test of σ_u = 0 against the 50:50 mixture of χ²₀ and χ²₁.
pub fn lr_chibar_test(full: &FittedModel, marginal_loglik: f64) -> Result<ChiBarTest> {
    chibar_from_lr(2.0 * (full.loglik - marginal_loglik))
}

pub fn chibar_from_lr(lr: f64) -> Result<ChiBarTest> {
    if lr.is_nan() || lr < -1e-6 {
        return Err(Error::Numeric(format!("negative likelihood ratio {lr}: the multilevel fit failed")));
    }
    let lr = lr.max(0.0);
    let p_value = if lr == 0.0 { 1.0 } else { 0.5 * stats::chi2_sf(lr, 1.0) };
    Ok(ChiBarTest { lr, p_value })
}

/// Latent-scale intraclass correlation for a logit link, from a variance.
pub fn icc(variance_u: f64) -> Result<f64> {
    if !(variance_u >= 0.0) || !variance_u.is_finite() {
        return Err(Error::invalid(format!("variance must be a finite value >= 0, got {variance_u}")));
    }
    Ok(variance_u / (variance_u + LOGISTIC_VARIANCE))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientDelta {
    pub name: String,
    pub base: Option<f64>,
    pub augmented: f64,
    /// `augmented - base`, absent for added columns.
    pub delta: Option<f64>,
    pub augmented_se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelComparison {
    pub lr: f64,
    pub df: usize,
    pub p_value: f64,
    pub coefficient_deltas: Vec<CoefficientDelta>,
    pub base: FittedModel,
    pub augmented: FittedModel,
}

/// Nested likelihood-ratio comparison of an augmented specification against its base.
pub fn compare_models(base_spec: &ModelSpec, augmented_spec: &ModelSpec) -> Result<ModelComparison> {
    let (b, a) = (&base_spec.design, &augmented_spec.design);
    if b.y != a.y || b.groups != a.groups || b.study_ids != a.study_ids {
        return Err(Error::invalid("compared specifications use different data"));
    }
    if base_spec.structure() != augmented_spec.structure() || base_spec.fixed_rho != augmented_spec.fixed_rho {
        return Err(Error::invalid("compared specifications use different random structures"));
    }
    if let (RandomStructure::SarNetwork(nb), RandomStructure::SarNetwork(na)) =
        (&base_spec.random_structure, &augmented_spec.random_structure)
    {
        if nb != na {
            return Err(Error::invalid("compared specifications use different networks"));
        }
    }
    for (j, name) in b.column_names.iter().enumerate() {
        let k = a
            .column_index(name)
            .ok_or_else(|| Error::invalid(format!("specifications are not nested: '{name}' missing from the augmented model")))?;
        if a.x.column(k) != b.x.column(j) {
            return Err(Error::invalid(format!("column '{name}' differs between the specifications")));
        }
    }
    let df = a.n_cols() - b.n_cols();
    let base = fit(base_spec)?;
    let augmented = if df == 0 { base.clone() } else { fit(augmented_spec)? };
    let lr = (2.0 * (augmented.loglik - base.loglik)).max(0.0);
    let p_value = if df == 0 || lr == 0.0 { 1.0 } else { stats::chi2_sf(lr, df as f64) };
    let coefficient_deltas = augmented
        .column_names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let base_value = base.column_names.iter().position(|c| c == name).map(|j| base.beta[j]);
            CoefficientDelta {
                name: name.clone(),
                base: base_value,
                augmented: augmented.beta[k],
                delta: base_value.map(|v| augmented.beta[k] - v),
                augmented_se: augmented.se(k),
            }
        })
        .collect();
    Ok(ModelComparison { lr, df, p_value, coefficient_deltas, base, augmented })
}

#[cfg(test)]
mod tests;
