//! SAR-correlated study effects: covariance, prior density and the joint
//! Laplace approximation of the J-dimensional marginal likelihood.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::domain::DesignMatrix;
use crate::error::{Error, Result};
use crate::network::CoauthorNetwork;
use crate::stats::{self, LN_2PI};

/// `ρ` is kept strictly inside `(-RHO_BOUND, RHO_BOUND)`.
pub const RHO_BOUND: f64 = 0.999;

pub fn rho_from_unconstrained(r: f64) -> f64 {
    RHO_BOUND * r.tanh()
}

pub fn rho_to_unconstrained(rho: f64) -> f64 {
    (rho / RHO_BOUND).atanh()
}

/// `I - ρW` over the row-standardised influence matrix.
fn spatial_filter(rho: f64, net: &CoauthorNetwork) -> DMatrix<f64> {
    let j = net.len();
    DMatrix::identity(j, j) - &net.row_std_w * rho
}

/// Covariance of the study effects: `σ² [(I - ρW)'(I - ρW)]⁻¹`.
pub fn sigma_matrix(sigma_u: f64, rho: f64, net: &CoauthorNetwork) -> Result<DMatrix<f64>> {
    if !(sigma_u >= 0.0 && sigma_u.is_finite()) {
        return Err(Error::invalid(format!("sigma_u must be >= 0, got {sigma_u}")));
    }
    let a = spatial_filter(rho, net);
    let ata = a.transpose() * &a;
    let inv = Cholesky::new(ata)
        .ok_or_else(|| Error::Singular(format!("I - {rho}W is singular")))?
        .inverse();
    Ok(inv * (sigma_u * sigma_u))
}

/// Zero-mean Gaussian prior on the SAR effects, held as a precision matrix.
#[derive(Debug, Clone)]
pub struct SarPrior {
    pub precision: DMatrix<f64>,
    pub log_det_precision: f64,
}

impl SarPrior {
    pub fn new(sigma_u: f64, rho: f64, net: &CoauthorNetwork) -> Result<Self> {
        if !(sigma_u > 0.0 && sigma_u.is_finite()) {
            return Err(Error::invalid(format!("sigma_u must be > 0, got {sigma_u}")));
        }
        let a = spatial_filter(rho, net);
        let det = a.clone().lu().determinant();
        if !(det.abs() > 1e-12) || !det.is_finite() {
            return Err(Error::Singular(format!("I - {rho}W has determinant {det}")));
        }
        let j = net.len() as f64;
        let precision = (a.transpose() * &a) / (sigma_u * sigma_u);
        Ok(SarPrior { precision, log_det_precision: 2.0 * det.abs().ln() - 2.0 * j * sigma_u.ln() })
    }

    pub fn log_density(&self, v: &DVector<f64>) -> f64 {
        let j = v.len() as f64;
        -0.5 * j * LN_2PI + 0.5 * self.log_det_precision - 0.5 * v.dot(&(&self.precision * v))
    }
}

/// Result of the joint Laplace approximation.
#[derive(Debug, Clone)]
pub struct LaplaceFit {
    pub log_marginal: f64,
    pub mode: DVector<f64>,
    pub iterations: usize,
}

/// Joint Laplace approximation of `log ∫ Π p(y | η + Dv) N(v; 0, Q⁻¹) dv`
/// with fixed-effect offsets `eta`.
pub fn laplace_marginal(design: &DesignMatrix, eta: &DVector<f64>, prior: &SarPrior) -> Result<LaplaceFit> {
    let j = design.n_studies();
    if prior.precision.nrows() != j {
        return Err(Error::invalid("prior dimension differs from study count"));
    }
    let objective = |v: &DVector<f64>| -> f64 {
        let ll: f64 = (0..design.n_obs())
            .map(|i| stats::bernoulli_logit_ll(design.y[i], eta[i] + v[design.groups[i]]))
            .sum();
        ll + prior.log_density(v)
    };
    let score = |v: &DVector<f64>| -> (DVector<f64>, DVector<f64>) {
        let mut s = DVector::zeros(j);
        let mut c = DVector::zeros(j);
        for i in 0..design.n_obs() {
            let g = design.groups[i];
            let p = stats::logistic(eta[i] + v[g]);
            s[g] += design.y[i] - p;
            c[g] += p * (1.0 - p);
        }
        (s - &prior.precision * v, c)
    };
    let neg_hessian = |c: &DVector<f64>| -> DMatrix<f64> {
        let mut h = prior.precision.clone();
        for g in 0..j {
            h[(g, g)] += c[g];
        }
        h
    };

    let mut v = DVector::zeros(j);
    let mut f = objective(&v);
    let mut trace = Vec::new();
    for it in 0..200 {
        let (grad, c) = score(&v);
        let gnorm = grad.amax();
        trace.push(gnorm);
        let h = neg_hessian(&c);
        let chol = Cholesky::new(h).ok_or_else(|| Error::Numeric("Laplace Hessian not positive definite".into()))?;
        let step = chol.solve(&grad);
        if step.amax() <= 1e-11 * (1.0 + v.amax()) {
            let log_det_h: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            let log_marginal = f + 0.5 * j as f64 * LN_2PI - 0.5 * log_det_h;
            if !log_marginal.is_finite() {
                return Err(Error::Numeric("non-finite Laplace log-likelihood".into()));
            }
            return Ok(LaplaceFit { log_marginal, mode: v, iterations: it });
        }
        let mut t = 1.0;
        loop {
            let cand = &v + &step * t;
            let fc = objective(&cand);
            if fc >= f - 1e-12 * f.abs() {
                v = cand;
                f = fc;
                break;
            }
            t *= 0.5;
            if t < 1e-10 {
                return Err(Error::ModeNotConverged { iterations: it + 1, trace });
            }
        }
    }
    Err(Error::ModeNotConverged { iterations: 200, trace })
}

pub(crate) fn check_network(design: &DesignMatrix, net: &CoauthorNetwork) -> Result<()> {
    if net.study_order != design.study_ids {
        return Err(Error::invalid("network study order does not match the design's studies"));
    }
    Ok(())
}

/// Marginal log-likelihood of the SAR model with `ρ = 0.999·tanh(rho_unconstrained)`.
pub fn loglik_sar(
    beta: &[f64],
    log_sigma_u: f64,
    rho_unconstrained: f64,
    design: &DesignMatrix,
    net: &CoauthorNetwork,
) -> Result<f64> {
    design.check()?;
    check_network(design, net)?;
    if beta.len() != design.n_cols() {
        return Err(Error::invalid("beta length differs from design columns"));
    }
    let prior = SarPrior::new(log_sigma_u.exp(), rho_from_unconstrained(rho_unconstrained), net)?;
    let eta = &design.x * DVector::from_column_slice(beta);
    Ok(laplace_marginal(design, &eta, &prior)?.log_marginal)
}

/// Joint Laplace evaluation with independent effects (`ρ = 0`, no network).
pub fn loglik_independent_laplace(beta: &[f64], log_sigma_u: f64, design: &DesignMatrix) -> Result<f64> {
    design.check()?;
    let j = design.n_studies();
    let sigma = log_sigma_u.exp();
    let prior = SarPrior {
        precision: DMatrix::identity(j, j) / (sigma * sigma),
        log_det_precision: -2.0 * j as f64 * log_sigma_u,
    };
    let eta = &design.x * DVector::from_column_slice(beta);
    Ok(laplace_marginal(design, &eta, &prior)?.log_marginal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn pair_network() -> CoauthorNetwork {
        let raw = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        CoauthorNetwork::from_raw(vec!["A".into(), "B".into()], raw).unwrap()
    }

    /// Closed-form inverse of a 2x2 matrix.
    fn inv2(m: &DMatrix<f64>) -> DMatrix<f64> {
        let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
        DMatrix::from_row_slice(2, 2, &[m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]]) / det
    }

    #[test]
    fn sigma_matrix_reductions() {
        let net = pair_network();
        let s = sigma_matrix(1.3, 0.0, &net).unwrap();
        assert_abs_diff_eq!((s - DMatrix::identity(2, 2) * 1.69).amax(), 0.0, epsilon = 1e-12);
        assert_eq!(sigma_matrix(0.0, 0.4, &net).unwrap(), DMatrix::zeros(2, 2));
        assert!(sigma_matrix(-1.0, 0.0, &net).is_err());
    }

    #[test]
    fn sigma_matrix_pair_oracle() {
        let net = pair_network();
        let a = DMatrix::from_row_slice(2, 2, &[1.0, -0.5, -0.5, 1.0]);
        let oracle = inv2(&(a.transpose() * &a));
        let s = sigma_matrix(1.0, 0.5, &net).unwrap();
        for (x, y) in s.iter().zip(oracle.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(s[(0, 0)], 2.2222, epsilon = 1e-3);
        assert_abs_diff_eq!(s[(0, 1)], 1.7778, epsilon = 1e-3);
    }

    #[test]
    fn prior_uses_the_sar_covariance() {
        let net = pair_network();
        let a = DMatrix::from_row_slice(2, 2, &[1.0, -0.5, -0.5, 1.0]);
        let sigma = inv2(&(a.transpose() * &a));
        let prec = inv2(&sigma);
        let det = sigma[(0, 0)] * sigma[(1, 1)] - sigma[(0, 1)] * sigma[(1, 0)];
        let prior = SarPrior::new(1.0, 0.5, &net).unwrap();
        for v in [[0.0, 0.0], [0.3, -1.2], [2.0, 1.5]] {
            let v = DVector::from_column_slice(&v);
            let direct = -LN_2PI - 0.5 * det.ln() - 0.5 * v.dot(&(&prec * &v));
            assert_abs_diff_eq!(prior.log_density(&v), direct, epsilon = 1e-10);
        }
    }

    #[test]
    fn rho_transform_round_trips() {
        for rho in [-0.9, 0.0, 0.5, 0.998] {
            assert_abs_diff_eq!(rho_from_unconstrained(rho_to_unconstrained(rho)), rho, epsilon = 1e-12);
        }
        assert!(rho_from_unconstrained(50.0) < 1.0);
    }
}
