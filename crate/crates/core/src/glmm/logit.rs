//! Ordinary (single-level) logit by Newton-Raphson.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::domain::DesignMatrix;
use crate::error::{Error, Result};
use crate::stats;

#[derive(Debug, Clone)]
pub struct LogitFit {
    pub beta: DVector<f64>,
    pub loglik: f64,
    pub vcov: Option<DMatrix<f64>>,
    pub converged: bool,
    pub iterations: usize,
}

pub fn logit_loglik(design: &DesignMatrix, beta: &DVector<f64>) -> f64 {
    let eta = &design.x * beta;
    eta.iter().zip(design.y.iter()).map(|(&e, &y)| stats::bernoulli_logit_ll(y, e)).sum()
}

/// Maximum likelihood for the logit ignoring study membership. Under complete
/// separation the iterations stop at `max_iter` with `converged = false`.
pub fn fit_logit(design: &DesignMatrix, max_iter: usize) -> Result<LogitFit> {
    design.check()?;
    let p = design.n_cols();
    let mut beta = DVector::zeros(p);
    let mut ll = logit_loglik(design, &beta);
    for it in 0..max_iter {
        let eta = &design.x * &beta;
        let mut grad = DVector::zeros(p);
        let mut info = DMatrix::zeros(p, p);
        for i in 0..design.n_obs() {
            let pr = stats::logistic(eta[i]);
            let w = pr * (1.0 - pr);
            let xi = design.x.row(i).transpose();
            grad.axpy(design.y[i] - pr, &xi, 1.0);
            info.ger(w, &xi, &xi, 1.0);
        }
        let chol = match Cholesky::new(info.clone()) {
            Some(c) => c,
            None => return Ok(LogitFit { beta, loglik: ll, vcov: None, converged: false, iterations: it }),
        };
        let step = chol.solve(&grad);
        if step.amax() < 1e-10 * (1.0 + beta.amax()) {
            return Ok(LogitFit { vcov: Some(chol.inverse()), beta, loglik: ll, converged: true, iterations: it });
        }
        let mut t = 1.0;
        loop {
            let cand = &beta + &step * t;
            let lc = logit_loglik(design, &cand);
            if lc >= ll - 1e-12 * ll.abs() {
                beta = cand;
                ll = lc;
                break;
            }
            t *= 0.5;
            if t < 1e-10 {
                return Ok(LogitFit { beta, loglik: ll, vcov: None, converged: false, iterations: it });
            }
        }
    }
    if !ll.is_finite() {
        return Err(Error::Numeric("ordinary logit log-likelihood is not finite".into()));
    }
    Ok(LogitFit { beta, loglik: ll, vcov: None, converged: false, iterations: max_iter })
}
