//! Adaptive Gauss-Hermite quadrature for the independent random-intercept logit.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::domain::DesignMatrix;
use crate::error::{Error, Result};
use crate::stats::{self, LN_2PI};

/// Nodes and weights for `∫ exp(-x²) f(x) dx ≈ Σ w_k f(x_k)`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    log_weights: Vec<f64>,
}

impl GaussHermite {
    /// Golub-Welsch: nodes are the eigenvalues of the Jacobi matrix of the
    /// Hermite recurrence, weights `√π · v₀²` from the normalised eigenvectors.
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("quadrature needs at least one node"));
        }
        let mut jacobi = DMatrix::zeros(n, n);
        for k in 1..n {
            let off = (k as f64 / 2.0).sqrt();
            jacobi[(k - 1, k)] = off;
            jacobi[(k, k - 1)] = off;
        }
        let eig = SymmetricEigen::new(jacobi);
        let sqrt_pi = std::f64::consts::PI.sqrt();
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|k| (eig.eigenvalues[k], sqrt_pi * eig.eigenvectors[(0, k)].powi(2)))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        // symmetrise: the rule is exactly symmetric about zero
        for k in 0..n / 2 {
            let (a, b) = (pairs[k], pairs[n - 1 - k]);
            let x = 0.5 * (b.0 - a.0);
            let w = 0.5 * (a.1 + b.1);
            pairs[k] = (-x, w);
            pairs[n - 1 - k] = (x, w);
        }
        if n % 2 == 1 {
            pairs[n / 2].0 = 0.0;
        }
        let nodes: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let weights: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(GaussHermite { nodes, weights, log_weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Log of the integrand for one study: Bernoulli terms plus the normal prior.
struct GroupIntegrand<'a> {
    offsets: &'a [f64],
    ys: &'a [f64],
    sigma: f64,
}

impl GroupIntegrand<'_> {
    fn log_value(&self, u: f64) -> f64 {
        let ll: f64 = self.offsets.iter().zip(self.ys).map(|(&o, &y)| stats::bernoulli_logit_ll(y, o + u)).sum();
        let z = u / self.sigma;
        ll - 0.5 * z * z - self.sigma.ln() - 0.5 * LN_2PI
    }

    /// First and second derivative in `u`.
    fn derivatives(&self, u: f64) -> (f64, f64) {
        let prec = 1.0 / (self.sigma * self.sigma);
        let (mut g, mut h) = (-u * prec, -prec);
        for (&o, &y) in self.offsets.iter().zip(self.ys) {
            let p = stats::logistic(o + u);
            g += y - p;
            h -= p * (1.0 - p);
        }
        (g, h)
    }

    /// Posterior mode: Newton on the strictly decreasing score, falling back
    /// to bisection whenever a step leaves the current bracket.
    fn mode(&self) -> Result<(f64, f64)> {
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        let mut u = 0.0;
        for _ in 0..300 {
            let (g, h) = self.derivatives(u);
            if g == 0.0 {
                return Ok((u, h));
            }
            if g > 0.0 {
                lo = u;
            } else {
                hi = u;
            }
            let mut next = u - g / h;
            if !(next > lo && next < hi) {
                next = if lo.is_finite() && hi.is_finite() { 0.5 * (lo + hi) } else { next.clamp(u - 50.0, u + 50.0) };
            }
            if (next - u).abs() <= 1e-13 * (1.0 + u.abs()) {
                let (_, h) = self.derivatives(next);
                return Ok((next, h));
            }
            u = next;
        }
        let (g, h) = self.derivatives(u);
        if g.abs() <= 1e-8 * (1.0 + h.abs()) {
            return Ok((u, h));
        }
        Err(Error::Numeric(format!("group mode search stalled at u = {u} (gradient {g})")))
    }

    fn log_integral(&self, rule: &GaussHermite) -> Result<f64> {
        let (mode, curvature) = self.mode()?;
        let scale = std::f64::consts::SQRT_2 / (-curvature).sqrt();
        let terms: Vec<f64> = rule
            .nodes
            .iter()
            .zip(&rule.log_weights)
            .map(|(&x, &lw)| lw + x * x + self.log_value(mode + scale * x))
            .collect();
        let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = terms.iter().map(|t| (t - m).exp()).sum();
        Ok(scale.ln() + m + s.ln())
    }
}

/// Precomputed grouping for repeated likelihood evaluations.
pub(crate) struct IndependentLikelihood<'a> {
    design: &'a DesignMatrix,
    rows: Vec<Vec<usize>>,
    rule: GaussHermite,
}

impl<'a> IndependentLikelihood<'a> {
    pub(crate) fn new(design: &'a DesignMatrix, nodes: usize) -> Result<Self> {
        design.check()?;
        Ok(IndependentLikelihood { design, rows: design.group_rows(), rule: GaussHermite::new(nodes)? })
    }

    pub(crate) fn eval(&self, beta: &[f64], log_sigma_u: f64) -> Result<f64> {
        let d = self.design;
        if beta.len() != d.n_cols() {
            return Err(Error::invalid(format!("beta has {} entries, design has {} columns", beta.len(), d.n_cols())));
        }
        let sigma = log_sigma_u.exp();
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Numeric(format!("sigma_u = exp({log_sigma_u}) is not a positive finite number")));
        }
        let eta = &d.x * nalgebra::DVector::from_column_slice(beta);
        let mut total = 0.0;
        let mut offsets = Vec::new();
        let mut ys = Vec::new();
        for rows in &self.rows {
            offsets.clear();
            ys.clear();
            offsets.extend(rows.iter().map(|&i| eta[i]));
            ys.extend(rows.iter().map(|&i| d.y[i]));
            let integrand = GroupIntegrand { offsets: &offsets, ys: &ys, sigma };
            total += integrand.log_integral(&self.rule)?;
        }
        if !total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite log-likelihood at beta = {beta:?}, log_sigma_u = {log_sigma_u}"
            )));
        }
        Ok(total)
    }
}

/// Marginal log-likelihood of the independent random-intercept logit, each
/// study's integral by adaptive Gauss-Hermite quadrature with `nodes` points
/// centred and scaled at the study's posterior mode. One node is the Laplace
/// approximation.
pub fn loglik_independent(beta: &[f64], log_sigma_u: f64, design: &DesignMatrix, nodes: usize) -> Result<f64> {
    IndependentLikelihood::new(design, nodes)?.eval(beta, log_sigma_u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn hermite_rule_moments() {
        let sqrt_pi = std::f64::consts::PI.sqrt();
        for n in [1, 2, 5, 15, 51] {
            let gh = GaussHermite::new(n).unwrap();
            let m0: f64 = gh.weights.iter().sum();
            assert_abs_diff_eq!(m0, sqrt_pi, epsilon = 1e-12);
            if n >= 2 {
                let m2: f64 = gh.weights.iter().zip(&gh.nodes).map(|(w, x)| w * x * x).sum();
                assert_abs_diff_eq!(m2, sqrt_pi / 2.0, epsilon = 1e-12);
            }
            if n >= 3 {
                let m4: f64 = gh.weights.iter().zip(&gh.nodes).map(|(w, x)| w * x.powi(4)).sum();
                assert_abs_diff_eq!(m4, 3.0 * sqrt_pi / 4.0, epsilon = 1e-11);
            }
        }
        let two = GaussHermite::new(2).unwrap();
        assert_abs_diff_eq!(two.nodes[1], std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-14);
        assert!(GaussHermite::new(0).is_err());
    }

    #[test]
    fn hermite_rule_integrates_cosine() {
        // ∫ e^{-x²} cos x dx = √π e^{-1/4}
        let gh = GaussHermite::new(15).unwrap();
        let v: f64 = gh.weights.iter().zip(&gh.nodes).map(|(w, x)| w * x.cos()).sum();
        assert_abs_diff_eq!(v, std::f64::consts::PI.sqrt() * (-0.25f64).exp(), epsilon = 1e-13);
    }
}
