//! BFGS with central-difference gradients, and numeric Hessians.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    /// Stop when `max |∂f| <= grad_tol · (1 + |f|)`.
    pub grad_tol: f64,
    /// Stop when the accepted step moves no coordinate by more than this.
    pub step_tol: f64,
    pub max_iter: usize,
    /// Relative finite-difference step.
    pub fd_step: f64,
    /// Largest coordinate change per iteration.
    pub max_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions { grad_tol: 1e-6, step_tol: 1e-9, max_iter: 500, fd_step: 1e-5, max_step: 2.0 }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn fd_step(x: f64, rel: f64) -> f64 {
    rel * x.abs().max(1.0)
}

pub fn numeric_gradient<F>(f: &F, x: &[f64], rel_step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut xp = x.to_vec();
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        let h = fd_step(x[i], rel_step);
        xp[i] = x[i] + h;
        let fp = f(&xp)?;
        xp[i] = x[i] - h;
        let fm = f(&xp)?;
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

/// Symmetric central-difference Hessian.
pub fn numeric_hessian<F>(f: &F, x: &[f64], rel_step: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let n = x.len();
    let f0 = f(x)?;
    let h: Vec<f64> = x.iter().map(|&v| fd_step(v, rel_step)).collect();
    let mut hess = DMatrix::zeros(n, n);
    let mut xp = x.to_vec();
    for i in 0..n {
        xp[i] = x[i] + h[i];
        let fp = f(&xp)?;
        xp[i] = x[i] - h[i];
        let fm = f(&xp)?;
        xp[i] = x[i];
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
        for j in 0..i {
            let mut eval = |si: f64, sj: f64| -> Result<f64> {
                xp[i] = x[i] + si * h[i];
                xp[j] = x[j] + sj * h[j];
                let v = f(&xp);
                xp[i] = x[i];
                xp[j] = x[j];
                v
            };
            let v = (eval(1.0, 1.0)? - eval(1.0, -1.0)? - eval(-1.0, 1.0)? + eval(-1.0, -1.0)?) / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    Ok(hess)
}

/// Minimise `f` from `x0`. Failed evaluations during the line search are
/// treated as infinitely bad; a failure at `x0` is returned.
pub fn minimize<F>(f: F, x0: &[f64], opts: &BfgsOptions) -> Result<BfgsResult>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let mut fx = f(x0)?;
    if !fx.is_finite() {
        return Err(Error::Numeric("objective is not finite at the starting point".into()));
    }
    let grad = |x: &DVector<f64>| numeric_gradient(&f, x.as_slice(), opts.fd_step).map(DVector::from_vec);
    let mut g = grad(&x)?;
    let mut hinv = DMatrix::identity(n, n);
    let mut first = true;
    let done = |g: &DVector<f64>, fx: f64| g.amax() <= opts.grad_tol * (1.0 + fx.abs());

    for it in 0..opts.max_iter {
        if done(&g, fx) {
            return Ok(BfgsResult { x: x.as_slice().to_vec(), f: fx, grad: g.as_slice().to_vec(), iterations: it, converged: true });
        }
        let mut dir = -(&hinv * &g);
        if dir.dot(&g) >= 0.0 {
            hinv = DMatrix::identity(n, n);
            dir = -g.clone();
        }
        let biggest = dir.amax();
        if biggest > opts.max_step {
            dir *= opts.max_step / biggest;
        }
        let slope = dir.dot(&g);
        let mut t = 1.0;
        let mut accepted = None;
        while t * dir.amax() > opts.step_tol {
            let cand = &x + &dir * t;
            if let Ok(fc) = f(cand.as_slice()) {
                if fc.is_finite() && fc <= fx + 1e-4 * t * slope {
                    accepted = Some((cand, fc));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            // no decrease along a descent direction: numerical floor reached
            return Ok(BfgsResult {
                x: x.as_slice().to_vec(),
                f: fx,
                converged: done(&g, fx),
                grad: g.as_slice().to_vec(),
                iterations: it,
            });
        };
        let g_new = grad(&x_new)?;
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if first {
                hinv = DMatrix::identity(n, n) * (sy / y.dot(&y));
                first = false;
            }
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(n, n);
            let left = &i - (&s * y.transpose()) * rho;
            let right = &i - (&y * s.transpose()) * rho;
            hinv = &left * &hinv * &right + (&s * s.transpose()) * rho;
        }
        let small_step = s.amax() <= opts.step_tol;
        x = x_new;
        fx = f_new;
        g = g_new;
        if small_step {
            return Ok(BfgsResult { x: x.as_slice().to_vec(), f: fx, converged: done(&g, fx), grad: g.as_slice().to_vec(), iterations: it + 1 });
        }
    }
    Ok(BfgsResult { x: x.as_slice().to_vec(), f: fx, converged: done(&g, fx), grad: g.as_slice().to_vec(), iterations: opts.max_iter })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn minimises_rosenbrock() {
        let f = |x: &[f64]| Ok((1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2));
        let opts = BfgsOptions { grad_tol: 1e-9, max_iter: 2000, ..Default::default() };
        let r = minimize(f, &[-1.2, 1.0], &opts).unwrap();
        assert_abs_diff_eq!(r.x[0], 1.0, epsilon = 1e-4);
        assert_abs_diff_eq!(r.x[1], 1.0, epsilon = 1e-4);
    }

    #[test]
    fn hessian_of_quadratic() {
        let f = |x: &[f64]| Ok(3.0 * x[0] * x[0] + 2.0 * x[0] * x[1] + 0.5 * x[1] * x[1]);
        let h = numeric_hessian(&f, &[0.3, -2.0], 1e-5).unwrap();
        assert_abs_diff_eq!(h[(0, 0)], 6.0, epsilon = 1e-4);
        assert_abs_diff_eq!(h[(0, 1)], 2.0, epsilon = 1e-4);
        assert_abs_diff_eq!(h[(1, 1)], 1.0, epsilon = 1e-4);
        let g = numeric_gradient(&f, &[0.3, -2.0], 1e-5).unwrap();
        assert_abs_diff_eq!(g[0], 6.0 * 0.3 - 4.0, epsilon = 1e-8);
    }
}
