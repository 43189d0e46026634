//! Kernel density curves and density-discontinuity (manipulation) tests.
//!
//! The manipulation test estimates the density of the t-statistics just left
//! and just right of a significance cutoff, each side independently, by a
//! local polynomial fit to the empirical distribution function with a
//! triangular kernel. The fitted slope at the cutoff is the density. Standard
//! errors come from a seeded nonparametric bootstrap of the whole sample.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{rng, stats};

/// Smoothing bandwidth of the descriptive t-statistic density plot.
pub const PLOT_BANDWIDTH: f64 = 0.15;
/// Significance cutoffs tested by default (5%, 2.5%, 1% right-tailed).
pub const DEFAULT_CUTOFFS: [f64; 3] = [1.645, 1.96, 2.326];
pub const DEFAULT_ORDER: usize = 3;
pub const DEFAULT_BOOTSTRAP: usize = 500;
/// Multiplier of the one-sided rule-of-thumb bandwidth. Cubic fits to the
/// distribution function have a much wider optimal window than a plain kernel
/// density estimate, hence the large constant.
pub const BANDWIDTH_FACTOR: f64 = 4.5;
/// Fewest one-sided observations the bandwidth rule accepts.
pub const MIN_SIDE_OBS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeCurve {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
    pub kernel: String,
}

impl KdeCurve {
    pub fn integral(&self) -> f64 {
        trapezoid(&self.grid, &self.density)
    }
}

/// Gaussian kernel density estimate on `grid`.
pub fn kde(samples: &[f64], bandwidth: f64, grid: &[f64]) -> Result<KdeCurve> {
    if samples.is_empty() {
        return Err(Error::TooFewObservations("kde needs at least one sample".into()));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::invalid(format!("bandwidth must be positive, got {bandwidth}")));
    }
    if samples.iter().chain(grid).any(|v| !v.is_finite()) {
        return Err(Error::invalid("kde inputs must be finite"));
    }
    let norm = 1.0 / (samples.len() as f64 * bandwidth);
    let density = grid
        .iter()
        .map(|&g| norm * samples.iter().map(|&x| stats::normal_pdf((g - x) / bandwidth)).sum::<f64>())
        .collect();
    Ok(KdeCurve { grid: grid.to_vec(), density, bandwidth, kernel: "gaussian".into() })
}

/// Grid covering the sample range ±3 bandwidths with `per_bandwidth` points per bandwidth.
pub fn kde_grid(samples: &[f64], bandwidth: f64, per_bandwidth: usize) -> Vec<f64> {
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * bandwidth;
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * bandwidth;
    let points = (((hi - lo) / bandwidth) * per_bandwidth as f64).ceil() as usize + 1;
    linspace(lo, hi, points.max(2))
}

pub fn linspace(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points == 1 {
        return vec![lo];
    }
    let step = (hi - lo) / (points - 1) as f64;
    (0..points).map(|i| if i + 1 == points { hi } else { lo + step * i as f64 }).collect()
}

pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2).zip(y.windows(2)).map(|(xs, ys)| 0.5 * (xs[1] - xs[0]) * (ys[0] + ys[1])).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    /// Points exactly at the cutoff belong to the right side.
    pub fn contains(self, x: f64, cutoff: f64) -> bool {
        match self {
            Side::Left => x < cutoff,
            Side::Right => x >= cutoff,
        }
    }
}

/// A sorted sample with multiplicities; bootstrap resamples reuse the
/// original order and only change the counts.
struct CountedSample<'a> {
    values: &'a [f64],
    counts: Vec<u32>,
    /// Mid-rank empirical CDF at each value.
    ecdf: Vec<f64>,
}

impl<'a> CountedSample<'a> {
    fn new(sorted: &'a [f64], counts: Vec<u32>) -> Self {
        let total: u64 = counts.iter().map(|&c| c as u64).sum();
        let mut ecdf = vec![0.0; sorted.len()];
        let mut below = 0u64;
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i;
            let mut run = 0u64;
            while j < sorted.len() && sorted[j] == sorted[i] {
                run += counts[j] as u64;
                j += 1;
            }
            // (#{x_j < v} + #{x_j <= v}) / 2n keeps F(-x) = 1 - F(x) exactly
            let f = (2 * below + run) as f64 / (2 * total) as f64;
            ecdf[i..j].iter_mut().for_each(|e| *e = f);
            below += run;
            i = j;
        }
        CountedSample { values: sorted, counts, ecdf }
    }

    /// Index range of values with positive kernel weight on `side`.
    fn window(&self, cutoff: f64, side: Side, h: f64) -> std::ops::Range<usize> {
        let v = self.values;
        match side {
            Side::Left => v.partition_point(|&x| x <= cutoff - h)..v.partition_point(|&x| x < cutoff),
            Side::Right => v.partition_point(|&x| x < cutoff)..v.partition_point(|&x| x < cutoff + h),
        }
    }

    fn effective_count(&self, cutoff: f64, side: Side, h: f64) -> u64 {
        self.window(cutoff, side, h).map(|i| self.counts[i] as u64).sum()
    }

    fn density(&self, cutoff: f64, side: Side, order: usize, h: f64) -> Result<f64> {
        let window = self.window(cutoff, side, h);
        let idx: Vec<usize> = window.filter(|&i| self.counts[i] > 0).collect();
        let m: u64 = idx.iter().map(|&i| self.counts[i] as u64).sum();
        if m < (order + 2) as u64 {
            return Err(Error::TooFewObservations(format!(
                "{m} observations within bandwidth {h} on the {side:?} of {cutoff}; order {order} needs {}",
                order + 2
            )));
        }
        let k = order + 1;
        let mut a = DMatrix::zeros(idx.len(), k);
        let mut b = DVector::zeros(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            let u = (self.values[i] - cutoff) / h;
            let w = (self.counts[i] as f64 * (1.0 - u.abs()).max(0.0)).sqrt();
            let mut pow = 1.0;
            for c in 0..k {
                a[(r, c)] = w * pow;
                pow *= u;
            }
            b[r] = w * self.ecdf[i];
        }
        let qr = a.qr();
        let r = qr.r();
        let scale = (0..k).map(|c| r[(c, c)].abs()).fold(0.0, f64::max);
        if (0..k).any(|c| r[(c, c)].abs() <= 1e-12 * scale) || idx.len() < k {
            return Err(Error::Numeric(format!(
                "degenerate one-sided sample on the {side:?} of {cutoff}: too few distinct values for order {order}"
            )));
        }
        let qtb = qr.q().transpose() * b;
        let coef = r
            .solve_upper_triangular(&qtb)
            .ok_or_else(|| Error::Numeric("local polynomial solve failed".into()))?;
        let f = coef[1] / h;
        if !f.is_finite() {
            return Err(Error::Numeric("non-finite density estimate".into()));
        }
        Ok(f)
    }
}

fn sorted_copy(samples: &[f64]) -> Result<Vec<f64>> {
    Ok(sorted_with_ranks(samples)?.0)
}

/// Sorted values plus the sorted position of every original observation.
fn sorted_with_ranks(samples: &[f64]) -> Result<(Vec<f64>, Vec<usize>)> {
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("samples must be finite"));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| samples[a].total_cmp(&samples[b]));
    let mut rank = vec![0; samples.len()];
    for (pos, &i) in order.iter().enumerate() {
        rank[i] = pos;
    }
    Ok((order.iter().map(|&i| samples[i]).collect(), rank))
}

fn check_fit_args(cutoff: f64, order: usize, bandwidth: f64) -> Result<()> {
    if !cutoff.is_finite() {
        return Err(Error::invalid("cutoff must be finite"));
    }
    if order == 0 {
        return Err(Error::invalid("polynomial order must be at least 1"));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::invalid(format!("bandwidth must be positive, got {bandwidth}")));
    }
    Ok(())
}

/// One-sided density at `cutoff`: slope of a triangular-kernel weighted
/// polynomial fit of the full-sample empirical CDF, using only the points on
/// `side` within `bandwidth` of the cutoff.
pub fn local_poly_density(samples: &[f64], cutoff: f64, side: Side, order: usize, bandwidth: f64) -> Result<f64> {
    check_fit_args(cutoff, order, bandwidth)?;
    let sorted = sorted_copy(samples)?;
    let counted = CountedSample::new(&sorted, vec![1; sorted.len()]);
    counted.density(cutoff, side, order, bandwidth)
}

/// One-sided density with a bootstrap standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalDensity {
    pub f_hat: f64,
    pub se: f64,
}

pub fn local_poly_density_se(
    samples: &[f64],
    cutoff: f64,
    side: Side,
    order: usize,
    bandwidth: f64,
    bootstrap: usize,
    seed: u64,
) -> Result<LocalDensity> {
    check_fit_args(cutoff, order, bandwidth)?;
    let (sorted, rank) = sorted_with_ranks(samples)?;
    let f_hat = CountedSample::new(&sorted, vec![1; sorted.len()]).density(cutoff, side, order, bandwidth)?;
    let reps = bootstrap_replicates(&sorted, &rank, bootstrap, seed, |c| c.density(cutoff, side, order, bandwidth))?;
    let se = stats::sample_sd(&reps).ok_or_else(|| Error::TooFewObservations("bootstrap".into()))?;
    Ok(LocalDensity { f_hat, se })
}

/// Rule-of-thumb bandwidth `BANDWIDTH_FACTOR · sd_side · m^(-1/5)` from the `m` observations on `side`.
pub fn bandwidth_rule(samples: &[f64], cutoff: f64, side: Side) -> Result<f64> {
    let one_sided: Vec<f64> = samples.iter().copied().filter(|&x| side.contains(x, cutoff)).collect();
    if one_sided.len() < MIN_SIDE_OBS {
        return Err(Error::TooFewObservations(format!(
            "{} observations on the {side:?} of {cutoff}; the bandwidth rule needs {MIN_SIDE_OBS}",
            one_sided.len()
        )));
    }
    let sd = stats::sample_sd(&one_sided).unwrap_or(0.0);
    if !(sd > 0.0 && sd.is_finite()) {
        return Err(Error::Numeric(format!("all observations on the {side:?} of {cutoff} are equal")));
    }
    Ok(BANDWIDTH_FACTOR * sd * (one_sided.len() as f64).powf(-0.2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManipulationConfig {
    pub order: usize,
    /// `(left, right)`; chosen by [`bandwidth_rule`] when absent.
    pub bandwidths: Option<(f64, f64)>,
    pub bootstrap: usize,
    pub seed: u64,
}

impl Default for ManipulationConfig {
    fn default() -> Self {
        ManipulationConfig { order: DEFAULT_ORDER, bandwidths: None, bootstrap: DEFAULT_BOOTSTRAP, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManipulationTestResult {
    pub cutoff: f64,
    pub f_left: f64,
    pub f_right: f64,
    pub se_left: f64,
    pub se_right: f64,
    pub se_diff: f64,
    /// `(f_right - f_left) / se_diff`.
    pub statistic: f64,
    /// Two-sided normal p-value.
    pub p_value: f64,
    pub bandwidth_left: f64,
    pub bandwidth_right: f64,
    /// Observations with positive kernel weight on each side.
    pub n_left: usize,
    pub n_right: usize,
    pub bootstrap_used: usize,
}

/// Resample the original observations with replacement `b` times; replicate
/// `r` draws from stream `r` of `seed`. Failed replicates are dropped.
fn bootstrap_replicates<T, F>(sorted: &[f64], rank: &[usize], b: usize, seed: u64, estimate: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&CountedSample<'_>) -> Result<T> + Sync,
{
    if b < 2 {
        return Err(Error::invalid("bootstrap needs at least 2 resamples"));
    }
    let n = sorted.len();
    let reps: Vec<Option<T>> = (0..b)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(seed, r as u64);
            let mut counts = vec![0u32; n];
            for _ in 0..n {
                counts[rank[rng.random_range(0..n)]] += 1;
            }
            estimate(&CountedSample::new(sorted, counts)).ok()
        })
        .collect();
    let ok: Vec<T> = reps.into_iter().flatten().collect();
    if ok.len() * 2 < b || ok.len() < 2 {
        return Err(Error::TooFewObservations(format!(
            "only {} of {b} bootstrap resamples admitted an estimate",
            ok.len()
        )));
    }
    Ok(ok)
}

/// Density-discontinuity test at `cutoff`.
pub fn manipulation_test(samples: &[f64], cutoff: f64, config: &ManipulationConfig) -> Result<ManipulationTestResult> {
    let (h_left, h_right) = match config.bandwidths {
        Some(pair) => pair,
        None => (
            bandwidth_rule(samples, cutoff, Side::Left)?,
            bandwidth_rule(samples, cutoff, Side::Right)?,
        ),
    };
    check_fit_args(cutoff, config.order, h_left)?;
    check_fit_args(cutoff, config.order, h_right)?;
    let (sorted, rank) = sorted_with_ranks(samples)?;
    let full = CountedSample::new(&sorted, vec![1; sorted.len()]);
    let f_left = full.density(cutoff, Side::Left, config.order, h_left)?;
    let f_right = full.density(cutoff, Side::Right, config.order, h_right)?;

    let reps = bootstrap_replicates(&sorted, &rank, config.bootstrap, config.seed, |c| {
        Ok((
            c.density(cutoff, Side::Left, config.order, h_left)?,
            c.density(cutoff, Side::Right, config.order, h_right)?,
        ))
    })?;
    let lefts: Vec<f64> = reps.iter().map(|r| r.0).collect();
    let rights: Vec<f64> = reps.iter().map(|r| r.1).collect();
    let diffs: Vec<f64> = reps.iter().map(|r| r.1 - r.0).collect();
    let sd = |v: &[f64]| stats::sample_sd(v).unwrap_or(0.0);
    let se_diff = sd(&diffs);
    if !(se_diff > 0.0) {
        return Err(Error::Numeric("bootstrap standard error of the difference is zero".into()));
    }
    let statistic = (f_right - f_left) / se_diff;
    Ok(ManipulationTestResult {
        cutoff,
        f_left,
        f_right,
        se_left: sd(&lefts),
        se_right: sd(&rights),
        se_diff,
        statistic,
        p_value: stats::two_sided_p(statistic),
        bandwidth_left: h_left,
        bandwidth_right: h_right,
        n_left: full.effective_count(cutoff, Side::Left, h_left) as usize,
        n_right: full.effective_count(cutoff, Side::Right, h_right) as usize,
        bootstrap_used: reps.len(),
    })
}
