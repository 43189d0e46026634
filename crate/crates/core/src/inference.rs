//! Predicted probabilities and contrasts from a fitted model, with
//! delta-method intervals. Study effects are fixed at zero.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::domain::{CategoricalEncoding, DesignMatrix, SQRT_N_COLUMN};
use crate::error::{Error, Result};
use crate::glmm::FittedModel;
use crate::stats;

pub const CI_LEVEL: f64 = 0.95;

/// A point in covariate space, one value per design column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateProfile {
    pub column_names: Vec<String>,
    pub values: Vec<f64>,
}

/// One adjustment to a profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProfileOverride {
    /// Set a design column to a value.
    Column { column: String, value: f64 },
    /// Select a level of a categorical covariate: its level indicator is 1,
    /// the others 0 (all 0 for the reference level).
    Level { covariate: String, level: String },
}

impl ProfileOverride {
    /// Parse `name=value`. A numeric value on a known column sets the column;
    /// anything else selects a categorical level.
    pub fn parse(spec: &str, columns: &[String]) -> Result<Self> {
        let (name, value) = spec
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("override '{spec}' is not of the form name=value")))?;
        let (name, value) = (name.trim(), value.trim());
        if columns.iter().any(|c| c == name) {
            if let Ok(v) = value.parse::<f64>() {
                return Ok(ProfileOverride::Column { column: name.to_string(), value: v });
            }
        }
        Ok(ProfileOverride::Level { covariate: name.to_string(), level: value.to_string() })
    }
}

impl fmt::Display for ProfileOverride {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProfileOverride::Column { column, value } => write!(f, "{column}={value}"),
            ProfileOverride::Level { covariate, level } => write!(f, "{covariate}={level}"),
        }
    }
}

impl CovariateProfile {
    pub fn get(&self, column: &str) -> Option<f64> {
        self.column_names.iter().position(|c| c == column).map(|i| self.values[i])
    }

    pub fn set(&mut self, column: &str, value: f64) -> Result<()> {
        let i = self
            .column_names
            .iter()
            .position(|c| c == column)
            .ok_or_else(|| Error::UnknownCovariate(column.to_string()))?;
        self.values[i] = value;
        Ok(())
    }

    pub fn apply(&mut self, o: &ProfileOverride, categorical: &[CategoricalEncoding]) -> Result<()> {
        match o {
            ProfileOverride::Column { column, value } => self.set(column, *value),
            ProfileOverride::Level { covariate, level } => {
                let enc = categorical
                    .iter()
                    .find(|e| &e.covariate == covariate)
                    .ok_or_else(|| Error::UnknownCovariate(covariate.clone()))?;
                if level != &enc.reference && !enc.levels.contains(level) {
                    return Err(Error::invalid(format!("'{covariate}' has no level '{level}'")));
                }
                for (l, &col) in enc.levels.iter().zip(&enc.columns) {
                    self.values[col] = if l == level { 1.0 } else { 0.0 };
                }
                Ok(())
            }
        }
    }

    fn vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }
}

fn profile_from_means(
    column_names: &[String],
    means: &[f64],
    categorical: &[CategoricalEncoding],
    overrides: &[ProfileOverride],
) -> Result<CovariateProfile> {
    let mut profile = CovariateProfile { column_names: column_names.to_vec(), values: means.to_vec() };
    if let Some(i) = column_names.iter().position(|c| c == SQRT_N_COLUMN) {
        profile.values[i] = 0.0;
    }
    for o in overrides {
        profile.apply(o, categorical)?;
    }
    Ok(profile)
}

/// Column means of the design, the centred √n column at 0, then overrides.
pub fn mean_profile(design: &DesignMatrix, overrides: &[ProfileOverride]) -> Result<CovariateProfile> {
    profile_from_means(&design.column_names, &design.column_means(), &design.categorical, overrides)
}

/// As [`mean_profile`], from the means stored with a fit.
pub fn fitted_mean_profile(fitted: &FittedModel, overrides: &[ProfileOverride]) -> Result<CovariateProfile> {
    profile_from_means(&fitted.column_names, &fitted.column_means, &fitted.categorical, overrides)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiScale {
    /// `p ± z·SE`, clamped to [0, 1].
    #[default]
    Probability,
    /// Symmetric on the logit scale, mapped back; always inside (0, 1).
    Logit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub p: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastResult {
    pub label: String,
    pub p_a: f64,
    pub p_b: f64,
    pub delta: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
}

fn critical_value() -> f64 {
    stats::normal_quantile(0.5 + CI_LEVEL / 2.0)
}

fn check_profile(fitted: &FittedModel, profile: &CovariateProfile) -> Result<()> {
    if !fitted.converged {
        return Err(Error::invalid("predictions need a converged fit"));
    }
    if profile.column_names != fitted.column_names {
        return Err(Error::invalid("profile columns do not match the fitted model"));
    }
    if profile.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("profile contains non-finite values"));
    }
    Ok(())
}

fn quad_form(g: &DVector<f64>, v: &DMatrix<f64>) -> f64 {
    g.dot(&(v * g)).max(0.0)
}

pub fn predict_probability(fitted: &FittedModel, profile: &CovariateProfile, scale: CiScale) -> Result<Prediction> {
    check_profile(fitted, profile)?;
    let x = profile.vector();
    let beta = DVector::from_column_slice(&fitted.beta);
    let v = fitted.beta_vcov();
    let eta = x.dot(&beta);
    let p = stats::logistic(eta);
    let se = (p * (1.0 - p)) * quad_form(&x, &v).sqrt();
    let z = critical_value();
    let (ci_low, ci_high) = match scale {
        CiScale::Probability => ((p - z * se).clamp(0.0, 1.0), (p + z * se).clamp(0.0, 1.0)),
        CiScale::Logit => {
            let se_eta = quad_form(&x, &v).sqrt();
            (stats::logistic(eta - z * se_eta), stats::logistic(eta + z * se_eta))
        }
    };
    Ok(Prediction { p, se, ci_low, ci_high, level: CI_LEVEL })
}

/// `p(a) − p(b)` with a delta-method interval clamped to [−1, 1].
pub fn probability_difference(
    fitted: &FittedModel,
    profile_a: &CovariateProfile,
    profile_b: &CovariateProfile,
) -> Result<ContrastResult> {
    check_profile(fitted, profile_a)?;
    check_profile(fitted, profile_b)?;
    let beta = DVector::from_column_slice(&fitted.beta);
    let (xa, xb) = (profile_a.vector(), profile_b.vector());
    let pa = stats::logistic(xa.dot(&beta));
    let pb = stats::logistic(xb.dot(&beta));
    let g = &xa * (pa * (1.0 - pa)) - &xb * (pb * (1.0 - pb));
    let se = quad_form(&g, &fitted.beta_vcov()).sqrt();
    let delta = pa - pb;
    let z = critical_value();
    Ok(ContrastResult {
        label: String::new(),
        p_a: pa,
        p_b: pb,
        delta,
        se,
        ci_low: (delta - z * se).clamp(-1.0, 1.0),
        ci_high: (delta + z * se).clamp(-1.0, 1.0),
        level: CI_LEVEL,
    })
}

/// Contrast of `a` against `b`, both applied on top of the mean profile.
pub fn contrast(fitted: &FittedModel, label: &str, a: &[ProfileOverride], b: &[ProfileOverride]) -> Result<ContrastResult> {
    let pa = fitted_mean_profile(fitted, a)?;
    let pb = fitted_mean_profile(fitted, b)?;
    let mut r = probability_difference(fitted, &pa, &pb)?;
    r.label = label.to_string();
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scheme {
    pub name: String,
    pub overrides: Vec<ProfileOverride>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeRow {
    pub scheme: String,
    pub p: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Baseline for scheme tables: directly targeted outcome, simultaneous
/// effect, all firms. Levels of covariates absent from the model are skipped.
pub fn scheme_defaults(fitted: &FittedModel) -> Vec<ProfileOverride> {
    [("outcome", "direct"), ("timing", "simultaneous"), ("subgroup", "all")]
        .into_iter()
        .filter(|(cov, level)| {
            fitted
                .categorical
                .iter()
                .any(|e| e.covariate == *cov && (e.reference == *level || e.levels.iter().any(|l| l == level)))
        })
        .map(|(cov, level)| ProfileOverride::Level { covariate: cov.into(), level: level.into() })
        .collect()
}

/// One prediction per scheme, each applied on top of `base` over the mean profile.
pub fn scheme_table(
    fitted: &FittedModel,
    base: &[ProfileOverride],
    schemes: &[Scheme],
    scale: CiScale,
) -> Result<Vec<SchemeRow>> {
    schemes
        .iter()
        .map(|s| {
            let overrides: Vec<ProfileOverride> = base.iter().chain(&s.overrides).cloned().collect();
            let profile = fitted_mean_profile(fitted, &overrides)?;
            let pred = predict_probability(fitted, &profile, scale)?;
            Ok(SchemeRow { scheme: s.name.clone(), p: pred.p, se: pred.se, ci_low: pred.ci_low, ci_high: pred.ci_high })
        })
        .collect()
}
