//! Estimates, studies and the transformations that turn them into a
//! meta-regression response and design matrix.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::Read;
use std::path::Path;

use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

/// Critical value of the right-tailed 5% test.
pub const THRESHOLD_5PCT: f64 = 1.645;
/// Critical value of the right-tailed 2.5% test.
pub const THRESHOLD_2_5PCT: f64 = 1.96;

/// Relative tolerance of the pivoted rank check on the design matrix.
pub const RANK_TOL: f64 = 1e-10;

pub const INTERCEPT: &str = "(Intercept)";
pub const SQRT_N_COLUMN: &str = "sqrt_n_centred";

/// A covariate cell: numeric when it parses as a finite number, otherwise a
/// category label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Real(f64),
    Level(String),
}

impl Value {
    pub fn parse(cell: &str) -> Value {
        let cell = cell.trim();
        match cell.parse::<f64>() {
            Ok(v) if v.is_finite() => Value::Real(v),
            _ => Value::Level(cell.to_string()),
        }
    }

    pub fn as_real(&self) -> Option<f64> {
        match self {
            Value::Real(v) => Some(*v),
            Value::Level(_) => None,
        }
    }

    /// Label used when the value is treated as a category.
    pub fn level_key(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Real(v) => write!(f, "{v}"),
            Value::Level(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub estimate_id: String,
    pub study_id: String,
    pub raw_effect: f64,
    pub std_error: f64,
    /// True when a negative raw effect is the direction the policy wants.
    pub negative_is_good: bool,
    pub covariates: IndexMap<String, Value>,
}

impl EstimateRecord {
    pub fn t(&self) -> f64 {
        let t = self.raw_effect / self.std_error;
        if self.negative_is_good {
            -t
        } else {
            t
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub study_id: String,
    pub authors: BTreeSet<String>,
    pub year: i32,
    pub published: bool,
    /// Largest sample used in the study.
    pub sample_size: u64,
    pub study_covariates: IndexMap<String, Value>,
}

/// Two-level collection: estimates nested in studies.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    estimates: Vec<EstimateRecord>,
    studies: IndexMap<String, StudyRecord>,
}

impl Dataset {
    /// Validate and assemble a dataset. Study order is the order of `studies`.
    pub fn new(estimates: Vec<EstimateRecord>, studies: Vec<StudyRecord>) -> Result<Self> {
        let mut map = IndexMap::with_capacity(studies.len());
        for s in studies {
            if s.authors.is_empty() {
                return Err(Error::invalid(format!("study {} has no authors", s.study_id)));
            }
            if s.sample_size == 0 {
                return Err(Error::invalid(format!("study {} has sample_size 0", s.study_id)));
            }
            let id = s.study_id.clone();
            if map.insert(id.clone(), s).is_some() {
                return Err(Error::invalid(format!("duplicate study_id {id}")));
            }
        }
        let mut seen = HashSet::new();
        let mut counts = vec![0usize; map.len()];
        for e in &estimates {
            if !seen.insert(e.estimate_id.as_str()) {
                return Err(Error::invalid(format!("duplicate estimate_id {}", e.estimate_id)));
            }
            validate_estimate_values(e.raw_effect, e.std_error)
                .map_err(|m| Error::invalid(format!("estimate {}: {m}", e.estimate_id)))?;
            match map.get_index_of(&e.study_id) {
                Some(j) => counts[j] += 1,
                None => {
                    return Err(Error::invalid(format!(
                        "estimate {} references unknown study {}",
                        e.estimate_id, e.study_id
                    )))
                }
            }
        }
        if let Some(j) = counts.iter().position(|&c| c == 0) {
            return Err(Error::invalid(format!(
                "study {} has no estimates",
                map.get_index(j).map(|(k, _)| k.as_str()).unwrap_or_default()
            )));
        }
        if estimates.is_empty() {
            return Err(Error::invalid("dataset has no estimates"));
        }
        Ok(Dataset { estimates, studies: map })
    }

    pub fn estimates(&self) -> &[EstimateRecord] {
        &self.estimates
    }

    pub fn studies(&self) -> &IndexMap<String, StudyRecord> {
        &self.studies
    }

    pub fn n_estimates(&self) -> usize {
        self.estimates.len()
    }

    pub fn n_studies(&self) -> usize {
        self.studies.len()
    }

    pub fn study_of(&self, e: &EstimateRecord) -> &StudyRecord {
        &self.studies[&e.study_id]
    }

    /// Sign-recoded t-statistics in estimate order.
    pub fn t_values(&self) -> Vec<f64> {
        self.estimates.iter().map(EstimateRecord::t).collect()
    }

    /// Covariate lookup for one estimate: estimate-level columns first, then
    /// study-level columns, then the built-in study fields `published`,
    /// `year` and `sample_size`.
    pub fn covariate(&self, e: &EstimateRecord, name: &str) -> Option<Value> {
        if let Some(v) = e.covariates.get(name) {
            return Some(v.clone());
        }
        let s = self.study_of(e);
        if let Some(v) = s.study_covariates.get(name) {
            return Some(v.clone());
        }
        match name {
            "published" => Some(Value::Real(if s.published { 1.0 } else { 0.0 })),
            "year" => Some(Value::Real(s.year as f64)),
            "sample_size" => Some(Value::Real(s.sample_size as f64)),
            _ => None,
        }
    }

    /// Keep the estimates matching `keep`; studies left without estimates are dropped.
    pub fn filter<F>(&self, mut keep: F) -> Result<Dataset>
    where
        F: FnMut(&Dataset, &EstimateRecord) -> bool,
    {
        let estimates: Vec<_> = self
            .estimates
            .iter()
            .filter(|e| keep(self, e))
            .cloned()
            .collect();
        let used: HashSet<&str> = estimates.iter().map(|e| e.study_id.as_str()).collect();
        let studies = self
            .studies
            .values()
            .filter(|s| used.contains(s.study_id.as_str()))
            .cloned()
            .collect();
        Dataset::new(estimates, studies)
    }

    /// Keep estimates whose covariate `name` has label `level`.
    pub fn filter_by(&self, name: &str, level: &str) -> Result<Dataset> {
        if self.estimates.iter().all(|e| self.covariate(e, name).is_none()) {
            return Err(Error::UnknownCovariate(name.to_string()));
        }
        self.filter(|d, e| d.covariate(e, name).map(|v| v.level_key() == level).unwrap_or(false))
    }

    /// Replace the studies' covariate maps (used by study-level augmentation).
    fn with_studies(&self, studies: IndexMap<String, StudyRecord>) -> Dataset {
        Dataset { estimates: self.estimates.clone(), studies }
    }
}

fn validate_estimate_values(raw: f64, se: f64) -> std::result::Result<(), String> {
    if !raw.is_finite() {
        return Err(format!("raw_effect {raw} is not finite"));
    }
    if !(se.is_finite() && se > 0.0) {
        return Err(format!("std_error must be finite and > 0, got {se}"));
    }
    Ok(())
}

const ESTIMATE_FIXED: [&str; 5] = ["estimate_id", "study_id", "raw_effect", "std_error", "negative_is_good"];
const STUDY_FIXED: [&str; 5] = ["study_id", "authors", "year", "published", "sample_size"];

/// Read `estimates.csv` and `studies.csv`. Lines starting with `#` are ignored.
pub fn parse_dataset(estimates_path: &Path, studies_path: &Path) -> Result<Dataset> {
    let open = |p: &Path| {
        std::fs::File::open(p).map_err(|source| Error::Io { path: p.display().to_string(), source })
    };
    let studies = read_studies(open(studies_path)?, &studies_path.display().to_string())?;
    let estimates = read_estimates(open(estimates_path)?, &estimates_path.display().to_string())?;
    Dataset::new(estimates, studies)
}

fn csv_reader<R: Read>(rdr: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(rdr)
}

fn header_check(file: &str, headers: &csv::StringRecord, fixed: &[&str]) -> Result<()> {
    for (i, want) in fixed.iter().enumerate() {
        if headers.get(i) != Some(*want) {
            return Err(Error::Row {
                file: file.to_string(),
                line: 1,
                message: format!("column {} must be `{want}`, found {:?}", i + 1, headers.get(i)),
            });
        }
    }
    Ok(())
}

fn parse_flag(cell: &str) -> std::result::Result<bool, String> {
    match cell {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(format!("expected 0/1, got `{other}`")),
    }
}

fn parse_num<T: std::str::FromStr>(cell: &str, col: &str) -> std::result::Result<T, String> {
    cell.parse::<T>().map_err(|_| format!("{col}: cannot parse `{cell}`"))
}

/// Parse estimate rows; study references are resolved by [`Dataset::new`].
pub fn read_estimates<R: Read>(rdr: R, file: &str) -> Result<Vec<EstimateRecord>> {
    let mut rdr = csv_reader(rdr);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Row { file: file.into(), line: 1, message: e.to_string() })?
        .clone();
    header_check(file, &headers, &ESTIMATE_FIXED)?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Row {
            file: file.into(),
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let row_err = |message: String| Error::Row { file: file.into(), line, message };
        let get = |i: usize| rec.get(i).unwrap_or("");
        let estimate_id = get(0).to_string();
        if estimate_id.is_empty() {
            return Err(row_err("empty estimate_id".into()));
        }
        if !seen.insert(estimate_id.clone()) {
            return Err(row_err(format!("duplicate estimate_id {estimate_id}")));
        }
        let raw_effect: f64 = parse_num(get(2), "raw_effect").map_err(row_err)?;
        let std_error: f64 = parse_num(get(3), "std_error").map_err(row_err)?;
        validate_estimate_values(raw_effect, std_error).map_err(row_err)?;
        let negative_is_good = parse_flag(get(4)).map_err(|m| row_err(format!("negative_is_good: {m}")))?;
        let mut covariates = IndexMap::new();
        for (i, name) in headers.iter().enumerate().skip(ESTIMATE_FIXED.len()) {
            let cell = get(i);
            if cell.is_empty() {
                return Err(row_err(format!("missing value for covariate `{name}`")));
            }
            covariates.insert(name.to_string(), Value::parse(cell));
        }
        out.push(EstimateRecord {
            estimate_id,
            study_id: get(1).to_string(),
            raw_effect,
            std_error,
            negative_is_good,
            covariates,
        });
    }
    Ok(out)
}

pub fn read_studies<R: Read>(rdr: R, file: &str) -> Result<Vec<StudyRecord>> {
    let mut rdr = csv_reader(rdr);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Row { file: file.into(), line: 1, message: e.to_string() })?
        .clone();
    header_check(file, &headers, &STUDY_FIXED)?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Row {
            file: file.into(),
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let row_err = |message: String| Error::Row { file: file.into(), line, message };
        let get = |i: usize| rec.get(i).unwrap_or("");
        let study_id = get(0).to_string();
        if study_id.is_empty() {
            return Err(row_err("empty study_id".into()));
        }
        if !seen.insert(study_id.clone()) {
            return Err(row_err(format!("duplicate study_id {study_id}")));
        }
        let authors: BTreeSet<String> = get(1)
            .split(';')
            .map(str::trim)
            .filter(|a| !a.is_empty())
            .map(String::from)
            .collect();
        if authors.is_empty() {
            return Err(row_err("authors must list at least one id".into()));
        }
        let year: i32 = parse_num(get(2), "year").map_err(row_err)?;
        let published = parse_flag(get(3)).map_err(|m| row_err(format!("published: {m}")))?;
        let sample_size: u64 = parse_num(get(4), "sample_size").map_err(row_err)?;
        if sample_size == 0 {
            return Err(row_err("sample_size must be >= 1".into()));
        }
        let mut study_covariates = IndexMap::new();
        for (i, name) in headers.iter().enumerate().skip(STUDY_FIXED.len()) {
            let cell = get(i);
            if cell.is_empty() {
                return Err(row_err(format!("missing value for covariate `{name}`")));
            }
            study_covariates.insert(name.to_string(), Value::parse(cell));
        }
        out.push(StudyRecord { study_id, authors, year, published, sample_size, study_covariates });
    }
    Ok(out)
}

/// Write a dataset back out in the ingestion schema. Covariate columns are the
/// union of keys in first-appearance order; every record must carry all of them.
pub fn write_dataset<W1: std::io::Write, W2: std::io::Write>(
    dataset: &Dataset,
    estimates_out: W1,
    studies_out: W2,
) -> Result<()> {
    let io = |e: csv::Error| Error::invalid(format!("csv write failed: {e}"));
    let mut est_cols: Vec<String> = Vec::new();
    for e in dataset.estimates() {
        for k in e.covariates.keys() {
            if !est_cols.contains(k) {
                est_cols.push(k.clone());
            }
        }
    }
    let mut w = csv::Writer::from_writer(estimates_out);
    let mut header: Vec<String> = ESTIMATE_FIXED.iter().map(|s| s.to_string()).collect();
    header.extend(est_cols.iter().cloned());
    w.write_record(&header).map_err(io)?;
    for e in dataset.estimates() {
        let mut row = vec![
            e.estimate_id.clone(),
            e.study_id.clone(),
            format!("{:?}", e.raw_effect),
            format!("{:?}", e.std_error),
            if e.negative_is_good { "1".into() } else { "0".into() },
        ];
        for c in &est_cols {
            let v = e.covariates.get(c).ok_or_else(|| Error::UnknownCovariate(c.clone()))?;
            row.push(v.to_string());
        }
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|source| Error::Io { path: "estimates".into(), source })?;

    let mut study_cols: Vec<String> = Vec::new();
    for s in dataset.studies().values() {
        for k in s.study_covariates.keys() {
            if !study_cols.contains(k) {
                study_cols.push(k.clone());
            }
        }
    }
    let mut w = csv::Writer::from_writer(studies_out);
    let mut header: Vec<String> = STUDY_FIXED.iter().map(|s| s.to_string()).collect();
    header.extend(study_cols.iter().cloned());
    w.write_record(&header).map_err(io)?;
    for s in dataset.studies().values() {
        let mut row = vec![
            s.study_id.clone(),
            s.authors.iter().cloned().collect::<Vec<_>>().join(";"),
            s.year.to_string(),
            if s.published { "1".into() } else { "0".into() },
            s.sample_size.to_string(),
        ];
        for c in &study_cols {
            let v = s.study_covariates.get(c).ok_or_else(|| Error::UnknownCovariate(c.clone()))?;
            row.push(v.to_string());
        }
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|source| Error::Io { path: "studies".into(), source })?;
    Ok(())
}

/// Sign-recoded t-statistic: positive means the policy-desired direction.
pub fn t_statistic(raw_effect: f64, std_error: f64, negative_is_good: bool) -> Result<f64> {
    validate_estimate_values(raw_effect, std_error).map_err(Error::Invalid)?;
    let t = raw_effect / std_error;
    Ok(if negative_is_good { -t } else { t })
}

/// Binary response: significantly positive iff `t > threshold` (ties are 0).
pub fn dichotomize(t: f64, threshold: f64) -> Result<bool> {
    if !t.is_finite() || !threshold.is_finite() {
        return Err(Error::invalid(format!("non-finite t ({t}) or threshold ({threshold})")));
    }
    Ok(t > threshold)
}

/// Observed power of the right-tailed level-`alpha` test, taking `t` as the
/// noncentrality: `1 - Φ(z_{1-alpha} - t)`.
pub fn observed_power(t: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0,1), got {alpha}")));
    }
    if !t.is_finite() {
        return Err(Error::invalid(format!("non-finite t {t}")));
    }
    let z = stats::normal_quantile(1.0 - alpha);
    Ok(stats::normal_sf(z - t))
}

/// Name of the study-mean column added for a numeric covariate.
pub fn mundlak_name(covariate: &str) -> String {
    format!("mean_{covariate}")
}

/// Name of the study-proportion column for one level of a categorical covariate.
pub fn mundlak_level_name(covariate: &str, level: &str) -> String {
    format!("mean_{covariate}[{level}]")
}

/// Append within-study means of estimate-level covariates to every study.
///
/// Numeric covariates (indicators included) yield one `mean_<name>` column.
/// Categorical covariates yield a `mean_<name>[<level>]` proportion for every
/// level observed anywhere in the dataset.
pub fn mundlak_augment(dataset: &Dataset, covariate_names: &[&str]) -> Result<Dataset> {
    let mut studies = dataset.studies().clone();
    for &name in covariate_names {
        let values: Vec<&Value> = dataset
            .estimates()
            .iter()
            .map(|e| e.covariates.get(name).ok_or_else(|| Error::UnknownCovariate(name.to_string())))
            .collect::<Result<_>>()?;
        let numeric = values.iter().all(|v| v.as_real().is_some());
        let mut groups: IndexMap<&str, Vec<&Value>> = IndexMap::new();
        for (e, v) in dataset.estimates().iter().zip(&values) {
            groups.entry(e.study_id.as_str()).or_default().push(v);
        }
        if numeric {
            for (sid, vs) in &groups {
                let m = vs.iter().filter_map(|v| v.as_real()).sum::<f64>() / vs.len() as f64;
                studies[*sid].study_covariates.insert(mundlak_name(name), Value::Real(m));
            }
        } else {
            let levels: BTreeSet<String> = values.iter().map(|v| v.level_key()).collect();
            for (sid, vs) in &groups {
                for level in &levels {
                    let share = vs.iter().filter(|v| &v.level_key() == level).count() as f64 / vs.len() as f64;
                    studies[*sid]
                        .study_covariates
                        .insert(mundlak_level_name(name, level), Value::Real(share));
                }
            }
        }
    }
    Ok(dataset.with_studies(studies))
}

/// One right-hand-side term of the meta-regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Term {
    Numeric { name: String },
    Categorical { name: String, reference: Option<String> },
    /// Square root of the study's largest sample, centred at its estimate-level mean.
    SqrtN,
}

/// Reference categories of the canonical covariate names.
pub fn default_reference(covariate: &str) -> Option<&'static str> {
    Some(match covariate {
        "aim" => "rd",
        "instrument" => "direct_loan",
        "government" => "national",
        "method" => "did",
        "subgroup" => "all",
        "timing" => "simultaneous",
        "outcome" => "indirect",
        "published" => "0",
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Formula {
    pub threshold: f64,
    pub terms: Vec<Term>,
}

impl Formula {
    pub fn new(threshold: f64, terms: Vec<Term>) -> Self {
        Formula { threshold, terms }
    }

    /// Parse a comma-separated term list such as
    /// `x1, cat(aim), cat(instrument=subsidy), sqrt_n`.
    pub fn parse(threshold: f64, spec: &str) -> Result<Self> {
        let mut terms = Vec::new();
        for raw in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            if raw == "sqrt_n" {
                terms.push(Term::SqrtN);
            } else if let Some(inner) = raw.strip_prefix("cat(").and_then(|s| s.strip_suffix(')')) {
                let (name, reference) = match inner.split_once('=') {
                    Some((n, r)) => (n.trim(), Some(r.trim().to_string())),
                    None => (inner.trim(), None),
                };
                if name.is_empty() {
                    return Err(Error::invalid(format!("empty categorical term `{raw}`")));
                }
                terms.push(Term::Categorical { name: name.to_string(), reference });
            } else if raw.contains('(') || raw.contains(')') {
                return Err(Error::invalid(format!("cannot parse formula term `{raw}`")));
            } else {
                terms.push(Term::Numeric { name: raw.to_string() });
            }
        }
        Ok(Formula { threshold, terms })
    }
}

/// Reference coding of one categorical covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalEncoding {
    pub covariate: String,
    pub reference: String,
    /// Non-reference levels, one indicator column each, in column order.
    pub levels: Vec<String>,
    pub columns: Vec<usize>,
}

pub fn level_column_name(covariate: &str, level: &str) -> String {
    format!("{covariate}[{level}]")
}

#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    /// Sign-recoded t-statistics behind `y`.
    pub t: Vec<f64>,
    /// Study index (column of D) of every row.
    pub groups: Vec<usize>,
    pub study_ids: Vec<String>,
    pub column_names: Vec<String>,
    pub threshold: f64,
    /// Mean of √n subtracted from the √n column, when present.
    pub sqrt_n_centre: Option<f64>,
    pub categorical: Vec<CategoricalEncoding>,
    pub warnings: Vec<String>,
}

impl DesignMatrix {
    pub fn n_obs(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_studies(&self) -> usize {
        self.study_ids.len()
    }

    pub fn n_cols(&self) -> usize {
        self.x.ncols()
    }

    /// The n×J incidence matrix D.
    pub fn incidence(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.n_obs(), self.n_studies());
        for (i, &j) in self.groups.iter().enumerate() {
            d[(i, j)] = 1.0;
        }
        d
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_studies()];
        for &j in &self.groups {
            sizes[j] += 1;
        }
        sizes
    }

    /// Row indices of each study, in study order.
    pub fn group_rows(&self) -> Vec<Vec<usize>> {
        let mut rows = vec![Vec::new(); self.n_studies()];
        for (i, &j) in self.groups.iter().enumerate() {
            rows[j].push(i);
        }
        rows
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.column_names.iter().position(|c| c == name)
    }

    pub fn column_means(&self) -> Vec<f64> {
        let n = self.n_obs() as f64;
        self.x.column_iter().map(|c| c.sum() / n).collect()
    }

    /// Validate the internal shape invariants.
    pub fn check(&self) -> Result<()> {
        let n = self.n_obs();
        if self.y.len() != n || self.groups.len() != n || self.t.len() != n {
            return Err(Error::invalid("design vectors disagree in length"));
        }
        if self.column_names.len() != self.n_cols() {
            return Err(Error::invalid("column names disagree with X"));
        }
        if self.groups.iter().any(|&j| j >= self.n_studies()) {
            return Err(Error::invalid("group index out of range"));
        }
        if self.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("X contains non-finite entries"));
        }
        Ok(())
    }
}

/// Build the response, reference-coded predictors and study incidence.
pub fn build_design(dataset: &Dataset, formula: &Formula) -> Result<DesignMatrix> {
    let n = dataset.n_estimates();
    let mut columns: Vec<(String, Vec<f64>)> = vec![(INTERCEPT.to_string(), vec![1.0; n])];
    let mut categorical = Vec::new();
    let mut sqrt_n_centre = None;

    let lookup = |e: &EstimateRecord, name: &str| -> Result<Value> {
        dataset.covariate(e, name).ok_or_else(|| {
            Error::invalid(format!("estimate {} has no value for covariate `{name}`", e.estimate_id))
        })
    };
    let known = |name: &str| dataset.estimates().iter().any(|e| dataset.covariate(e, name).is_some());

    for term in &formula.terms {
        match term {
            Term::Numeric { name } => {
                if !known(name) {
                    return Err(Error::UnknownCovariate(name.clone()));
                }
                let mut col = Vec::with_capacity(n);
                for e in dataset.estimates() {
                    let v = lookup(e, name)?;
                    col.push(v.as_real().ok_or_else(|| {
                        Error::invalid(format!(
                            "covariate `{name}` is not numeric for estimate {} (value `{v}`); use cat({name})",
                            e.estimate_id
                        ))
                    })?);
                }
                columns.push((name.clone(), col));
            }
            Term::Categorical { name, reference } => {
                if !known(name) {
                    return Err(Error::UnknownCovariate(name.clone()));
                }
                let labels: Vec<String> = dataset
                    .estimates()
                    .iter()
                    .map(|e| lookup(e, name).map(|v| v.level_key()))
                    .collect::<Result<_>>()?;
                let levels: BTreeSet<&str> = labels.iter().map(String::as_str).collect();
                let reference = match reference {
                    Some(r) => r.clone(),
                    None => default_reference(name)
                        .map(String::from)
                        .ok_or_else(|| Error::invalid(format!("no reference level given for `{name}`")))?,
                };
                if !levels.contains(reference.as_str()) {
                    return Err(Error::invalid(format!(
                        "reference level `{reference}` of `{name}` does not occur in the data"
                    )));
                }
                let mut enc = CategoricalEncoding {
                    covariate: name.clone(),
                    reference: reference.clone(),
                    levels: Vec::new(),
                    columns: Vec::new(),
                };
                for level in levels.iter().filter(|l| **l != reference) {
                    let col = labels.iter().map(|l| if l == level { 1.0 } else { 0.0 }).collect();
                    enc.levels.push(level.to_string());
                    enc.columns.push(columns.len());
                    columns.push((level_column_name(name, level), col));
                }
                categorical.push(enc);
            }
            Term::SqrtN => {
                let raw: Vec<f64> = dataset
                    .estimates()
                    .iter()
                    .map(|e| (dataset.study_of(e).sample_size as f64).sqrt())
                    .collect();
                let centre = stats::mean(&raw);
                sqrt_n_centre = Some(centre);
                columns.push((SQRT_N_COLUMN.to_string(), raw.iter().map(|v| v - centre).collect()));
            }
        }
    }

    let mut names = HashSet::new();
    for (name, _) in &columns {
        if !names.insert(name.as_str()) {
            return Err(Error::invalid(format!("column `{name}` appears twice in the formula")));
        }
    }

    let p = columns.len();
    let x = DMatrix::from_fn(n, p, |i, k| columns[k].1[i]);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("design matrix has non-finite entries"));
    }
    let column_names: Vec<String> = columns.into_iter().map(|(n, _)| n).collect();
    let collinear = collinear_columns(&x, RANK_TOL);
    if !collinear.is_empty() {
        return Err(Error::RankDeficient(collinear.iter().map(|&k| column_names[k].clone()).collect()));
    }

    let t = dataset.t_values();
    let y = DVector::from_iterator(
        n,
        t.iter().map(|&t| dichotomize(t, formula.threshold).map(|b| if b { 1.0 } else { 0.0 })).collect::<Result<Vec<_>>>()?,
    );
    let mut warnings = Vec::new();
    let ones = y.sum();
    if ones == 0.0 || ones == n as f64 {
        warnings.push(format!(
            "response is all {} at threshold {}: separation risk, estimates may diverge",
            if ones == 0.0 { "zeros" } else { "ones" },
            formula.threshold
        ));
    }
    let study_ids: Vec<String> = dataset.studies().keys().cloned().collect();
    let groups = dataset
        .estimates()
        .iter()
        .map(|e| dataset.studies().get_index_of(&e.study_id).expect("validated study reference"))
        .collect();

    Ok(DesignMatrix {
        y,
        x,
        t,
        groups,
        study_ids,
        column_names,
        threshold: formula.threshold,
        sqrt_n_centre,
        categorical,
        warnings,
    })
}

/// Columns that are (numerically) linear combinations of earlier pivots, found
/// by modified Gram-Schmidt with column pivoting. A column is rejected once its
/// residual norm drops below `rel_tol` times the first pivot's norm.
pub fn collinear_columns(x: &DMatrix<f64>, rel_tol: f64) -> Vec<usize> {
    let p = x.ncols();
    let mut resid: Vec<DVector<f64>> = (0..p).map(|k| x.column(k).into_owned()).collect();
    let mut remaining: Vec<usize> = (0..p).collect();
    let mut first_norm = None;
    while !remaining.is_empty() {
        let (pos, norm) = remaining
            .iter()
            .enumerate()
            .map(|(pos, &k)| (pos, resid[k].norm()))
            .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        let scale = *first_norm.get_or_insert(norm);
        if norm <= rel_tol * scale || norm == 0.0 {
            break;
        }
        let k = remaining.swap_remove(pos);
        let q = &resid[k] / norm;
        for &other in &remaining {
            // two passes keep the residuals orthogonal in finite precision
            for _ in 0..2 {
                let proj = q.dot(&resid[other]);
                resid[other].axpy(-proj, &q, 1.0);
            }
        }
    }
    remaining.sort_unstable();
    remaining
}

/// One row of a vote-count table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteCountRow {
    pub level: String,
    pub n: usize,
    /// Share of estimates with `t > threshold`, one per requested threshold.
    pub proportions: Vec<(f64, f64)>,
    pub mean_t: f64,
    pub sd_t: Option<f64>,
}

/// Proportions of significantly positive estimates and t moments, per level
/// of `group_by` (or overall when `None`). Levels are sorted by label.
pub fn vote_counts(dataset: &Dataset, group_by: Option<&str>, thresholds: &[f64]) -> Result<Vec<VoteCountRow>> {
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for e in dataset.estimates() {
        let key = match group_by {
            None => "all".to_string(),
            Some(name) => dataset
                .covariate(e, name)
                .ok_or_else(|| Error::UnknownCovariate(name.to_string()))?
                .level_key(),
        };
        groups.entry(key).or_default().push(e.t());
    }
    Ok(groups
        .into_iter()
        .map(|(level, ts)| {
            let n = ts.len();
            let proportions = thresholds
                .iter()
                .map(|&thr| (thr, ts.iter().filter(|&&t| t > thr).count() as f64 / n as f64))
                .collect();
            VoteCountRow { level, n, proportions, mean_t: stats::mean(&ts), sd_t: stats::sample_sd(&ts) }
        })
        .collect())
}
