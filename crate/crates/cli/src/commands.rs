use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use metareg::density::{self, ManipulationConfig, ManipulationTestResult};
use metareg::domain::{self, Dataset, Formula, Term};
use metareg::glmm::{self, CoefficientRow, FittedModel, ModelSpec, Structure};
use metareg::inference::{self, CiScale, ContrastResult, ProfileOverride, Scheme, SchemeRow};
use metareg::network;
use metareg::simulate::{self, SimConfig};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::provenance::{read_document, OutDir, Provenance};
use crate::report::render_report;
use crate::{
    CiScaleArg, CliError, DataArgs, DensityArgs, FitArgs, IngestArgs, PredictArgs, RandomArg, ReportArgs,
    SimulateArgs,
};

pub(crate) const MODEL_KIND: &str = "model";
pub(crate) const DENSITY_KIND: &str = "density_tests";
pub(crate) const CONTRASTS_KIND: &str = "contrasts";
pub(crate) const SCHEMES_KIND: &str = "schemes";
pub(crate) const INGEST_KIND: &str = "ingest";
pub(crate) const TRUTH_KIND: &str = "truth";

type Written = Vec<PathBuf>;

fn fmt(x: f64) -> String {
    format!("{x:?}")
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt).unwrap_or_default()
}

fn load(data: &DataArgs) -> Result<Dataset, CliError> {
    Ok(domain::parse_dataset(&data.estimates, &data.studies)?)
}

fn inputs(data: &DataArgs) -> [&Path; 2] {
    [data.estimates.as_path(), data.studies.as_path()]
}

fn check_positive(name: &str, x: f64) -> Result<(), CliError> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(CliError::Usage(format!("--{name} must be a positive number, got {x}")))
    }
}

#[derive(Serialize)]
struct IngestSummary {
    n_estimates: usize,
    n_studies: usize,
    thresholds: Vec<f64>,
    group_by: Option<String>,
    vote_counts: Vec<domain::VoteCountRow>,
    network: network::NetworkSummary,
}

pub(crate) fn ingest(a: IngestArgs) -> Result<Written, CliError> {
    let options = json!({"thresholds": a.thresholds, "group_by": a.group_by});
    let prov = Provenance::new("ingest", a.seed, &options, &inputs(&a.data))?;
    let dataset = load(&a.data)?;
    let counts = domain::vote_counts(&dataset, a.group_by.as_deref(), &a.thresholds)?;
    let net = network::build_adjacency(dataset.studies().values())?;
    let summary = network::network_summary(&net, dataset.studies().values())?;

    let mut out = OutDir::create(&a.out.out, prov)?;
    let mut header = vec!["level".to_string(), "n".to_string()];
    header.extend(a.thresholds.iter().map(|t| format!("share_t_gt_{t}")));
    header.extend(["mean_t".to_string(), "sd_t".to_string()]);
    let rows: Vec<Vec<String>> = counts
        .iter()
        .map(|r| {
            let mut row = vec![r.level.clone(), r.n.to_string()];
            row.extend(r.proportions.iter().map(|(_, p)| fmt(*p)));
            row.extend([fmt(r.mean_t), opt(r.sd_t)]);
            row
        })
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    out.write_csv("vote_counts.csv", &header, &rows)?;
    let edges: Vec<Vec<String>> = net.edges().into_iter().map(|(f, t)| vec![f, t]).collect();
    out.write_csv("network_edges.csv", &["from_study", "to_study"], &edges)?;
    out.write_document(
        "ingest.json",
        INGEST_KIND,
        &IngestSummary {
            n_estimates: dataset.n_estimates(),
            n_studies: dataset.n_studies(),
            thresholds: a.thresholds,
            group_by: a.group_by,
            vote_counts: counts,
            network: summary,
        },
    )?;
    Ok(out.written().to_vec())
}

fn apply_filters(mut dataset: Dataset, filters: &[String]) -> Result<Dataset, CliError> {
    for f in filters {
        let (name, level) = f
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--filter '{f}' is not of the form covariate=value")))?;
        dataset = dataset.filter_by(name.trim(), level.trim())?;
    }
    Ok(dataset)
}

pub(crate) fn density_test(a: DensityArgs) -> Result<Written, CliError> {
    let bandwidths = a.bandwidth_left.zip(a.bandwidth_right);
    if let Some((l, r)) = bandwidths {
        check_positive("bandwidth-left", l)?;
        check_positive("bandwidth-right", r)?;
    }
    check_positive("kde-bandwidth", a.kde_bandwidth)?;
    if a.cutoffs.is_empty() {
        return Err(CliError::Usage("at least one --cutoff is required".into()));
    }
    let options = json!({
        "cutoffs": a.cutoffs,
        "order": a.order,
        "bandwidths": bandwidths,
        "bootstrap": a.bootstrap,
        "filters": a.filters,
        "kde_bandwidth": a.kde_bandwidth,
    });
    let prov = Provenance::new("density-test", a.seed, &options, &inputs(&a.data))?;
    let dataset = apply_filters(load(&a.data)?, &a.filters)?;
    let t = dataset.t_values();
    let config = ManipulationConfig { order: a.order, bandwidths, bootstrap: a.bootstrap, seed: a.seed };
    let results: Vec<ManipulationTestResult> = a
        .cutoffs
        .iter()
        .map(|&c| density::manipulation_test(&t, c, &config))
        .collect::<Result<_, _>>()?;
    let curve = density::kde(&t, a.kde_bandwidth, &density::kde_grid(&t, a.kde_bandwidth, 10))?;

    let mut out = OutDir::create(&a.out.out, prov)?;
    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|r| {
            vec![
                fmt(r.cutoff),
                fmt(r.f_left),
                fmt(r.f_right),
                fmt(r.se_diff),
                fmt(r.statistic),
                fmt(r.p_value),
                fmt(r.bandwidth_left),
                fmt(r.bandwidth_right),
                r.n_left.to_string(),
                r.n_right.to_string(),
                r.bootstrap_used.to_string(),
            ]
        })
        .collect();
    out.write_csv(
        "density_tests.csv",
        &[
            "cutoff",
            "f_left",
            "f_right",
            "se_diff",
            "statistic",
            "p_value",
            "bandwidth_left",
            "bandwidth_right",
            "n_left",
            "n_right",
            "bootstrap",
        ],
        &rows,
    )?;
    out.write_document("density_tests.json", DENSITY_KIND, &results)?;
    let kde_rows: Vec<Vec<String>> =
        curve.grid.iter().zip(&curve.density).map(|(x, f)| vec![fmt(*x), fmt(*f)]).collect();
    out.write_csv("kde_grid.csv", &["t", "density"], &kde_rows)?;
    Ok(out.written().to_vec())
}

/// Formula terms for the study means of `covariates`. Categorical covariates
/// contribute one share per non-reference level.
fn mundlak_terms(dataset: &Dataset, formula: &Formula, covariates: &[String]) -> Result<Vec<Term>, CliError> {
    let mut terms = Vec::new();
    for c in covariates {
        let values: Vec<domain::Value> = dataset
            .estimates()
            .iter()
            .map(|e| e.covariates.get(c).cloned().ok_or_else(|| metareg::Error::UnknownCovariate(c.clone())))
            .collect::<Result<_, _>>()?;
        if values.iter().all(|v| v.as_real().is_some()) {
            terms.push(Term::Numeric { name: domain::mundlak_name(c) });
            continue;
        }
        let explicit = formula.terms.iter().find_map(|t| match t {
            Term::Categorical { name, reference } if name == c => reference.clone(),
            _ => None,
        });
        let reference = explicit
            .or_else(|| domain::default_reference(c).map(str::to_string))
            .ok_or_else(|| CliError::Usage(format!("no reference level known for categorical `{c}`; use cat({c}=level)")))?;
        let levels: BTreeSet<String> = values.iter().map(|v| v.level_key()).collect();
        for level in levels.iter().filter(|l| **l != reference) {
            terms.push(Term::Numeric { name: domain::mundlak_level_name(c, level) });
        }
    }
    Ok(terms)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct ModelSummary {
    pub formula: String,
    pub mundlak: Vec<String>,
    pub loglik: f64,
    pub aic: Option<f64>,
    pub lr_vs_logit: Option<glmm::ChiBarTest>,
    pub icc: f64,
    pub n_obs: usize,
    pub n_studies: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct ModelDocument {
    pub model: FittedModel,
    pub coefficients: Vec<CoefficientRow>,
    pub random_part: Vec<CoefficientRow>,
    pub summary: ModelSummary,
}

pub(crate) fn fit(a: FitArgs) -> Result<Written, CliError> {
    if a.nodes == 0 {
        return Err(CliError::Usage("--nodes must be at least 1".into()));
    }
    if !a.threshold.is_finite() {
        return Err(CliError::Usage("--threshold must be finite".into()));
    }
    let options = json!({
        "formula": a.formula,
        "random": a.random,
        "threshold": a.threshold,
        "mundlak": a.mundlak,
        "nodes": a.nodes,
        "max_iter": a.max_iter,
    });
    let prov = Provenance::new("fit", a.seed, &options, &inputs(&a.data))?;
    let formula = Formula::parse(a.threshold, &a.formula).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut dataset = load(&a.data)?;
    let mut formula_full = formula.clone();
    if !a.mundlak.is_empty() {
        let extra = mundlak_terms(&dataset, &formula, &a.mundlak)?;
        let names: Vec<&str> = a.mundlak.iter().map(String::as_str).collect();
        dataset = domain::mundlak_augment(&dataset, &names)?;
        formula_full.terms.extend(extra);
    }
    let design = domain::build_design(&dataset, &formula_full)?;
    let mut spec = match a.random {
        RandomArg::Independent => ModelSpec::independent(design),
        RandomArg::Sar => ModelSpec::sar(design, network::build_adjacency(dataset.studies().values())?),
    };
    spec.quadrature_nodes = a.nodes;
    spec.max_iter = a.max_iter;
    let fitted = glmm::fit(&spec)?;

    let coefficients = fitted.coefficients();
    let random_part = fitted.random_part();
    let summary = ModelSummary {
        formula: a.formula.clone(),
        mundlak: a.mundlak.clone(),
        loglik: fitted.loglik,
        aic: (fitted.structure == Structure::Independent).then(|| fitted.aic()),
        lr_vs_logit: fitted.lr_vs_logit().ok(),
        icc: fitted.icc(),
        n_obs: fitted.n_obs,
        n_studies: fitted.n_studies,
    };

    let mut out = OutDir::create(&a.out.out, prov)?;
    let rows: Vec<Vec<String>> = coefficients
        .iter()
        .chain(&random_part)
        .map(|r| vec![r.name.clone(), fmt(r.estimate), opt(r.se), opt(r.z), opt(r.p_value), r.stars.clone()])
        .collect();
    out.write_csv("coefficients.csv", &["term", "estimate", "se", "z", "p_value", "stars"], &rows)?;
    out.write_document(
        "model.json",
        MODEL_KIND,
        &ModelDocument { model: fitted, coefficients, random_part, summary },
    )?;
    Ok(out.written().to_vec())
}

fn parse_overrides(spec: &str, columns: &[String]) -> Result<Vec<ProfileOverride>, CliError> {
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| ProfileOverride::parse(s, columns).map_err(|e| CliError::Usage(e.to_string())))
        .collect()
}

#[derive(Deserialize)]
struct SchemeSpec {
    name: String,
    overrides: Vec<String>,
}

pub(crate) fn predict(a: PredictArgs) -> Result<Written, CliError> {
    if a.contrasts.is_empty() && a.scheme_file.is_none() {
        return Err(CliError::Usage("nothing to predict: give --contrast and/or --scheme-file".into()));
    }
    let options = json!({
        "contrasts": a.contrasts,
        "no_scheme_defaults": a.no_scheme_defaults,
        "ci_scale": a.ci_scale,
    });
    let mut input_paths: Vec<&Path> = vec![a.model.as_path()];
    if let Some(p) = &a.scheme_file {
        input_paths.push(p);
    }
    let prov = Provenance::new("predict", a.seed, &options, &input_paths)?;
    let (doc, _) = read_document::<ModelDocument>(&a.model, MODEL_KIND)?;
    let fitted = doc.model;
    let columns = fitted.column_names.clone();

    let contrasts: Vec<ContrastResult> = a
        .contrasts
        .iter()
        .map(|c| {
            let (lhs, rhs) = c
                .split_once("@vs@")
                .ok_or_else(|| CliError::Usage(format!("--contrast '{c}' must look like 'a=1@vs@a=0'")))?;
            let oa = parse_overrides(lhs, &columns)?;
            let ob = parse_overrides(rhs, &columns)?;
            Ok(inference::contrast(&fitted, c, &oa, &ob)?)
        })
        .collect::<Result<_, CliError>>()?;

    let schemes: Vec<SchemeRow> = match &a.scheme_file {
        None => Vec::new(),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            let specs: Vec<SchemeSpec> = serde_json::from_str(&text)
                .map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
            let schemes: Vec<Scheme> = specs
                .into_iter()
                .map(|s| {
                    let overrides = s
                        .overrides
                        .iter()
                        .map(|o| ProfileOverride::parse(o, &columns).map_err(|e| CliError::Usage(e.to_string())))
                        .collect::<Result<_, _>>()?;
                    Ok(Scheme { name: s.name, overrides })
                })
                .collect::<Result<_, CliError>>()?;
            let base = if a.no_scheme_defaults { Vec::new() } else { inference::scheme_defaults(&fitted) };
            let scale = match a.ci_scale {
                CiScaleArg::Probability => CiScale::Probability,
                CiScaleArg::Logit => CiScale::Logit,
            };
            inference::scheme_table(&fitted, &base, &schemes, scale)?
        }
    };

    let mut out = OutDir::create(&a.out.out, prov)?;
    if !contrasts.is_empty() {
        let rows: Vec<Vec<String>> = contrasts
            .iter()
            .map(|c| {
                vec![c.label.clone(), fmt(c.p_a), fmt(c.p_b), fmt(c.delta), fmt(c.se), fmt(c.ci_low), fmt(c.ci_high)]
            })
            .collect();
        out.write_csv("contrasts.csv", &["contrast", "p_a", "p_b", "delta", "se", "ci_low", "ci_high"], &rows)?;
        out.write_document("contrasts.json", CONTRASTS_KIND, &contrasts)?;
    }
    if !schemes.is_empty() {
        let rows: Vec<Vec<String>> = schemes
            .iter()
            .map(|s| vec![s.scheme.clone(), fmt(s.p), fmt(s.se), fmt(s.ci_low), fmt(s.ci_high)])
            .collect();
        out.write_csv("schemes.csv", &["scheme", "p", "se", "ci_low", "ci_high"], &rows)?;
        out.write_document("schemes.json", SCHEMES_KIND, &schemes)?;
    }
    Ok(out.written().to_vec())
}

pub(crate) fn simulate(a: SimulateArgs) -> Result<Written, CliError> {
    let text = fs::read_to_string(&a.config).map_err(|e| CliError::io(&a.config, e))?;
    let mut config: SimConfig =
        serde_json::from_str(&text).map_err(|e| CliError::Format(format!("{}: {e}", a.config.display())))?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    let options = json!({"seed_override": a.seed});
    let prov = Provenance::new("simulate", config.seed, &options, &[a.config.as_path()])?;
    let sim = simulate::simulate_dataset(&config)?;

    let mut estimates = Vec::new();
    let mut studies = Vec::new();
    domain::write_dataset(&sim.dataset, &mut estimates, &mut studies)?;
    let mut out = OutDir::create(&a.out.out, prov)?;
    out.write_with_comment("estimates.csv", &estimates)?;
    out.write_with_comment("studies.csv", &studies)?;
    out.write_document("truth.json", TRUTH_KIND, &sim.truth)?;
    if let Some(net) = &sim.network {
        let edges: Vec<Vec<String>> = net.edges().into_iter().map(|(f, t)| vec![f, t]).collect();
        out.write_csv("network_edges.csv", &["from_study", "to_study"], &edges)?;
    }
    Ok(out.written().to_vec())
}

pub(crate) fn report(a: ReportArgs) -> Result<Written, CliError> {
    let optional = [&a.density, &a.contrasts, &a.schemes];
    let mut input_paths: Vec<&Path> = vec![a.model.as_path()];
    input_paths.extend(optional.iter().filter_map(|p| p.as_deref()));
    let options = json!({
        "density": a.density.is_some(),
        "contrasts": a.contrasts.is_some(),
        "schemes": a.schemes.is_some(),
    });
    let prov = Provenance::new("report", a.seed, &options, &input_paths)?;
    let (doc, _) = read_document::<ModelDocument>(&a.model, MODEL_KIND)?;
    let density: Vec<ManipulationTestResult> = match &a.density {
        Some(p) => read_document(p, DENSITY_KIND)?.0,
        None => Vec::new(),
    };
    let contrasts: Vec<ContrastResult> = match &a.contrasts {
        Some(p) => read_document(p, CONTRASTS_KIND)?.0,
        None => Vec::new(),
    };
    let schemes: Vec<SchemeRow> = match &a.schemes {
        Some(p) => read_document(p, SCHEMES_KIND)?.0,
        None => Vec::new(),
    };
    let body = render_report(&doc.model, &density, &contrasts, &schemes);
    let mut out = OutDir::create(&a.out.out, prov)?;
    out.write_markdown("report.md", &body)?;
    Ok(out.written().to_vec())
}
