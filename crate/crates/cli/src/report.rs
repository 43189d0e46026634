//! Markdown rendering of fits, density tests and predictions.

use std::fmt::Write;

use metareg::density::ManipulationTestResult;
use metareg::glmm::{CoefficientRow, FittedModel, Structure};
use metareg::inference::{ContrastResult, SchemeRow};
use metareg::stats;

fn num(x: f64) -> String {
    format!("{x:.3}")
}

fn p_value(p: f64) -> String {
    if p < 0.001 {
        "<0.001".to_string()
    } else {
        format!("{p:.3}")
    }
}

fn pct(x: f64) -> String {
    format!("{:.1}%", 100.0 * x)
}

fn coefficient_line(out: &mut String, row: &CoefficientRow) {
    let se = row.se.map_or("-".to_string(), |s| format!("({})", num(s)));
    let p = row.p_value.map_or("-".to_string(), p_value);
    let _ = writeln!(out, "| {} | {}{} | {} | {} |", row.name, num(row.estimate), row.stars, se, p);
}

fn model_section(out: &mut String, fit: &FittedModel) {
    let structure = match fit.structure {
        Structure::Independent => "independent study effects",
        Structure::Sar => "co-authorship SAR study effects",
    };
    let _ = writeln!(out, "## Estimated model coefficients\n");
    let _ = writeln!(out, "Multilevel logit, {structure}; response t > {}.\n", fit.threshold);
    let _ = writeln!(out, "### Fixed part\n");
    let _ = writeln!(out, "| Variable | Estimate | SE | p-value |");
    let _ = writeln!(out, "|---|---:|---:|---:|");
    for row in fit.coefficients() {
        coefficient_line(out, &row);
    }
    let _ = writeln!(out, "\n### Random part\n");
    let _ = writeln!(out, "| Parameter | Estimate | SE | p-value |");
    let _ = writeln!(out, "|---|---:|---:|---:|");
    for row in fit.random_part() {
        coefficient_line(out, &row);
    }

    let _ = writeln!(out, "\n### Fit\n");
    let _ = writeln!(out, "| Statistic | Value |");
    let _ = writeln!(out, "|---|---:|");
    match fit.lr_vs_logit() {
        Ok(lr) => {
            let _ = writeln!(
                out,
                "| LR test vs. marginal model | {}{} (p {}) |",
                num(lr.lr),
                stats::stars(lr.p_value),
                p_value(lr.p_value)
            );
        }
        Err(_) => {
            let _ = writeln!(out, "| LR test vs. marginal model | - |");
        }
    }
    let _ = writeln!(out, "| ICC (latent scale) | {} |", pct(fit.icc()));
    let _ = writeln!(out, "| Log-likelihood | {} |", num(fit.loglik));
    let aic = match fit.structure {
        Structure::Independent => num(fit.aic()),
        Structure::Sar => "-".to_string(),
    };
    let _ = writeln!(out, "| AIC | {aic} |");
    let _ = writeln!(out, "| Observations | {} |", fit.n_obs);
    let _ = writeln!(out, "| Studies | {} |", fit.n_studies);
    let status = if fit.converged { "yes" } else { "no" };
    let _ = writeln!(out, "| Converged | {status} |");
    if fit.boundary {
        let _ = writeln!(out, "| Boundary | sigma_u estimated at 0 |");
    }
    if !fit.vcov_reliable {
        let _ = writeln!(out, "| Standard errors | unreliable (Hessian not positive definite) |");
    }
}

fn density_section(out: &mut String, density: &[ManipulationTestResult]) {
    let _ = writeln!(out, "\n## Manipulation tests based on density discontinuity\n");
    let _ = writeln!(out, "| Cutoff | Test statistic | p-value | Bandwidth (left, right) | N (left, right) |");
    let _ = writeln!(out, "|---:|---:|---:|---:|---:|");
    for r in density {
        let _ = writeln!(
            out,
            "| {} | {}{} | {} | {}, {} | {}, {} |",
            r.cutoff,
            num(r.statistic),
            stats::stars(r.p_value),
            p_value(r.p_value),
            num(r.bandwidth_left),
            num(r.bandwidth_right),
            r.n_left,
            r.n_right
        );
    }
}

fn contrast_section(out: &mut String, contrasts: &[ContrastResult]) {
    let _ = writeln!(out, "\n## Predicted probability differences\n");
    let _ = writeln!(out, "| Contrast | p(a) | p(b) | Difference | SE | 95% CI |");
    let _ = writeln!(out, "|---|---:|---:|---:|---:|---|");
    for c in contrasts {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | [{}, {}] |",
            c.label,
            num(c.p_a),
            num(c.p_b),
            num(c.delta),
            num(c.se),
            num(c.ci_low),
            num(c.ci_high)
        );
    }
}

fn scheme_section(out: &mut String, schemes: &[SchemeRow]) {
    let _ = writeln!(out, "\n## Predicted probability by scheme\n");
    let _ = writeln!(out, "| Scheme | Probability | 95% CI |");
    let _ = writeln!(out, "|---|---:|---|");
    for s in schemes {
        let _ = writeln!(out, "| {} | {} | [{}, {}] |", s.scheme, num(s.p), num(s.ci_low), num(s.ci_high));
    }
}

/// The full report. Empty inputs drop their sections.
pub fn render_report(
    fit: &FittedModel,
    density: &[ManipulationTestResult],
    contrasts: &[ContrastResult],
    schemes: &[SchemeRow],
) -> String {
    let mut out = String::from("# Meta-regression report\n\n");
    model_section(&mut out, fit);
    if !density.is_empty() {
        density_section(&mut out, density);
    }
    if !contrasts.is_empty() {
        contrast_section(&mut out, contrasts);
    }
    if !schemes.is_empty() {
        scheme_section(&mut out, schemes);
    }
    out.push_str("\nSignificance: *** p < 0.01, ** p < 0.05, * p < 0.10 (two-sided).\n");
    out
}
