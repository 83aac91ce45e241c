//! Report produced by `genrel relate`.

use genrel_core::inference::{bonferroni, InferenceSummary};
use genrel_core::relatedness::PipelineOutput;
use genrel_core::{LinkKind, Scenario, TargetFunctional};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRow {
    pub target: TargetFunctional,
    pub estimate: f64,
    pub plug_in: f64,
    pub variance: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
    pub null_value: f64,
    pub t_stat: Option<f64>,
    pub p_value: Option<f64>,
    pub p_value_adjusted: Option<f64>,
    pub reject: Option<bool>,
    pub unavailable: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelateReport {
    pub n1: usize,
    pub n2: usize,
    pub overlap: usize,
    pub p: usize,
    pub scenario: Scenario,
    pub link: LinkKind,
    pub alpha: f64,
    pub seed: u64,
    pub center: bool,
    pub split: bool,
    pub lambda_y: f64,
    pub lambda_w: f64,
    pub nonzero_y: usize,
    pub nonzero_w: usize,
    pub converged: bool,
    pub clipped_weights: usize,
    pub case_fraction_y: f64,
    pub case_fraction_w: f64,
    pub targets: Vec<TargetRow>,
    pub warnings: Vec<String>,
}

pub struct ReportContext {
    pub alpha: f64,
    pub seed: u64,
    pub center: bool,
    pub split: bool,
    pub bonferroni: Option<usize>,
    pub case_fractions: (f64, f64),
}

pub fn build(out: &PipelineOutput, inf: &InferenceSummary, ctx: &ReportContext, nulls: impl Fn(TargetFunctional) -> f64) -> RelateReport {
    let e = &out.estimates;
    let plug_corr = genrel_core::relatedness::estimate_correlation(e.plug_in_cov, e.plug_in_var_y, e.plug_in_var_w).value;
    let targets = inf
        .targets
        .iter()
        .map(|t| {
            let plug_in = match t.target {
                TargetFunctional::Covariance => e.plug_in_cov,
                TargetFunctional::VarianceY => e.plug_in_var_y,
                TargetFunctional::VarianceW => e.plug_in_var_w,
                TargetFunctional::Correlation => plug_corr,
            };
            let r = t.result.as_ref();
            let p_value = r.map(|r| r.p_value);
            TargetRow {
                target: t.target,
                estimate: t.point,
                plug_in,
                variance: t.v2,
                ci_lower: r.map(|r| r.ci_lower),
                ci_upper: r.map(|r| r.ci_upper),
                null_value: nulls(t.target),
                t_stat: r.map(|r| r.t_stat),
                p_value,
                p_value_adjusted: ctx.bonferroni.zip(p_value).map(|(g, p)| bonferroni(&[p], g)[0]),
                reject: r.map(|r| r.reject),
                unavailable: t.unavailable.clone(),
            }
        })
        .collect();
    let mut warnings = Vec::new();
    if e.clipped_weights > 0 {
        warnings.push(format!("{} linear predictors exceeded the weight clip", e.clipped_weights));
    }
    if !out.converged() {
        warnings.push("a Lasso fit did not meet its convergence tolerance".into());
    }
    if e.corr_degenerate {
        warnings.push("variance estimates have a non-positive product; correlation set to 0".into());
    }
    let s = &out.analysis;
    RelateReport {
        n1: s.n1(),
        n2: s.n2(),
        overlap: s.shared_rows(),
        p: s.p(),
        scenario: s.scenario,
        link: out.link,
        alpha: ctx.alpha,
        seed: ctx.seed,
        center: ctx.center,
        split: ctx.split,
        lambda_y: out.fit_y.lambda,
        lambda_w: out.fit_w.lambda,
        nonzero_y: out.fit_y.nonzero_count(),
        nonzero_w: out.fit_w.nonzero_count(),
        converged: out.converged(),
        clipped_weights: e.clipped_weights,
        case_fraction_y: ctx.case_fractions.0,
        case_fraction_w: ctx.case_fractions.1,
        targets,
        warnings,
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn to_csv(r: &RelateReport) -> String {
    let mut s = String::from("target,estimate,plug_in,variance,ci_lower,ci_upper,null_value,t_stat,p_value,p_value_adjusted,reject\n");
    for t in &r.targets {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            t.target.name(),
            t.estimate,
            t.plug_in,
            cell(t.variance),
            cell(t.ci_lower),
            cell(t.ci_upper),
            t.null_value,
            cell(t.t_stat),
            cell(t.p_value),
            cell(t.p_value_adjusted),
            t.reject.map(|b| b.to_string()).unwrap_or_default()
        ));
    }
    s
}

pub fn to_markdown(r: &RelateReport) -> String {
    let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    let mut s = format!(
        "n1 = {}, n2 = {}, overlap = {}, p = {}, alpha = {}\n\n| target | estimate | plug-in | CI | p-value | reject |\n|---|---:|---:|---|---:|---|\n",
        r.n1, r.n2, r.overlap, r.p, r.alpha
    );
    for t in &r.targets {
        let ci = match (t.ci_lower, t.ci_upper) {
            (Some(l), Some(u)) => format!("[{l:.4}, {u:.4}]"),
            _ => "unavailable".into(),
        };
        s.push_str(&format!(
            "| {} | {:.4} | {:.4} | {ci} | {} | {} |\n",
            t.target.name(),
            t.estimate,
            t.plug_in,
            f(t.p_value),
            t.reject.map_or("-".to_string(), |b| b.to_string())
        ));
    }
    s
}
