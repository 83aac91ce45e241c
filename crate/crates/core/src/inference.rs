//! Asymptotic variance estimates, confidence intervals and Wald tests for
//! the debiased estimators.

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lasso::LassoFit;
use crate::model::{LinkKind, PairedStudy, Scenario, TargetFunctional, Trait};
use crate::relatedness::{correction_weight, PipelineOutput, RowCovariance};

/// Standard normal distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Upper tail `1 - Phi(x)` without cancellation.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

const A: [f64; 6] = [
    -3.969_683_028_665_376e1,
    2.209_460_984_245_205e2,
    -2.759_285_104_469_687e2,
    1.383_577_518_672_690e2,
    -3.066_479_806_614_716e1,
    2.506_628_277_459_239,
];
const B: [f64; 5] = [
    -5.447_609_879_822_406e1,
    1.615_858_368_580_409e2,
    -1.556_989_798_598_866e2,
    6.680_131_188_771_972e1,
    -1.328_068_155_288_572e1,
];
const C: [f64; 6] = [
    -7.784_894_002_430_293e-3,
    -3.223_964_580_411_365e-1,
    -2.400_758_277_161_838,
    -2.549_732_539_343_734,
    4.374_664_141_464_968,
    2.938_163_982_698_783,
];
const D: [f64; 4] = [
    7.784_695_709_041_462e-3,
    3.224_671_290_700_398e-1,
    2.445_134_137_142_996,
    3.754_408_661_907_416,
];
const P_LOW: f64 = 0.02425;

/// Inverse of the standard normal distribution function: a rational
/// approximation refined by one Halley step.
pub fn normal_quantile(q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Domain(format!("normal quantile needs 0 < q < 1, got {q}")));
    }
    let x = if q < P_LOW {
        let r = (-2.0 * q.ln()).sqrt();
        (((((C[0] * r + C[1]) * r + C[2]) * r + C[3]) * r + C[4]) * r + C[5])
            / ((((D[0] * r + D[1]) * r + D[2]) * r + D[3]) * r + 1.0)
    } else if q <= 1.0 - P_LOW {
        let r = q - 0.5;
        let s = r * r;
        (((((A[0] * s + A[1]) * s + A[2]) * s + A[3]) * s + A[4]) * s + A[5]) * r
            / (((((B[0] * s + B[1]) * s + B[2]) * s + B[3]) * s + B[4]) * s + 1.0)
    } else {
        let r = (-2.0 * (1.0 - q).ln()).sqrt();
        -(((((C[0] * r + C[1]) * r + C[2]) * r + C[3]) * r + C[4]) * r + C[5])
            / ((((D[0] * r + D[1]) * r + D[2]) * r + D[3]) * r + 1.0)
    };
    // Work in the nearer tail to keep the residual accurate.
    let e = if x < 0.0 { normal_cdf(x) - q } else { (1.0 - q) - normal_sf(x) };
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    Ok(x - u / (1.0 + 0.5 * x * u))
}

/// `z_{alpha/2}`, the upper `alpha/2` quantile.
pub fn critical_value(alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    normal_quantile(1.0 - alpha / 2.0)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// Variance estimates for the four targets. `v2_r` is `None` when the
/// product of the variance estimates is not positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimates {
    pub v2: f64,
    pub v2_beta: f64,
    pub v2_gamma: f64,
    pub v2_r: Option<f64>,
}

impl VarianceEstimates {
    pub fn for_target(&self, target: TargetFunctional) -> Option<f64> {
        match target {
            TargetFunctional::Covariance => Some(self.v2),
            TargetFunctional::VarianceY => Some(self.v2_beta),
            TargetFunctional::VarianceW => Some(self.v2_gamma),
            TargetFunctional::Correlation => self.v2_r,
        }
    }
}

/// `sum_i w_i (v'M_i)^2` with the fit's correction weights.
pub fn weighted_square_sum(
    fit: &LassoFit,
    study: &PairedStudy,
    t: Trait,
    direction: ArrayView1<'_, f64>,
    link: LinkKind,
) -> f64 {
    study
        .covariates(t)
        .rows()
        .into_iter()
        .map(|row| {
            let proj = row.dot(&direction);
            correction_weight(fit.linear_predictor(row), link) * proj * proj
        })
        .sum()
}

/// `(1/N) sum_i ((x_i'b)(x_i'g) - b'Sg)^2` over the distinct rows.
pub fn centered_product_term(study: &PairedStudy, b: ArrayView1<'_, f64>, g: ArrayView1<'_, f64>) -> f64 {
    let prods = RowCovariance::new(study).row_products(b, g);
    let n = prods.len() as f64;
    let mean = prods.iter().sum::<f64>() / n;
    prods.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Shared-row count and effective size; rejects overlaps that leave a
/// trait without private rows.
fn overlap_layout(study: &PairedStudy) -> Result<Option<usize>> {
    match study.scenario {
        Scenario::Independent => Ok(None),
        Scenario::Overlapped => {
            let m = study.overlap;
            if m == 0 || m >= study.n1() || m >= study.n2() {
                return Err(Error::DegenerateOverlap(format!(
                    "overlapped variance needs 0 < m < min(n1, n2); got m={m}, n1={}, n2={}",
                    study.n1(),
                    study.n2()
                )));
            }
            Ok(Some(m))
        }
    }
}

/// Variance estimate for the debiased covariance.
pub fn variance_cov(fit_y: &LassoFit, fit_w: &LassoFit, study: &PairedStudy, link: LinkKind) -> Result<f64> {
    let overlap = overlap_layout(study)?;
    let b = fit_y.coefficients.view();
    let g = fit_w.coefficients.view();
    let (n1, n2) = (study.n1() as f64, study.n2() as f64);
    let n = study.effective_n() as f64;
    let sx = weighted_square_sum(fit_y, study, Trait::Y, g, link);
    let sz = weighted_square_sum(fit_w, study, Trait::W, b, link);
    let d1 = centered_product_term(study, b, g);
    Ok(match overlap {
        None => n / (n1 * n1) * sx + n / (n2 * n2) * sz + d1,
        Some(m) => {
            let m = m as f64;
            d1 + (n / m + n / (n1 - m)) * sx / n1 + (n / m + n / (n2 - m)) * sz / n2
        }
    })
}

/// Variance estimate for the debiased genetic variance of one trait.
pub fn variance_quadratic(fit: &LassoFit, t: Trait, study: &PairedStudy, link: LinkKind) -> Result<f64> {
    overlap_layout(study)?;
    let b = fit.coefficients.view();
    let nt = study.covariates(t).nrows() as f64;
    let n = study.effective_n() as f64;
    let s = weighted_square_sum(fit, study, t, b, link);
    Ok(4.0 * n / (nt * nt) * s + centered_product_term(study, b, b))
}

/// `v2 / (var_y var_w)` when the product is positive.
pub fn variance_correlation(v2: f64, var_y: f64, var_w: f64) -> Option<f64> {
    let prod = var_y * var_w;
    (prod > 0.0).then(|| v2 / prod)
}

/// Which sample count scales intervals and statistics in the overlapped
/// layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleCount {
    /// n1 + n2 - m distinct samples.
    #[default]
    Distinct,
    /// n1 + n2, counting shared samples twice.
    Total,
}

impl SampleCount {
    pub fn of(self, study: &PairedStudy) -> usize {
        match self {
            SampleCount::Distinct => study.effective_n(),
            SampleCount::Total => study.n1() + study.n2(),
        }
    }
}

/// Interval without the correlation range intersection.
fn raw_interval(point: f64, v2: f64, n_total: usize, alpha: f64) -> Result<(f64, f64)> {
    if !(v2 >= 0.0) {
        return Err(Error::Domain(format!("variance estimate must be >= 0, got {v2}")));
    }
    if n_total == 0 {
        return Err(Error::Domain("sample count must be positive".into()));
    }
    let half = critical_value(alpha)? * (v2 / n_total as f64).sqrt();
    Ok((point - half, point + half))
}

/// `point -/+ z_{alpha/2} sqrt(v2 / n_total)`, intersected with [-1, 1]
/// for the correlation.
pub fn confidence_interval(
    point: f64,
    v2: f64,
    n_total: usize,
    alpha: f64,
    target: TargetFunctional,
) -> Result<(f64, f64)> {
    let (lo, hi) = raw_interval(point, v2, n_total, alpha)?;
    Ok(match target {
        TargetFunctional::Correlation => (lo.max(-1.0), hi.min(1.0)),
        _ => (lo, hi),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub target: TargetFunctional,
    pub point: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub alpha: f64,
    pub null_value: f64,
    pub t_stat: f64,
    pub p_value: f64,
    pub reject: bool,
}

/// Wald test of `target = null_value` with the matching interval.
///
/// The decision is made by interval inversion so that rejecting and
/// excluding the null from the (unclipped) interval always agree.
pub fn hypothesis_test(
    point: f64,
    v2: f64,
    n_total: usize,
    null_value: f64,
    alpha: f64,
    target: TargetFunctional,
) -> Result<InferenceResult> {
    if target == TargetFunctional::Correlation && !(-1.0..=1.0).contains(&null_value) {
        return Err(Error::Domain(format!("correlation null {null_value} outside [-1, 1]")));
    }
    let (lo, hi) = raw_interval(point, v2, n_total, alpha)?;
    let diff = point - null_value;
    let t_stat = if v2 > 0.0 {
        (n_total as f64).sqrt() * diff / v2.sqrt()
    } else if diff == 0.0 {
        0.0
    } else {
        diff.signum() * f64::INFINITY
    };
    let p_value = (2.0 * normal_sf(t_stat.abs())).min(1.0);
    let reject = null_value < lo || null_value > hi;
    let (ci_lower, ci_upper) = confidence_interval(point, v2, n_total, alpha, target)?;
    Ok(InferenceResult { target, point, ci_lower, ci_upper, alpha, null_value, t_stat, p_value, reject })
}

/// Null values for the four tests.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NullValues {
    pub covariance: f64,
    pub variance_y: f64,
    pub variance_w: f64,
    pub correlation: f64,
}

impl NullValues {
    pub fn get(&self, target: TargetFunctional) -> f64 {
        match target {
            TargetFunctional::Covariance => self.covariance,
            TargetFunctional::VarianceY => self.variance_y,
            TargetFunctional::VarianceW => self.variance_w,
            TargetFunctional::Correlation => self.correlation,
        }
    }
}

/// Inference for one target; `result` is `None` when the variance is
/// undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetInference {
    pub target: TargetFunctional,
    pub point: f64,
    pub v2: Option<f64>,
    pub result: Option<InferenceResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unavailable: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceSummary {
    pub variances: VarianceEstimates,
    pub n_total: usize,
    pub targets: Vec<TargetInference>,
}

impl InferenceSummary {
    pub fn get(&self, target: TargetFunctional) -> &TargetInference {
        self.targets.iter().find(|t| t.target == target).expect("all targets present")
    }
}

/// All variance estimates for a pipeline run.
pub fn variance_estimates(out: &PipelineOutput) -> Result<VarianceEstimates> {
    let s = &out.analysis;
    let e = &out.estimates;
    let v2 = variance_cov(&out.fit_y, &out.fit_w, s, out.link)?;
    let v2_beta = variance_quadratic(&out.fit_y, Trait::Y, s, out.link)?;
    let v2_gamma = variance_quadratic(&out.fit_w, Trait::W, s, out.link)?;
    Ok(VarianceEstimates { v2, v2_beta, v2_gamma, v2_r: variance_correlation(v2, e.var_y, e.var_w) })
}

/// Intervals and tests for all four targets.
pub fn infer_all(
    out: &PipelineOutput,
    alpha: f64,
    nulls: &NullValues,
    count: SampleCount,
) -> Result<InferenceSummary> {
    check_alpha(alpha)?;
    let variances = variance_estimates(out)?;
    let n_total = count.of(&out.analysis);
    let e = &out.estimates;
    let mut targets = Vec::with_capacity(4);
    for target in TargetFunctional::ALL {
        let point = match target {
            TargetFunctional::Covariance => e.cov_yw,
            TargetFunctional::VarianceY => e.var_y,
            TargetFunctional::VarianceW => e.var_w,
            TargetFunctional::Correlation => e.corr,
        };
        let v2 = variances.for_target(target);
        let (result, unavailable) = match v2 {
            Some(v) => (Some(hypothesis_test(point, v, n_total, nulls.get(target), alpha, target)?), None),
            None => (
                None,
                Some("correlation inference unavailable: variance estimates have a non-positive product".into()),
            ),
        };
        targets.push(TargetInference { target, point, v2, result, unavailable });
    }
    Ok(InferenceSummary { variances, n_total, targets })
}

/// Bonferroni-adjusted p-values `min(1, g p)` for a family of size `g`.
pub fn bonferroni(p_values: &[f64], group_size: usize) -> Vec<f64> {
    let g = group_size.max(1) as f64;
    p_values.iter().map(|p| (p * g).min(1.0)).collect()
}
