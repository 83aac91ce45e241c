//! Weighted bias-corrected estimators of the genetic covariance, the two
//! genetic variances and the genetic correlation.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lasso::{self, LambdaSelection, LassoFit, SolverOptions, TuningRule};
use crate::model::{LinkKind, PairedStudy, Scenario, Trait};
use crate::rng::{rng_for, Stream};

/// Linear predictors beyond this magnitude are clipped before weighting.
pub const ETA_CLIP: f64 = 30.0;

/// Pooled second-moment matrix of the distinct covariate rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrixEstimate {
    pub sigma_hat: Array2<f64>,
    pub effective_n: usize,
}

/// Quadratic forms against a pooled covariance estimate.
pub trait PooledCovariance {
    /// `b' S g`.
    fn bilinear(&self, b: ArrayView1<'_, f64>, g: ArrayView1<'_, f64>) -> f64;
    fn effective_n(&self) -> usize;
}

impl PooledCovariance for CovarianceMatrixEstimate {
    fn bilinear(&self, b: ArrayView1<'_, f64>, g: ArrayView1<'_, f64>) -> f64 {
        b.dot(&self.sigma_hat.dot(&g))
    }

    fn effective_n(&self) -> usize {
        self.effective_n
    }
}

/// Evaluates pooled quadratic forms from the rows directly, as
/// `(1/N) sum_i (x_i'b)(x_i'g)`, without forming the p x p matrix.
#[derive(Debug, Clone, Copy)]
pub struct RowCovariance<'a> {
    study: &'a PairedStudy,
}

impl<'a> RowCovariance<'a> {
    pub fn new(study: &'a PairedStudy) -> Self {
        Self { study }
    }

    /// Per-distinct-row products `(x_i'b)(x_i'g)`.
    pub fn row_products(&self, b: ArrayView1<'_, f64>, g: ArrayView1<'_, f64>) -> Vec<f64> {
        self.study.distinct_rows().map(|r| r.dot(&b) * r.dot(&g)).collect()
    }
}

impl PooledCovariance for RowCovariance<'_> {
    fn bilinear(&self, b: ArrayView1<'_, f64>, g: ArrayView1<'_, f64>) -> f64 {
        self.row_products(b, g).iter().sum::<f64>() / self.effective_n() as f64
    }

    fn effective_n(&self) -> usize {
        self.study.effective_n()
    }
}

fn check_study_shape(study: &PairedStudy) -> Result<()> {
    if study.x.ncols() != study.z.ncols() {
        return Err(Error::Shape(format!(
            "X has {} columns but Z has {}",
            study.x.ncols(),
            study.z.ncols()
        )));
    }
    if study.effective_n() == 0 {
        return Err(Error::Shape("study has no rows".into()));
    }
    Ok(())
}

/// Pooled covariance over distinct rows; shared rows count once.
pub fn pooled_covariance(study: &PairedStudy) -> Result<CovarianceMatrixEstimate> {
    check_study_shape(study)?;
    let skip = study.shared_rows().min(study.n2());
    let z_rest = study.z.slice(ndarray::s![skip.., ..]);
    let n = study.effective_n();
    let mut s = study.x.t().dot(&study.x);
    s += &z_rest.t().dot(&z_rest);
    s /= n as f64;
    // Symmetrize exactly.
    let p = s.nrows();
    for i in 0..p {
        for j in 0..i {
            let v = 0.5 * (s[[i, j]] + s[[j, i]]);
            s[[i, j]] = v;
            s[[j, i]] = v;
        }
    }
    Ok(CovarianceMatrixEstimate { sigma_hat: s, effective_n: n })
}

/// Weight `1 / (h(eta)(1 - h(eta)))` applied to each residual, plus
/// whether `eta` had to be clipped.
pub fn correction_weight_checked(eta: f64, link: LinkKind) -> (f64, bool) {
    match link {
        LinkKind::Identity => (1.0, false),
        LinkKind::Logistic => {
            let clipped = eta.abs() > ETA_CLIP;
            let e = eta.clamp(-ETA_CLIP, ETA_CLIP);
            (e.exp() + (-e).exp() + 2.0, clipped)
        }
    }
}

/// `(1 + e^eta)^2 / e^eta` for the logistic link, `1` for the identity link.
pub fn correction_weight(eta: f64, link: LinkKind) -> f64 {
    correction_weight_checked(eta, link).0
}

/// A correction term with the number of clipped linear predictors.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Correction {
    pub value: f64,
    pub clipped: usize,
}

/// `v' (1/n) sum_i w_i (h(eta_i) - resp_i) M_i`.
pub fn bias_correction_term(
    direction: ArrayView1<'_, f64>,
    fit: &LassoFit,
    m: ArrayView2<'_, f64>,
    resp: ArrayView1<'_, f64>,
    link: LinkKind,
) -> Result<Correction> {
    let (n, p) = m.dim();
    if direction.len() != p || fit.coefficients.len() != p || resp.len() != n {
        return Err(Error::Shape(format!(
            "correction term: M is {n}x{p}, direction {}, coefficients {}, responses {}",
            direction.len(),
            fit.coefficients.len(),
            resp.len()
        )));
    }
    if n == 0 {
        return Ok(Correction::default());
    }
    let mut acc = 0.0;
    let mut clipped = 0;
    for (row, &r) in m.rows().into_iter().zip(resp.iter()) {
        let eta = fit.linear_predictor(row);
        let (wt, c) = correction_weight_checked(eta, link);
        clipped += c as usize;
        acc += wt * (link.mean(eta) - r) * row.dot(&direction);
    }
    Ok(Correction { value: acc / n as f64, clipped })
}

/// Debiased `b' S g`: plug-in minus the correction from each trait.
pub fn estimate_covariance<S: PooledCovariance>(
    fit_y: &LassoFit,
    fit_w: &LassoFit,
    study: &PairedStudy,
    sigma: &S,
    link: LinkKind,
) -> Result<f64> {
    let plug = sigma.bilinear(fit_y.coefficients.view(), fit_w.coefficients.view());
    let cy = bias_correction_term(fit_w.coefficients.view(), fit_y, study.x.view(), study.y.view(), link)?;
    let cw = bias_correction_term(fit_y.coefficients.view(), fit_w, study.z.view(), study.w.view(), link)?;
    Ok(plug - cy.value - cw.value)
}

/// Debiased `b' S b` for one trait.
pub fn estimate_variance<S: PooledCovariance>(
    fit: &LassoFit,
    m: ArrayView2<'_, f64>,
    resp: ArrayView1<'_, f64>,
    sigma: &S,
    link: LinkKind,
) -> Result<f64> {
    let b = fit.coefficients.view();
    let plug = sigma.bilinear(b, b);
    let c = bias_correction_term(b, fit, m, resp, link)?;
    Ok(plug - 2.0 * c.value)
}

/// Clamped correlation estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEstimate {
    pub value: f64,
    /// The variance product was not positive, so the value is 0 by rule.
    pub degenerate: bool,
}

pub fn estimate_correlation(cov_yw: f64, var_y: f64, var_w: f64) -> CorrelationEstimate {
    let prod = var_y * var_w;
    if !(prod > 0.0) {
        return CorrelationEstimate { value: 0.0, degenerate: true };
    }
    let r = cov_yw / prod.sqrt();
    let value = if r * r < 1.0 { r } else { r.signum() };
    CorrelationEstimate { value, degenerate: false }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CorrectionTerms {
    /// Correction to the covariance from the y-trait residuals.
    pub cov_from_y: f64,
    /// Correction to the covariance from the w-trait residuals.
    pub cov_from_w: f64,
    /// Single correction to `b'Sb`; the estimator subtracts it twice.
    pub var_y: f64,
    pub var_w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasedEstimates {
    pub cov_yw: f64,
    pub var_y: f64,
    pub var_w: f64,
    pub corr: f64,
    pub corr_degenerate: bool,
    pub plug_in_cov: f64,
    pub plug_in_var_y: f64,
    pub plug_in_var_w: f64,
    pub correction_terms: CorrectionTerms,
    /// Linear predictors clipped while weighting residuals.
    pub clipped_weights: usize,
}

/// Computes every debiased and plug-in estimate from two fits.
pub fn debiased_estimates<S: PooledCovariance>(
    fit_y: &LassoFit,
    fit_w: &LassoFit,
    study: &PairedStudy,
    sigma: &S,
    link: LinkKind,
) -> Result<DebiasedEstimates> {
    check_study_shape(study)?;
    let b = fit_y.coefficients.view();
    let g = fit_w.coefficients.view();
    let plug_cov = sigma.bilinear(b, g);
    let plug_vy = sigma.bilinear(b, b);
    let plug_vw = sigma.bilinear(g, g);
    let (x, y, z, w) = (study.x.view(), study.y.view(), study.z.view(), study.w.view());
    let cy = bias_correction_term(g, fit_y, x, y, link)?;
    let cw = bias_correction_term(b, fit_w, z, w, link)?;
    let vy = bias_correction_term(b, fit_y, x, y, link)?;
    let vw = bias_correction_term(g, fit_w, z, w, link)?;
    let cov = plug_cov - cy.value - cw.value;
    let var_y = plug_vy - 2.0 * vy.value;
    let var_w = plug_vw - 2.0 * vw.value;
    let r = estimate_correlation(cov, var_y, var_w);
    Ok(DebiasedEstimates {
        cov_yw: cov,
        var_y,
        var_w,
        corr: r.value,
        corr_degenerate: r.degenerate,
        plug_in_cov: plug_cov,
        plug_in_var_y: plug_vy,
        plug_in_var_w: plug_vw,
        correction_terms: CorrectionTerms {
            cov_from_y: cy.value,
            cov_from_w: cw.value,
            var_y: vy.value,
            var_w: vw.value,
        },
        // The variance corrections revisit the same rows.
        clipped_weights: cy.clipped + cw.clipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    /// Center covariates by pooled column means first.
    pub center: bool,
    /// Fit on one half of the samples and correct on the other.
    pub split: bool,
    pub split_seed: u64,
    pub solver: SolverOptions,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self { center: true, split: false, split_seed: 0, solver: SolverOptions::default() }
    }
}

/// Which original rows fed each stage.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RowUsage {
    pub fit_rows_y: Vec<usize>,
    pub fit_rows_w: Vec<usize>,
    pub correction_rows_y: Vec<usize>,
    pub correction_rows_w: Vec<usize>,
}

/// Everything the pipeline produced, including what inference needs.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub estimates: DebiasedEstimates,
    pub fit_y: LassoFit,
    pub fit_w: LassoFit,
    pub selection_y: LambdaSelection,
    pub selection_w: LambdaSelection,
    /// Centered rows on which the corrections and covariance were computed.
    pub analysis: PairedStudy,
    pub column_means: Array1<f64>,
    pub rows: RowUsage,
    pub link: LinkKind,
}

impl PipelineOutput {
    pub fn converged(&self) -> bool {
        self.fit_y.converged && self.fit_w.converged
    }
}

/// Splits each trait's rows into a fitting half and a correction half,
/// keeping shared rows paired.
fn split_rows(study: &PairedStudy, seed: u64) -> (Vec<usize>, Vec<usize>, usize, Vec<usize>, Vec<usize>, usize) {
    let m = study.shared_rows();
    let mut rng = rng_for(seed, Stream::Split, 0);
    let mut shared: Vec<usize> = (0..m).collect();
    let mut only_y: Vec<usize> = (m..study.n1()).collect();
    let mut only_w: Vec<usize> = (m..study.n2()).collect();
    shared.shuffle(&mut rng);
    only_y.shuffle(&mut rng);
    only_w.shuffle(&mut rng);
    let (s_fit, s_cor) = shared.split_at(m / 2);
    let (y_fit, y_cor) = only_y.split_at(only_y.len() / 2);
    let (w_fit, w_cor) = only_w.split_at(only_w.len() / 2);
    let sort = |a: &[usize]| {
        let mut v = a.to_vec();
        v.sort_unstable();
        v
    };
    let (s_fit, s_cor) = (sort(s_fit), sort(s_cor));
    let join = |s: &[usize], o: Vec<usize>| s.iter().copied().chain(o).collect::<Vec<_>>();
    (
        join(&s_fit, sort(y_fit)),
        join(&s_fit, sort(w_fit)),
        s_fit.len(),
        join(&s_cor, sort(y_cor)),
        join(&s_cor, sort(w_cor)),
        s_cor.len(),
    )
}

fn fit_trait(
    study: &PairedStudy,
    t: Trait,
    tuning: &TuningRule,
    opts: &SolverOptions,
) -> Result<(LassoFit, LambdaSelection)> {
    let x = study.covariates(t);
    let y = study.response(t);
    let sel = lasso::select_lambda(x, y, tuning, opts)?;
    let fit = lasso::fit(x, y, sel.lambda, opts)?;
    Ok((fit, sel))
}

/// Centers, tunes and fits both traits, then computes all estimates.
pub fn full_pipeline(
    study: &PairedStudy,
    tuning: &TuningRule,
    opts: &PipelineOptions,
) -> Result<PipelineOutput> {
    let study = study.clone().normalized();
    check_study_shape(&study)?;
    if study.scenario == Scenario::Overlapped && study.overlap > study.n1().min(study.n2()) {
        return Err(Error::InvalidStudy(format!("overlap {} exceeds sample sizes", study.overlap)));
    }
    let (work, means) = if opts.center {
        study.centered()?
    } else {
        (study.clone(), Array1::zeros(study.p()))
    };

    let (fit_study, analysis, rows) = if opts.split {
        let (fy, fw, fs, cy, cw, cs) = split_rows(&work, opts.split_seed);
        let fit_study = work.subset(&fy, &fw, fs);
        let analysis = work.subset(&cy, &cw, cs);
        let rows = RowUsage {
            fit_rows_y: fy,
            fit_rows_w: fw,
            correction_rows_y: cy,
            correction_rows_w: cw,
        };
        (fit_study, analysis, rows)
    } else {
        let all_y: Vec<usize> = (0..work.n1()).collect();
        let all_w: Vec<usize> = (0..work.n2()).collect();
        let rows = RowUsage {
            fit_rows_y: all_y.clone(),
            fit_rows_w: all_w.clone(),
            correction_rows_y: all_y,
            correction_rows_w: all_w,
        };
        (work.clone(), work, rows)
    };

    let solver = &opts.solver;
    let (ry, rw) = rayon::join(
        || fit_trait(&fit_study, Trait::Y, tuning, solver),
        || fit_trait(&fit_study, Trait::W, tuning, solver),
    );
    let (fit_y, selection_y) = ry?;
    let (fit_w, selection_w) = rw?;

    let estimates =
        debiased_estimates(&fit_y, &fit_w, &analysis, &RowCovariance::new(&analysis), solver.link)?;
    Ok(PipelineOutput {
        estimates,
        fit_y,
        fit_w,
        selection_y,
        selection_w,
        analysis,
        column_means: means,
        rows,
        link: solver.link,
    })
}

/// Stacks the distinct rows of a study into one matrix.
pub fn distinct_row_matrix(study: &PairedStudy) -> Array2<f64> {
    let skip = study.shared_rows().min(study.n2());
    ndarray::concatenate(Axis(0), &[study.x.view(), study.z.slice(ndarray::s![skip.., ..])])
        .expect("column counts checked by caller")
}
