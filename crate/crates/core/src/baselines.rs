//! Comparison methods: uncorrected plug-in estimates and percentile
//! bootstrap intervals built on them.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lasso::{self, LassoFit, SolverOptions, TuningRule};
use crate::model::{LinkKind, PairedStudy, TargetFunctional, Trait};
use crate::relatedness::{estimate_correlation, PooledCovariance, RowCovariance};
use crate::rng::{rng_for, Stream};

/// Share of failed replicates above which the bootstrap is abandoned.
pub const MAX_FAILED_SHARE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlugInEstimates {
    pub cov: f64,
    pub var_y: f64,
    pub var_w: f64,
    pub corr: f64,
}

impl PlugInEstimates {
    pub fn value(&self, target: TargetFunctional) -> f64 {
        match target {
            TargetFunctional::Covariance => self.cov,
            TargetFunctional::VarianceY => self.var_y,
            TargetFunctional::VarianceW => self.var_w,
            TargetFunctional::Correlation => self.corr,
        }
    }
}

pub fn plug_in_estimates<S: PooledCovariance>(fit_y: &LassoFit, fit_w: &LassoFit, sigma: &S) -> PlugInEstimates {
    let b = fit_y.coefficients.view();
    let g = fit_w.coefficients.view();
    let cov = sigma.bilinear(b, g);
    let var_y = sigma.bilinear(b, b);
    let var_w = sigma.bilinear(g, g);
    PlugInEstimates { cov, var_y, var_w, corr: estimate_correlation(cov, var_y, var_w).value }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapOptions {
    pub replicates: usize,
    pub resample_size: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        Self { replicates: 500, resample_size: 100, alpha: 0.05, seed: 0 }
    }
}

impl BootstrapOptions {
    pub fn check(&self, study: &PairedStudy) -> Result<()> {
        if self.replicates < 2 {
            return Err(Error::Config(format!("bootstrap needs >= 2 replicates, got {}", self.replicates)));
        }
        let cap = study.n1().min(study.n2());
        if self.resample_size < 2 || self.resample_size > cap {
            return Err(Error::Config(format!(
                "resample size {} must lie in [2, {cap}]",
                self.resample_size
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Domain(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub lower: f64,
    pub upper: f64,
    /// Values of the successful replicates in replicate order.
    pub replicate_values: Vec<f64>,
    pub failed: usize,
}

impl BootstrapResult {
    /// Test by interval inversion.
    pub fn rejects(&self, null_value: f64) -> bool {
        null_value < self.lower || null_value > self.upper
    }
}

/// Order-statistic percentile interval of `values`.
pub fn percentile_interval(values: &[f64], alpha: f64) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let r = v.len();
    let rank = |q: f64| ((q * r as f64).ceil() as usize).clamp(1, r) - 1;
    (v[rank(alpha / 2.0)], v[rank(1.0 - alpha / 2.0)])
}

fn single_class(y: &[f64]) -> bool {
    y.iter().all(|v| *v == y[0])
}

/// Percentile bootstrap of the plug-in estimate with fixed penalty levels.
pub fn bootstrap_with_lambdas(
    study: &PairedStudy,
    target: TargetFunctional,
    opts: &BootstrapOptions,
    lambda_y: f64,
    lambda_w: f64,
    solver: &SolverOptions,
) -> Result<BootstrapResult> {
    opts.check(study)?;
    let need_y = target != TargetFunctional::VarianceW;
    let need_w = target != TargetFunctional::VarianceY;
    let k = opts.resample_size;

    let outcomes: Vec<Result<Option<f64>>> = (0..opts.replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng_for(opts.seed, Stream::Bootstrap, r as u64);
            let rows_y: Vec<usize> = (0..k).map(|_| rng.random_range(0..study.n1())).collect();
            let rows_w: Vec<usize> = (0..k).map(|_| rng.random_range(0..study.n2())).collect();
            let sub = study.subset(&rows_y, &rows_w, 0);
            let degenerate = solver.link == LinkKind::Logistic
                && ((need_y && single_class(sub.y.as_slice().unwrap_or(&[0.0])))
                    || (need_w && single_class(sub.w.as_slice().unwrap_or(&[0.0]))));
            if degenerate {
                return Ok(None);
            }
            let p = sub.p();
            let fit_for = |t: Trait, lambda: f64, needed: bool| -> Result<LassoFit> {
                if needed {
                    lasso::fit(sub.covariates(t), sub.response(t), lambda, solver)
                } else {
                    Ok(LassoFit::null(p, lambda))
                }
            };
            let fy = fit_for(Trait::Y, lambda_y, need_y)?;
            let fw = fit_for(Trait::W, lambda_w, need_w)?;
            Ok(Some(plug_in_estimates(&fy, &fw, &RowCovariance::new(&sub)).value(target)))
        })
        .collect();

    let mut values = Vec::with_capacity(opts.replicates);
    let mut failed = 0;
    for o in outcomes {
        match o? {
            Some(v) => values.push(v),
            None => failed += 1,
        }
    }
    if failed as f64 > MAX_FAILED_SHARE * opts.replicates as f64 || values.is_empty() {
        return Err(Error::Bootstrap { failed, total: opts.replicates });
    }
    let (lower, upper) = percentile_interval(&values, opts.alpha);
    Ok(BootstrapResult { lower, upper, replicate_values: values, failed })
}

/// Percentile bootstrap of the plug-in estimate. Penalty levels are
/// selected once on the full study and reused by every replicate.
pub fn bootstrap_ci(
    study: &PairedStudy,
    target: TargetFunctional,
    opts: &BootstrapOptions,
    tuning: &TuningRule,
    solver: &SolverOptions,
) -> Result<BootstrapResult> {
    let ly = lasso::select_lambda(study.x.view(), study.y.view(), tuning, solver)?.lambda;
    let lw = lasso::select_lambda(study.z.view(), study.w.view(), tuning, solver)?.lambda;
    bootstrap_with_lambdas(study, target, opts, ly, lw, solver)
}
