//! L1-penalized logistic (or least-squares) regression with an optionally
//! penalized intercept.
//!
//! Minimizes
//!
//! ```text
//! (1/n) sum_i loss(y_i, a + x_i'b) + lambda * (|b|_1 + |a|)
//! ```
//!
//! where `loss` is the logistic negative log-likelihood (or half the
//! squared error for the identity link). The outer loop builds the IRLS
//! quadratic model of the loss at the current point, solves the penalized
//! weighted least-squares subproblem by cyclic coordinate descent over an
//! active set, and accepts the resulting direction through a backtracking
//! line search on the true objective.

use ndarray::{Array1, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sigmoid, LinkKind};

/// Floor applied to IRLS working weights `h(1-h)`.
pub const WEIGHT_FLOOR: f64 = 1e-5;

const MAX_INNER_PASSES: usize = 100_000;
const ARMIJO: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Outer (quadratic model) iterations.
    pub max_iterations: usize,
    /// Relative objective change below which the solver counts a stalled
    /// iteration.
    pub objective_tolerance: f64,
    pub kkt_tolerance: f64,
    pub penalize_intercept: bool,
    pub link: LinkKind,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            objective_tolerance: 1e-9,
            kkt_tolerance: 1e-6,
            penalize_intercept: true,
            link: LinkKind::Logistic,
        }
    }
}

impl SolverOptions {
    pub fn with_link(link: LinkKind) -> Self {
        Self { link, ..Self::default() }
    }

    fn check(&self) -> Result<()> {
        if !(self.objective_tolerance > 0.0 && self.kkt_tolerance > 0.0) {
            return Err(Error::Config("solver tolerances must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoFit {
    pub intercept: f64,
    pub coefficients: Array1<f64>,
    pub lambda: f64,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Largest violation of the subgradient optimality conditions.
    pub kkt_residual: f64,
}

impl LassoFit {
    /// A fit with every parameter at zero.
    pub fn null(p: usize, lambda: f64) -> Self {
        Self {
            intercept: 0.0,
            coefficients: Array1::zeros(p),
            lambda,
            objective: f64::NAN,
            iterations: 0,
            converged: true,
            kkt_residual: 0.0,
        }
    }

    /// Linear predictor `intercept + row'coefficients`.
    pub fn linear_predictor(&self, row: ArrayView1<'_, f64>) -> f64 {
        self.intercept + row.dot(&self.coefficients)
    }

    pub fn nonzero_count(&self) -> usize {
        self.coefficients.iter().filter(|b| **b != 0.0).count()
    }
}

/// `sign(z) * max(|z| - t, 0)`.
#[inline]
pub fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Penalty level `C * sqrt(ln p / n)`.
pub fn lambda_from_constant(c: f64, n: usize, p: usize) -> Result<f64> {
    if p < 2 {
        return Err(Error::Domain(format!("lambda needs p >= 2, got {p}")));
    }
    if n == 0 {
        return Err(Error::Domain("lambda needs n >= 1".into()));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::Domain(format!("tuning constant must be positive, got {c}")));
    }
    Ok(c * ((p as f64).ln() / n as f64).sqrt())
}

#[inline]
fn softplus(eta: f64) -> f64 {
    eta.max(0.0) + (-eta.abs()).exp().ln_1p()
}

/// Per-observation loss for the given link.
#[inline]
fn unit_loss(link: LinkKind, y: f64, eta: f64) -> f64 {
    match link {
        LinkKind::Logistic => softplus(eta) - y * eta,
        LinkKind::Identity => 0.5 * (y - eta) * (y - eta),
    }
}

/// Column-major copy of a design, the layout coordinate descent wants.
pub(crate) struct Problem<'a> {
    n: usize,
    p: usize,
    cols: Vec<f64>,
    y: ArrayView1<'a, f64>,
}

impl<'a> Problem<'a> {
    pub(crate) fn new(x: ArrayView2<'_, f64>, y: ArrayView1<'a, f64>) -> Result<Self> {
        let (n, p) = x.dim();
        if y.len() != n {
            return Err(Error::Shape(format!("design has {n} rows but response has {}", y.len())));
        }
        if n == 0 {
            return Err(Error::Shape("empty design".into()));
        }
        let mut cols = vec![0.0; n * p];
        for (i, row) in x.rows().into_iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                cols[j * n + i] = *v;
            }
        }
        Ok(Self { n, p, cols, y })
    }

    #[inline]
    fn col(&self, j: usize) -> &[f64] {
        &self.cols[j * self.n..(j + 1) * self.n]
    }

    fn predictor(&self, a: f64, b: &[f64]) -> Vec<f64> {
        let mut eta = vec![a; self.n];
        for (j, &bj) in b.iter().enumerate() {
            if bj != 0.0 {
                for (e, x) in eta.iter_mut().zip(self.col(j)) {
                    *e += bj * x;
                }
            }
        }
        eta
    }

    fn penalty(&self, lambda: f64, a: f64, b: &[f64], pen_int: bool) -> f64 {
        let l1: f64 = b.iter().map(|v| v.abs()).sum();
        lambda * (l1 + if pen_int { a.abs() } else { 0.0 })
    }

    fn loss(&self, link: LinkKind, eta: &[f64]) -> f64 {
        let s: f64 = eta.iter().zip(self.y.iter()).map(|(&e, &y)| unit_loss(link, y, e)).sum();
        s / self.n as f64
    }

    /// Gradient of the smooth loss: (intercept part, coefficient part).
    fn gradient(&self, link: LinkKind, eta: &[f64]) -> (f64, Vec<f64>) {
        let resid: Vec<f64> =
            eta.iter().zip(self.y.iter()).map(|(&e, &y)| link.mean(e) - y).collect();
        let inv_n = 1.0 / self.n as f64;
        let g0 = resid.iter().sum::<f64>() * inv_n;
        let g = (0..self.p)
            .map(|j| self.col(j).iter().zip(&resid).map(|(x, r)| x * r).sum::<f64>() * inv_n)
            .collect();
        (g0, g)
    }

    pub(crate) fn solve(
        &self,
        lambda: f64,
        opts: &SolverOptions,
        start: Option<(f64, &[f64])>,
    ) -> Result<(LassoFit, Vec<f64>)> {
        opts.check()?;
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Domain(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        let link = opts.link;
        if link == LinkKind::Logistic {
            if let Some(bad) = self.y.iter().find(|v| **v != 0.0 && **v != 1.0) {
                return Err(Error::Domain(format!("logistic response must be 0/1, found {bad}")));
            }
            let first = self.y[0];
            let constant = self.y.iter().all(|v| *v == first);
            if constant && (!opts.penalize_intercept || lambda == 0.0) {
                return Err(Error::DivergingIntercept { value: first });
            }
        }

        let n = self.n;
        let inv_n = 1.0 / n as f64;
        let pen_int = opts.penalize_intercept;
        let (mut a, mut b) = match start {
            Some((a0, b0)) if b0.len() == self.p => (a0, b0.to_vec()),
            _ => (0.0, vec![0.0; self.p]),
        };
        let mut eta = self.predictor(a, &b);
        let mut obj = self.loss(link, &eta) + self.penalty(lambda, a, &b, pen_int);
        let mut trace = vec![obj];

        let mut wts = vec![1.0; n];
        let mut resid = vec![0.0; n];
        let mut q = vec![0.0; self.p];
        let mut stalled = 0usize;
        let mut iterations = 0usize;
        let mut kkt = f64::INFINITY;

        while iterations < opts.max_iterations {
            let (g0, g) = self.gradient(link, &eta);
            kkt = kkt_from_gradient(g0, &g, a, &b, lambda, pen_int);
            if kkt <= opts.kkt_tolerance {
                break;
            }
            iterations += 1;

            // Quadratic model: weights and working residuals z - eta.
            for i in 0..n {
                match link {
                    LinkKind::Logistic => {
                        let h = sigmoid(eta[i]);
                        let wi = (h * (1.0 - h)).max(WEIGHT_FLOOR);
                        wts[i] = wi;
                        resid[i] = (self.y[i] - h) / wi;
                    }
                    LinkKind::Identity => {
                        wts[i] = 1.0;
                        resid[i] = self.y[i] - eta[i];
                    }
                }
            }
            for (j, qj) in q.iter_mut().enumerate() {
                *qj = self.col(j).iter().zip(&wts).map(|(x, w)| w * x * x).sum::<f64>() * inv_n;
            }
            let q0 = wts.iter().sum::<f64>() * inv_n;

            let inner_tol = (0.05 * kkt).max(0.01 * opts.kkt_tolerance);
            let (a_new, b_new) =
                self.coordinate_descent(lambda, pen_int, a, &b, &wts, &mut resid, &q, q0, inner_tol);

            // Direction and predicted decrease.
            let da = a_new - a;
            let db: Vec<f64> = b_new.iter().zip(&b).map(|(x, y)| x - y).collect();
            let mut xd = vec![da; n];
            for (j, &d) in db.iter().enumerate() {
                if d != 0.0 {
                    for (e, x) in xd.iter_mut().zip(self.col(j)) {
                        *e += d * x;
                    }
                }
            }
            let grad_dot = g0 * da + g.iter().zip(&db).map(|(x, y)| x * y).sum::<f64>();
            let old_pen = self.penalty(lambda, a, &b, pen_int);
            let delta = grad_dot + self.penalty(lambda, a_new, &b_new, pen_int) - old_pen;

            let mut t = 1.0;
            let mut accepted = None;
            let mut cand_eta = vec![0.0; n];
            while t > 1e-12 {
                for i in 0..n {
                    cand_eta[i] = eta[i] + t * xd[i];
                }
                let ca = a + t * da;
                let cb: Vec<f64> = b.iter().zip(&db).map(|(x, d)| x + t * d).collect();
                let cand_obj = self.loss(link, &cand_eta) + self.penalty(lambda, ca, &cb, pen_int);
                if cand_obj <= obj + ARMIJO * t * delta.min(0.0) {
                    accepted = Some((ca, cb, cand_obj));
                    break;
                }
                t *= 0.5;
            }
            let Some((ca, cb, cand_obj)) = accepted else {
                break;
            };
            let rel = (obj - cand_obj).abs() / obj.abs().max(1.0);
            a = ca;
            b = cb;
            std::mem::swap(&mut eta, &mut cand_eta);
            obj = cand_obj;
            trace.push(obj);
            if rel < opts.objective_tolerance {
                stalled += 1;
                if stalled >= 5 {
                    break;
                }
            } else {
                stalled = 0;
            }
        }
        if iterations == opts.max_iterations || kkt > opts.kkt_tolerance {
            let (g0, g) = self.gradient(link, &eta);
            kkt = kkt_from_gradient(g0, &g, a, &b, lambda, pen_int);
        }
        let fit = LassoFit {
            intercept: a,
            coefficients: Array1::from(b),
            lambda,
            objective: obj,
            iterations,
            converged: kkt <= opts.kkt_tolerance,
            kkt_residual: kkt,
        };
        Ok((fit, trace))
    }

    /// Penalized weighted least squares by cyclic coordinate descent.
    /// `resid` holds the working residual `z - a - Xb` on entry.
    #[allow(clippy::too_many_arguments)]
    fn coordinate_descent(
        &self,
        lambda: f64,
        pen_int: bool,
        a0: f64,
        b0: &[f64],
        wts: &[f64],
        resid: &mut [f64],
        q: &[f64],
        q0: f64,
        tol: f64,
    ) -> (f64, Vec<f64>) {
        let inv_n = 1.0 / self.n as f64;
        let mut a = a0;
        let mut b = b0.to_vec();
        let mut active: Vec<usize> = (0..self.p).filter(|&j| b[j] != 0.0).collect();
        let mut in_active: Vec<bool> = b.iter().map(|v| *v != 0.0).collect();

        let update_intercept = |a: &mut f64, resid: &mut [f64]| -> f64 {
            let u = q0 * *a + resid.iter().zip(wts).map(|(r, w)| r * w).sum::<f64>() * inv_n;
            let new = if pen_int { soft_threshold(u, lambda) / q0 } else { u / q0 };
            let d = new - *a;
            if d != 0.0 {
                for r in resid.iter_mut() {
                    *r -= d;
                }
                *a = new;
            }
            q0 * d.abs()
        };

        let update = |j: usize, b: &mut [f64], resid: &mut [f64]| -> f64 {
            let qj = q[j];
            if qj <= 0.0 {
                let d = -b[j];
                b[j] = 0.0;
                return d.abs();
            }
            let col = self.col(j);
            let gj = col.iter().zip(resid.iter()).zip(wts).map(|((x, r), w)| x * r * w).sum::<f64>()
                * inv_n;
            let new = soft_threshold(qj * b[j] + gj, lambda) / qj;
            let d = new - b[j];
            if d != 0.0 {
                for (r, x) in resid.iter_mut().zip(col) {
                    *r -= d * x;
                }
                b[j] = new;
            }
            qj * d.abs()
        };

        let mut passes = 0usize;
        loop {
            // Full sweep; admits new coordinates to the active set.
            let mut max_change = update_intercept(&mut a, resid);
            for j in 0..self.p {
                let c = update(j, &mut b, resid);
                max_change = max_change.max(c);
                if b[j] != 0.0 && !in_active[j] {
                    in_active[j] = true;
                    active.push(j);
                }
            }
            passes += 1;
            if max_change < tol || passes >= MAX_INNER_PASSES {
                break;
            }
            // Cycle the active set to convergence.
            loop {
                let mut max_change = update_intercept(&mut a, resid);
                for &j in &active {
                    max_change = max_change.max(update(j, &mut b, resid));
                }
                passes += 1;
                if max_change < tol || passes >= MAX_INNER_PASSES {
                    break;
                }
            }
        }
        (a, b)
    }
}

fn kkt_from_gradient(g0: f64, g: &[f64], a: f64, b: &[f64], lambda: f64, pen_int: bool) -> f64 {
    let coord = |gj: f64, bj: f64, penalized: bool| -> f64 {
        if !penalized {
            gj.abs()
        } else if bj != 0.0 {
            (gj + lambda * bj.signum()).abs()
        } else {
            (gj.abs() - lambda).max(0.0)
        }
    };
    let mut worst = coord(g0, a, pen_int);
    for (gj, bj) in g.iter().zip(b) {
        worst = worst.max(coord(*gj, *bj, true));
    }
    worst
}

/// Fits the penalized regression of `y` on `x` at penalty level `lambda`.
pub fn fit(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    lambda: f64,
    opts: &SolverOptions,
) -> Result<LassoFit> {
    fit_traced(x, y, lambda, opts, None).map(|(f, _)| f)
}

/// Like [`fit`], optionally warm-started, also returning the objective value
/// after every accepted iteration (the first entry is the starting point).
pub fn fit_traced(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    lambda: f64,
    opts: &SolverOptions,
    start: Option<&LassoFit>,
) -> Result<(LassoFit, Vec<f64>)> {
    let problem = Problem::new(x, y)?;
    let start = start.and_then(|s| s.coefficients.as_slice().map(|b| (s.intercept, b)));
    problem.solve(lambda, opts, start)
}

/// Penalized objective of an arbitrary parameter vector.
pub fn objective(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    intercept: f64,
    coefficients: ArrayView1<'_, f64>,
    lambda: f64,
    opts: &SolverOptions,
) -> f64 {
    let n = x.nrows() as f64;
    let loss: f64 = x
        .rows()
        .into_iter()
        .zip(y.iter())
        .map(|(row, &yi)| unit_loss(opts.link, yi, intercept + row.dot(&coefficients)))
        .sum::<f64>()
        / n;
    let l1: f64 = coefficients.iter().map(|v| v.abs()).sum();
    loss + lambda * (l1 + if opts.penalize_intercept { intercept.abs() } else { 0.0 })
}

/// Largest subgradient-condition violation of `fit` on `(x, y)`.
pub fn kkt_residual(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    fit: &LassoFit,
    opts: &SolverOptions,
) -> f64 {
    let n = x.nrows() as f64;
    let p = x.ncols();
    let mut g0 = 0.0;
    let mut g = vec![0.0; p];
    for (row, &yi) in x.rows().into_iter().zip(y.iter()) {
        let r = opts.link.mean(fit.linear_predictor(row)) - yi;
        g0 += r;
        for (gj, xj) in g.iter_mut().zip(row.iter()) {
            *gj += r * xj;
        }
    }
    g0 /= n;
    g.iter_mut().for_each(|v| *v /= n);
    let b = fit.coefficients.to_vec();
    kkt_from_gradient(g0, &g, fit.intercept, &b, fit.lambda, opts.penalize_intercept)
}

/// How the penalty level is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum TuningRule {
    FixedC { c: f64 },
    CrossValidate { grid: Vec<f64>, folds: usize, seed: u64 },
}

impl Default for TuningRule {
    fn default() -> Self {
        TuningRule::FixedC { c: DEFAULT_C }
    }
}

/// Tuning constant used throughout the reference simulations.
pub const DEFAULT_C: f64 = 0.12;

impl TuningRule {
    pub fn cross_validate(grid: Vec<f64>) -> Self {
        TuningRule::CrossValidate { grid, folds: 10, seed: 0 }
    }

    pub fn check(&self) -> Result<()> {
        match self {
            TuningRule::FixedC { c } if !(*c > 0.0) => {
                Err(Error::Config(format!("tuning constant must be positive, got {c}")))
            }
            TuningRule::CrossValidate { grid, folds, .. } => {
                if grid.is_empty() || grid.iter().any(|c| !(*c > 0.0)) {
                    return Err(Error::Config("CV grid must be nonempty and positive".into()));
                }
                if *folds < 2 {
                    return Err(Error::Config(format!("CV needs at least 2 folds, got {folds}")));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvEntry {
    pub c: f64,
    pub mean_deviance: f64,
    pub fold_deviances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub lambda: f64,
    pub c: f64,
    /// Sorted by increasing C; empty for a fixed constant.
    pub cv_table: Vec<CvEntry>,
}

/// Mean held-out deviance of a fit: `-2 log-likelihood` per observation for
/// the logistic link, squared error for the identity link.
fn mean_deviance(link: LinkKind, fit: &LassoFit, x: ArrayView2<'_, f64>, y: &[f64]) -> f64 {
    let mut s = 0.0;
    for (row, &yi) in x.rows().into_iter().zip(y) {
        let eta = fit.linear_predictor(row);
        s += match link {
            LinkKind::Logistic => 2.0 * (softplus(eta) - yi * eta),
            LinkKind::Identity => (yi - eta) * (yi - eta),
        };
    }
    s / y.len() as f64
}

/// Chooses the penalty level per `rule`. Cross-validation minimizes mean
/// held-out deviance; near-ties go to the larger constant.
pub fn select_lambda(
    x: ArrayView2<'_, f64>,
    y: ArrayView1<'_, f64>,
    rule: &TuningRule,
    opts: &SolverOptions,
) -> Result<LambdaSelection> {
    rule.check()?;
    let (n, p) = x.dim();
    match rule {
        TuningRule::FixedC { c } => {
            Ok(LambdaSelection { lambda: lambda_from_constant(*c, n, p)?, c: *c, cv_table: vec![] })
        }
        TuningRule::CrossValidate { grid, folds, seed } => {
            if *folds > n {
                return Err(Error::Config(format!("{folds} folds for {n} samples")));
            }
            let first = y[0];
            if y.iter().all(|v| *v == first) {
                return Err(Error::ConstantResponse);
            }
            let mut cs = grid.clone();
            cs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            cs.dedup();

            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed));
            let mut fold_of = vec![0usize; n];
            for (rank, &i) in order.iter().enumerate() {
                fold_of[i] = rank % folds;
            }

            let per_fold: Vec<Vec<f64>> = (0..*folds)
                .into_par_iter()
                .map(|k| -> Result<Vec<f64>> {
                    let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != k).collect();
                    let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == k).collect();
                    let xt = x.select(ndarray::Axis(0), &train);
                    let yt = y.select(ndarray::Axis(0), &train);
                    let xv = x.select(ndarray::Axis(0), &test);
                    let yv: Vec<f64> = test.iter().map(|&i| y[i]).collect();
                    let problem = Problem::new(xt.view(), yt.view())?;
                    let mut devs = vec![0.0; cs.len()];
                    let mut warm: Option<LassoFit> = None;
                    // Largest constant first: descending lambda.
                    for (idx, &c) in cs.iter().enumerate().rev() {
                        let lambda = lambda_from_constant(c, train.len(), p)?;
                        let start = warm.as_ref().and_then(|f| {
                            f.coefficients.as_slice().map(|b| (f.intercept, b))
                        });
                        let (fit, _) = match problem.solve(lambda, opts, start) {
                            Ok(r) => r,
                            // Single-class training fold with an unpenalized intercept.
                            Err(Error::DivergingIntercept { .. }) => {
                                devs[idx] = f64::INFINITY;
                                continue;
                            }
                            Err(e) => return Err(e),
                        };
                        devs[idx] = mean_deviance(opts.link, &fit, xv.view(), &yv);
                        warm = Some(fit);
                    }
                    Ok(devs)
                })
                .collect::<Result<_>>()?;

            let cv_table: Vec<CvEntry> = cs
                .iter()
                .enumerate()
                .map(|(idx, &c)| {
                    let fold_deviances: Vec<f64> = per_fold.iter().map(|d| d[idx]).collect();
                    let mean_deviance = fold_deviances.iter().sum::<f64>() / *folds as f64;
                    CvEntry { c, mean_deviance, fold_deviances }
                })
                .collect();
            let best = cv_table
                .iter()
                .map(|e| e.mean_deviance)
                .fold(f64::INFINITY, f64::min);
            let tie = 1e-12 * best.abs().max(1e-300);
            let chosen = cv_table
                .iter()
                .rev()
                .find(|e| e.mean_deviance <= best + tie)
                .map(|e| e.c)
                .unwrap_or(cs[cs.len() - 1]);
            Ok(LambdaSelection { lambda: lambda_from_constant(chosen, n, p)?, c: chosen, cv_table })
        }
    }
}
