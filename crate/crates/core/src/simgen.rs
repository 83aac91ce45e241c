//! Synthetic paired-trait studies with known ground truth.

use std::collections::HashMap;

use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sigmoid, PairedStudy};
use crate::relatedness::estimate_correlation;
use crate::rng::{rng_for, Stream};

/// Upper quartile of the standard normal; latent genotype thresholds sit
/// at plus and minus this value.
pub const LATENT_QUARTILE: f64 = 0.674_489_750_196_081_7;

const MAX_REJECTION_ATTEMPTS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SigmaKind {
    /// Block diagonal with identical unit-diagonal Toeplitz blocks whose
    /// off-diagonals fall linearly from about 0.3 to 0.
    BlockToeplitz {
        #[serde(default = "default_blocks")]
        blocks: usize,
    },
    Exchangeable {
        #[serde(default = "default_rho")]
        rho: f64,
    },
    Ar1 { rho: f64 },
    Identity,
    Custom { matrix: Vec<Vec<f64>> },
}

fn default_blocks() -> usize {
    10
}

fn default_rho() -> f64 {
    0.2
}

fn default_range() -> (f64, f64) {
    (-1.0, 1.0)
}

/// Full generative configuration of a simulated study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDesign {
    pub n1: usize,
    pub n2: usize,
    #[serde(default)]
    pub m: usize,
    pub p: usize,
    pub sigma: SigmaKind,
    /// Nonzero coefficients per trait.
    pub k: usize,
    #[serde(default = "default_range")]
    pub effect_range: (f64, f64),
    /// Support coordinates shared by both traits.
    pub shared_support: usize,
    #[serde(default)]
    pub intercept_y: f64,
    #[serde(default)]
    pub intercept_w: f64,
    /// Redraw coefficients until |b'Sg| exceeds this.
    #[serde(default)]
    pub cov_floor: Option<f64>,
    /// Threshold latent Gaussians to centered genotypes in {-1, 0, 1}.
    #[serde(default)]
    pub genotype_mode: bool,
    #[serde(default)]
    pub seed: u64,
}

impl SimDesign {
    /// Model-generated Gaussian design: two traits on a common support of
    /// size 25 with uniform effects on [-1, 1].
    pub fn gaussian(n: usize, p: usize, sigma: SigmaKind) -> Self {
        Self {
            n1: n,
            n2: n,
            m: 0,
            p,
            sigma,
            k: 25,
            effect_range: (-1.0, 1.0),
            shared_support: 25,
            intercept_y: 0.0,
            intercept_w: 0.0,
            cov_floor: None,
            genotype_mode: false,
            seed: 0,
        }
    }

    /// Genotype-like design: 25 associated variants per trait, 12 shared.
    pub fn genotype(n: usize, p: usize) -> Self {
        Self {
            shared_support: 12,
            genotype_mode: true,
            ..Self::gaussian(n, p, SigmaKind::BlockToeplitz { blocks: 10 })
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |s: String| Err(Error::Config(s));
        if self.p == 0 || self.n1 == 0 || self.n2 == 0 {
            return bad("n1, n2 and p must be positive".into());
        }
        if self.k > self.p {
            return bad(format!("sparsity {} exceeds p = {}", self.k, self.p));
        }
        if self.shared_support > self.k {
            return bad(format!("shared support {} exceeds k = {}", self.shared_support, self.k));
        }
        if 2 * self.k - self.shared_support > self.p {
            return bad("union of supports exceeds p".into());
        }
        if self.m > self.n1.min(self.n2) {
            return bad(format!("overlap {} exceeds min(n1, n2)", self.m));
        }
        if let Some(f) = self.cov_floor {
            if !(f >= 0.0) {
                return bad(format!("cov_floor must be >= 0, got {f}"));
            }
        }
        let (lo, hi) = self.effect_range;
        if !(lo < hi) {
            return bad(format!("empty effect range ({lo}, {hi})"));
        }
        Ok(())
    }
}

/// Ground truth for one simulated study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueParams {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Population covariance of the covariates as generated.
    #[serde(skip)]
    pub sigma: Array2<f64>,
    pub intercept_y: f64,
    pub intercept_w: f64,
    pub cov_yw: f64,
    pub var_y: f64,
    pub var_w: f64,
    pub corr: f64,
    /// max(|beta|_2, |gamma|_2)
    pub u_norm: f64,
    /// min(|beta|_2, |gamma|_2)
    pub l_norm: f64,
}

impl TrueParams {
    pub fn value(&self, target: crate::model::TargetFunctional) -> f64 {
        use crate::model::TargetFunctional::*;
        match target {
            Covariance => self.cov_yw,
            VarianceY => self.var_y,
            VarianceW => self.var_w,
            Correlation => self.corr,
        }
    }
}

/// Block-diagonal Toeplitz covariance. Entry at lag `d` inside a block of
/// nominal size `b = ceil(p / blocks)` is `3(b-1-d) / (10(b-1))`; a final
/// shorter block reuses the same profile.
pub fn sigma_block_toeplitz(p: usize, blocks: usize) -> Result<Array2<f64>> {
    if blocks == 0 || p < blocks {
        return Err(Error::Config(format!("need p >= blocks >= 1, got p={p}, blocks={blocks}")));
    }
    let b = p.div_ceil(blocks);
    if b < 2 {
        return Err(Error::DegenerateBlock(b));
    }
    let lag = |d: usize| 3.0 * (b - 1 - d) as f64 / (10.0 * (b - 1) as f64);
    let mut s = Array2::zeros((p, p));
    for i in 0..p {
        for j in 0..p {
            if i / b == j / b {
                s[[i, j]] = if i == j { 1.0 } else { lag(i.abs_diff(j)) };
            }
        }
    }
    Ok(s)
}

/// Unit diagonal, constant off-diagonal `rho`.
pub fn sigma_exchangeable(p: usize, rho: f64) -> Result<Array2<f64>> {
    let lower = if p > 1 { -1.0 / (p as f64 - 1.0) } else { f64::NEG_INFINITY };
    if !(rho > lower && rho < 1.0) {
        return Err(Error::Config(format!(
            "exchangeable correlation {rho} is outside the positive-definite range ({lower}, 1)"
        )));
    }
    Ok(Array2::from_shape_fn((p, p), |(i, j)| if i == j { 1.0 } else { rho }))
}

pub fn sigma_ar1(p: usize, rho: f64) -> Result<Array2<f64>> {
    if !(rho.abs() < 1.0) {
        return Err(Error::Config(format!("AR(1) correlation must satisfy |rho| < 1, got {rho}")));
    }
    Ok(Array2::from_shape_fn((p, p), |(i, j)| rho.powi(i.abs_diff(j) as i32)))
}

pub fn build_sigma(kind: &SigmaKind, p: usize) -> Result<Array2<f64>> {
    match kind {
        SigmaKind::BlockToeplitz { blocks } => sigma_block_toeplitz(p, *blocks),
        SigmaKind::Exchangeable { rho } => sigma_exchangeable(p, *rho),
        SigmaKind::Ar1 { rho } => sigma_ar1(p, *rho),
        SigmaKind::Identity => Ok(Array2::eye(p)),
        SigmaKind::Custom { matrix } => {
            if matrix.len() != p || matrix.iter().any(|r| r.len() != p) {
                return Err(Error::Shape(format!("custom sigma must be {p}x{p}")));
            }
            let s = Array2::from_shape_fn((p, p), |(i, j)| matrix[i][j]);
            for i in 0..p {
                for j in 0..i {
                    if (s[[i, j]] - s[[j, i]]).abs() > 1e-12 {
                        return Err(Error::Config("custom sigma is not symmetric".into()));
                    }
                }
            }
            Ok(s)
        }
    }
}

/// Lower Cholesky factor that remembers where each row's nonzeros start, so
/// block-diagonal covariances sample in time proportional to block size.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    l: Array2<f64>,
    row_start: Vec<usize>,
}

impl CholeskyFactor {
    pub fn new(s: &Array2<f64>) -> Result<Self> {
        let p = s.nrows();
        if s.ncols() != p {
            return Err(Error::Shape("covariance must be square".into()));
        }
        let mut row_start = vec![0usize; p];
        for i in 0..p {
            row_start[i] = (0..=i).find(|&j| s[[i, j]] != 0.0).unwrap_or(i);
        }
        // Envelope fill: a row's nonzeros cannot begin before its first
        // nonzero in the input.
        let mut l = Array2::<f64>::zeros((p, p));
        for i in 0..p {
            for j in row_start[i]..=i {
                let from = row_start[i].max(row_start[j]);
                let mut sum = s[[i, j]];
                for k in from..j {
                    sum -= l[[i, k]] * l[[j, k]];
                }
                if i == j {
                    if !(sum > 0.0) {
                        return Err(Error::NotPositiveDefinite { index: i, pivot: sum });
                    }
                    l[[i, i]] = sum.sqrt();
                } else {
                    l[[i, j]] = sum / l[[j, j]];
                }
            }
        }
        Ok(Self { l, row_start })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.l
    }

    pub fn min_pivot(&self) -> f64 {
        self.l.diag().iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `L z` for a vector of independent standard normals.
    pub fn apply(&self, z: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let row = self.l.row(i);
            let mut s = 0.0;
            for k in self.row_start[i]..=i {
                s += row[k] * z[k];
            }
            *o = s;
        }
    }
}

/// `Cov(g_j, g_k)` for latent standard normals with correlation `rho`
/// thresholded to genotypes `1[z > -q] + 1[z > q]`.
///
/// Uses `d/dr P(Z1 > a, Z2 > b; r) = phi2(a, b; r)`, so the covariance of
/// two indicators is the integral of the bivariate density from 0 to rho.
pub fn genotype_covariance(rho: f64) -> f64 {
    if rho == 0.0 {
        return 0.0;
    }
    let q2 = LATENT_QUARTILE * LATENT_QUARTILE;
    // Sum over the four threshold pairs (+-q, +-q).
    let integrand = |r: f64| {
        let s = (1.0 - r * r).sqrt();
        (2.0 * (-q2 / (1.0 + r)).exp() + 2.0 * (-q2 / (1.0 - r)).exp())
            / (2.0 * std::f64::consts::PI * s)
    };
    let intervals = 1024;
    let h = rho / intervals as f64;
    let mut acc = integrand(0.0) + integrand(rho);
    for i in 1..intervals {
        let wgt = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += wgt * integrand(i as f64 * h);
    }
    acc * h / 3.0
}

/// Variance of a single thresholded genotype: 0.25 * 1 + 0.25 * 1 = 0.5.
pub const GENOTYPE_VARIANCE: f64 = 0.5;

/// Covariance of thresholded genotypes for a latent covariance `s`.
pub fn genotype_sigma(s: &Array2<f64>) -> Array2<f64> {
    let p = s.nrows();
    let mut cache: HashMap<u64, f64> = HashMap::new();
    let mut out = Array2::zeros((p, p));
    for i in 0..p {
        out[[i, i]] = GENOTYPE_VARIANCE;
        for j in 0..i {
            let rho = s[[i, j]] / (s[[i, i]] * s[[j, j]]).sqrt();
            let c = *cache.entry(rho.to_bits()).or_insert_with(|| genotype_covariance(rho));
            out[[i, j]] = c;
            out[[j, i]] = c;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub support_y: Vec<usize>,
    pub support_w: Vec<usize>,
}

fn sparse_bilinear(sigma: &Array2<f64>, b: &[f64], sb: &[usize], g: &[f64], sg: &[usize]) -> f64 {
    let mut s = 0.0;
    for &j in sb {
        for &l in sg {
            s += b[j] * sigma[[j, l]] * g[l];
        }
    }
    s
}

/// Draws the two sparse coefficient vectors. Supports are uniform without
/// replacement with exactly `shared_support` common coordinates; nonzero
/// values are uniform on the effect range.
pub fn draw_coefficients<R: Rng>(
    design: &SimDesign,
    sigma: &Array2<f64>,
    rng: &mut R,
) -> Result<Coefficients> {
    design.validate()?;
    let (p, k, shared) = (design.p, design.k, design.shared_support);
    let (lo, hi) = design.effect_range;
    let unif = Uniform::new_inclusive(lo, hi).map_err(|e| Error::Config(e.to_string()))?;
    for _ in 0..MAX_REJECTION_ATTEMPTS {
        let support_y: Vec<usize> = sample(rng, p, k).into_vec();
        let mut in_y = vec![false; p];
        support_y.iter().for_each(|&j| in_y[j] = true);
        let shared_idx = sample(rng, k, shared).into_vec();
        let mut support_w: Vec<usize> = shared_idx.iter().map(|&i| support_y[i]).collect();
        let rest: Vec<usize> = (0..p).filter(|j| !in_y[*j]).collect();
        support_w.extend(sample(rng, rest.len(), k - shared).into_iter().map(|i| rest[i]));

        let mut beta = vec![0.0; p];
        let mut gamma = vec![0.0; p];
        support_y.iter().for_each(|&j| beta[j] = unif.sample(rng));
        support_w.iter().for_each(|&j| gamma[j] = unif.sample(rng));

        let ok = match design.cov_floor {
            Some(floor) => sparse_bilinear(sigma, &beta, &support_y, &gamma, &support_w).abs() > floor,
            None => true,
        };
        if ok {
            return Ok(Coefficients { beta, gamma, support_y, support_w });
        }
    }
    Err(Error::ConstraintInfeasible { attempts: MAX_REJECTION_ATTEMPTS })
}

/// Precomputed covariance structure of a design, reusable across rounds.
#[derive(Debug, Clone)]
pub struct SimModel {
    pub design: SimDesign,
    /// Covariance of the latent Gaussian rows.
    pub latent_sigma: Array2<f64>,
    /// Covariance of the covariates actually emitted.
    pub sigma: Array2<f64>,
    factor: CholeskyFactor,
    latent_sd: Vec<f64>,
}

impl SimModel {
    pub fn new(design: &SimDesign) -> Result<Self> {
        design.validate()?;
        let latent_sigma = build_sigma(&design.sigma, design.p)?;
        let factor = CholeskyFactor::new(&latent_sigma)?;
        let sigma =
            if design.genotype_mode { genotype_sigma(&latent_sigma) } else { latent_sigma.clone() };
        let latent_sd = latent_sigma.diag().iter().map(|v| v.sqrt()).collect();
        Ok(Self { design: design.clone(), latent_sigma, sigma, factor, latent_sd })
    }

    /// Ground truth for given coefficients.
    pub fn truth(&self, c: &Coefficients) -> TrueParams {
        let s = &self.sigma;
        let cov = sparse_bilinear(s, &c.beta, &c.support_y, &c.gamma, &c.support_w);
        let vy = sparse_bilinear(s, &c.beta, &c.support_y, &c.beta, &c.support_y);
        let vw = sparse_bilinear(s, &c.gamma, &c.support_w, &c.gamma, &c.support_w);
        let nb = c.beta.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ng = c.gamma.iter().map(|v| v * v).sum::<f64>().sqrt();
        TrueParams {
            beta: c.beta.clone(),
            gamma: c.gamma.clone(),
            sigma: s.clone(),
            intercept_y: self.design.intercept_y,
            intercept_w: self.design.intercept_w,
            cov_yw: cov,
            var_y: vy,
            var_w: vw,
            corr: estimate_correlation(cov, vy, vw).value,
            u_norm: nb.max(ng),
            l_norm: nb.min(ng),
        }
    }

    fn covariate_row(&self, seed: u64, stream: Stream, i: usize) -> Vec<f64> {
        let p = self.design.p;
        let mut rng = rng_for(seed, stream, i as u64);
        let z: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut x = vec![0.0; p];
        self.factor.apply(&z, &mut x);
        if self.design.genotype_mode {
            for (v, sd) in x.iter_mut().zip(&self.latent_sd) {
                let t = LATENT_QUARTILE * sd;
                // Genotype in {0,1,2} minus its population mean 1.
                *v = (*v > -t) as u8 as f64 + (*v > t) as u8 as f64 - 1.0;
            }
        }
        x
    }

    fn responses(&self, x: &Array2<f64>, coef: &[f64], intercept: f64, seed: u64, stream: Stream) -> Array1<f64> {
        let coef = ndarray::ArrayView1::from(coef);
        Array1::from_iter(x.rows().into_iter().enumerate().map(|(i, row)| {
            let prob = sigmoid(intercept + row.dot(&coef));
            let u: f64 = rng_for(seed, stream, i as u64).random();
            if u < prob {
                1.0
            } else {
                0.0
            }
        }))
    }

    /// Draws coefficients, covariates and responses for one study. Every
    /// draw is keyed by `seed`.
    pub fn sample(&self, seed: u64) -> Result<(PairedStudy, TrueParams)> {
        let d = &self.design;
        let mut crng = rng_for(seed, Stream::Coefficients, 0);
        let coef = draw_coefficients(d, &self.sigma, &mut crng)?;
        let truth = self.truth(&coef);

        let x_rows: Vec<Vec<f64>> = (0..d.n1)
            .into_par_iter()
            .map(|i| self.covariate_row(seed, Stream::CovariatesY, i))
            .collect();
        let z_rows: Vec<Vec<f64>> = (d.m..d.n2)
            .into_par_iter()
            .map(|i| self.covariate_row(seed, Stream::CovariatesW, i))
            .collect();
        let x = Array2::from_shape_fn((d.n1, d.p), |(i, j)| x_rows[i][j]);
        let z = Array2::from_shape_fn((d.n2, d.p), |(i, j)| {
            if i < d.m {
                x_rows[i][j]
            } else {
                z_rows[i - d.m][j]
            }
        });
        let y = self.responses(&x, &coef.beta, d.intercept_y, seed, Stream::ResponseY);
        let w = self.responses(&z, &coef.gamma, d.intercept_w, seed, Stream::ResponseW);
        let study = if d.m > 0 {
            PairedStudy::overlapped(x, y, z, w, d.m)
        } else {
            PairedStudy::independent(x, y, z, w)
        };
        Ok((study, truth))
    }
}

/// One study drawn with the design's own seed.
pub fn sample_study(design: &SimDesign) -> Result<(PairedStudy, TrueParams)> {
    SimModel::new(design)?.sample(design.seed)
}
