//! Shared domain types: the two-trait study layout, link functions, target
//! functionals, and data validation.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};

/// How the two traits' samples relate to each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Disjoint samples for the two traits.
    Independent,
    /// The first `m` covariate rows are shared by both traits.
    Overlapped,
}

/// Which of the two traits a row or fit belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trait {
    Y,
    W,
}

impl fmt::Display for Trait {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Trait::Y => write!(f, "y"),
            Trait::W => write!(f, "w"),
        }
    }
}

/// Mean function of the regression model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkKind {
    #[default]
    Logistic,
    Identity,
}

impl LinkKind {
    /// Inverse link evaluated at a linear predictor.
    #[inline]
    pub fn mean(self, eta: f64) -> f64 {
        match self {
            LinkKind::Logistic => sigmoid(eta),
            LinkKind::Identity => eta,
        }
    }
}

/// The four relatedness functionals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetFunctional {
    /// Genetic covariance b'Sg.
    Covariance,
    /// Genetic variance of trait y, b'Sb.
    VarianceY,
    /// Genetic variance of trait w, g'Sg.
    VarianceW,
    /// Genetic correlation, clamped to [-1, 1].
    Correlation,
}

impl TargetFunctional {
    pub const ALL: [TargetFunctional; 4] = [
        TargetFunctional::Covariance,
        TargetFunctional::VarianceY,
        TargetFunctional::VarianceW,
        TargetFunctional::Correlation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TargetFunctional::Covariance => "covariance",
            TargetFunctional::VarianceY => "variance_y",
            TargetFunctional::VarianceW => "variance_w",
            TargetFunctional::Correlation => "correlation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }
}

impl fmt::Display for TargetFunctional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Logistic function without input checks, evaluated in a form that never
/// overflows.
#[inline]
pub(crate) fn sigmoid(eta: f64) -> f64 {
    if eta < 0.0 {
        let e = eta.exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + (-eta).exp())
    }
}

/// The expit function `e^eta / (1 + e^eta)`.
pub fn expit(eta: f64) -> Result<f64> {
    if !eta.is_finite() {
        return Err(Error::Domain(format!("expit of non-finite value {eta}")));
    }
    Ok(sigmoid(eta))
}

/// Two-trait design. Covariate rows are stored dense and sample-major.
///
/// Construction does not enforce the invariants; run [`validate_study`]
/// before estimation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedStudy {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub z: Array2<f64>,
    pub w: Array1<f64>,
    pub overlap: usize,
    pub scenario: Scenario,
}

impl PairedStudy {
    pub fn independent(x: Array2<f64>, y: Array1<f64>, z: Array2<f64>, w: Array1<f64>) -> Self {
        Self { x, y, z, w, overlap: 0, scenario: Scenario::Independent }
    }

    pub fn overlapped(
        x: Array2<f64>,
        y: Array1<f64>,
        z: Array2<f64>,
        w: Array1<f64>,
        overlap: usize,
    ) -> Self {
        Self { x, y, z, w, overlap, scenario: Scenario::Overlapped }
    }

    pub fn n1(&self) -> usize {
        self.x.nrows()
    }

    pub fn n2(&self) -> usize {
        self.z.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Number of shared rows that count once in pooled quantities.
    pub fn shared_rows(&self) -> usize {
        match self.scenario {
            Scenario::Independent => 0,
            Scenario::Overlapped => self.overlap,
        }
    }

    /// Number of distinct covariate rows: n1 + n2 - m.
    pub fn effective_n(&self) -> usize {
        self.n1() + self.n2() - self.shared_rows()
    }

    /// An overlapped study with no shared rows is the independent layout.
    pub fn normalized(mut self) -> Self {
        if self.scenario == Scenario::Overlapped && self.overlap == 0 {
            self.scenario = Scenario::Independent;
        }
        self
    }

    pub fn covariates(&self, t: Trait) -> ArrayView2<'_, f64> {
        match t {
            Trait::Y => self.x.view(),
            Trait::W => self.z.view(),
        }
    }

    pub fn response(&self, t: Trait) -> ArrayView1<'_, f64> {
        match t {
            Trait::Y => self.y.view(),
            Trait::W => self.w.view(),
        }
    }

    /// Iterates over the distinct covariate rows: every X row, then the
    /// Z rows past the shared block.
    pub fn distinct_rows(&self) -> impl Iterator<Item = ArrayView1<'_, f64>> {
        let skip = self.shared_rows().min(self.n2());
        self.x.rows().into_iter().chain(self.z.rows().into_iter().skip(skip))
    }

    /// Column means over the distinct rows.
    pub fn pooled_means(&self) -> Array1<f64> {
        let mut sums = Array1::<f64>::zeros(self.p());
        let mut count = 0usize;
        for row in self.distinct_rows() {
            sums += &row;
            count += 1;
        }
        if count > 0 {
            sums /= count as f64;
        }
        sums
    }

    /// Returns a copy with both covariate matrices centered by the pooled
    /// column means, plus the means used.
    pub fn centered(&self) -> Result<(PairedStudy, Array1<f64>)> {
        let means = self.pooled_means();
        let (x, _) = center_columns(self.x.view(), Some(means.view()))?;
        let (z, _) = center_columns(self.z.view(), Some(means.view()))?;
        Ok((
            PairedStudy {
                x,
                y: self.y.clone(),
                z,
                w: self.w.clone(),
                overlap: self.overlap,
                scenario: self.scenario,
            },
            means,
        ))
    }

    /// Builds a sub-study from row subsets of each trait. `shared` is the
    /// number of leading entries of both index lists that refer to the
    /// same shared samples.
    pub fn subset(&self, rows_y: &[usize], rows_w: &[usize], shared: usize) -> PairedStudy {
        let x = self.x.select(Axis(0), rows_y);
        let y = self.y.select(Axis(0), rows_y);
        let z = self.z.select(Axis(0), rows_w);
        let w = self.w.select(Axis(0), rows_w);
        let scenario = if shared > 0 { Scenario::Overlapped } else { Scenario::Independent };
        PairedStudy { x, y, z, w, overlap: shared, scenario }
    }
}

/// A broken study invariant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    NoColumns,
    ColumnMismatch { x_cols: usize, z_cols: usize },
    ResponseLength { trait_: Trait, rows: usize, responses: usize },
    NonBinaryResponse { trait_: Trait, row: usize, value: f64 },
    NonFiniteCovariate { trait_: Trait, row: usize, col: usize },
    OverlapInIndependent { overlap: usize },
    OverlapOutOfRange { overlap: usize, max: usize },
    OverlapRowMismatch { row: usize, col: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoColumns => write!(f, "covariate matrices have no columns"),
            Violation::ColumnMismatch { x_cols, z_cols } => {
                write!(f, "column count mismatch: X has {x_cols}, Z has {z_cols}")
            }
            Violation::ResponseLength { trait_, rows, responses } => {
                write!(f, "trait {trait_}: {rows} covariate rows but {responses} responses")
            }
            Violation::NonBinaryResponse { trait_, row, value } => {
                write!(f, "trait {trait_}: row {row} has non-binary response {value}")
            }
            Violation::NonFiniteCovariate { trait_, row, col } => {
                write!(f, "trait {trait_}: non-finite covariate at row {row}, column {col}")
            }
            Violation::OverlapInIndependent { overlap } => {
                write!(f, "independent scenario declares overlap {overlap}")
            }
            Violation::OverlapOutOfRange { overlap, max } => {
                write!(f, "overlap {overlap} outside 1..={max}")
            }
            Violation::OverlapRowMismatch { row, col } => {
                write!(f, "shared row {row} differs between X and Z at column {col}")
            }
        }
    }
}

/// Marginal case fractions, used to eyeball whether case probabilities are
/// balanced away from 0 and 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceDiagnostics {
    pub case_fraction_y: f64,
    pub case_fraction_w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub diagnostics: BalanceDiagnostics,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

fn mean_or_nan(v: ArrayView1<'_, f64>) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.sum() / v.len() as f64
    }
}

/// Lists every broken [`PairedStudy`] invariant. Only the first differing
/// column is reported per mismatched shared row.
pub fn validate_study(study: &PairedStudy) -> ValidationReport {
    let mut violations = Vec::new();
    let (px, pz) = (study.x.ncols(), study.z.ncols());
    if px == 0 || pz == 0 {
        violations.push(Violation::NoColumns);
    }
    if px != pz {
        violations.push(Violation::ColumnMismatch { x_cols: px, z_cols: pz });
    }
    for (t, m, r) in [(Trait::Y, &study.x, &study.y), (Trait::W, &study.z, &study.w)] {
        if m.nrows() != r.len() {
            violations.push(Violation::ResponseLength { trait_: t, rows: m.nrows(), responses: r.len() });
        }
        for (row, &v) in r.iter().enumerate() {
            if v != 0.0 && v != 1.0 {
                violations.push(Violation::NonBinaryResponse { trait_: t, row, value: v });
            }
        }
        for ((row, col), v) in m.indexed_iter() {
            if !v.is_finite() {
                violations.push(Violation::NonFiniteCovariate { trait_: t, row, col });
            }
        }
    }
    match study.scenario {
        Scenario::Independent => {
            if study.overlap != 0 {
                violations.push(Violation::OverlapInIndependent { overlap: study.overlap });
            }
        }
        Scenario::Overlapped => {
            let max = study.n1().min(study.n2());
            if study.overlap == 0 || study.overlap > max {
                violations.push(Violation::OverlapOutOfRange { overlap: study.overlap, max });
            }
            if px == pz && study.overlap <= max {
                for row in 0..study.overlap {
                    let diff = study
                        .x
                        .row(row)
                        .iter()
                        .zip(study.z.row(row).iter())
                        .position(|(a, b)| a.to_bits() != b.to_bits());
                    if let Some(col) = diff {
                        violations.push(Violation::OverlapRowMismatch { row, col });
                    }
                }
            }
        }
    }
    ValidationReport {
        violations,
        diagnostics: BalanceDiagnostics {
            case_fraction_y: mean_or_nan(study.y.view()),
            case_fraction_w: mean_or_nan(study.w.view()),
        },
    }
}

/// Subtracts column means from `m`: the provided ones, or the matrix's own
/// empirical means.
pub fn center_columns(
    m: ArrayView2<'_, f64>,
    means: Option<ArrayView1<'_, f64>>,
) -> Result<(Array2<f64>, Array1<f64>)> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Err(Error::Shape("cannot center an empty matrix".into()));
    }
    let means = match means {
        Some(mu) => {
            if mu.len() != m.ncols() {
                return Err(Error::Shape(format!(
                    "means has length {} but matrix has {} columns",
                    mu.len(),
                    m.ncols()
                )));
            }
            mu.to_owned()
        }
        None => m.mean_axis(Axis(0)).expect("nonempty"),
    };
    let centered = &m - &means.view().insert_axis(Axis(0));
    Ok((centered, means))
}
