//! Trait files: a header row, a 0/1 response column, then covariates.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

/// Rows of one CSV file, split into response columns and covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct TraitTable {
    pub responses: Vec<Array1<f64>>,
    pub covariates: Array2<f64>,
}

/// Reads a file whose first `response_names.len()` columns are the named
/// responses and whose remaining columns are covariates.
pub fn read_table(path: &Path, response_names: &[&str]) -> Result<TraitTable> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers().with_context(|| format!("{}: cannot read header", path.display()))?.clone();
    let k = response_names.len();
    for (i, name) in response_names.iter().enumerate() {
        if headers.get(i) != Some(*name) {
            bail!("{}: line 1: column {} must be named `{name}`", path.display(), i + 1);
        }
    }
    let p = headers.len().saturating_sub(k);
    if p == 0 {
        bail!("{}: line 1: no covariate columns", path.display());
    }
    let mut responses = vec![Vec::new(); k];
    let mut cov = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2;
        let record = record.with_context(|| format!("{}: line {line}: malformed record", path.display()))?;
        if record.len() != k + p {
            bail!("{}: line {line}: expected {} fields, found {}", path.display(), k + p, record.len());
        }
        for (col, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                anyhow::anyhow!("{}: line {line}: column {} is not a number: {field:?}", path.display(), col + 1)
            })?;
            if col < k {
                responses[col].push(v);
            } else {
                cov.push(v);
            }
        }
    }
    let n = responses[0].len();
    if n == 0 {
        bail!("{}: no data rows", path.display());
    }
    Ok(TraitTable {
        responses: responses.into_iter().map(Array1::from).collect(),
        covariates: Array2::from_shape_vec((n, p), cov)?,
    })
}

/// Reads a single-trait file with columns `y, x1..xp`.
pub fn read_trait(path: &Path) -> Result<(Array2<f64>, Array1<f64>)> {
    let mut t = read_table(path, &["y"])?;
    Ok((t.covariates, t.responses.remove(0)))
}

/// Writes `y, x1..xp` with shortest round-trip float formatting.
pub fn write_trait(path: &Path, x: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>) -> Result<()> {
    let mut out = std::io::BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?);
    let mut header = vec!["y".to_string()];
    header.extend((1..=x.ncols()).map(|j| format!("x{j}")));
    writeln!(out, "{}", header.join(","))?;
    for (row, yi) in x.rows().into_iter().zip(y.iter()) {
        write!(out, "{yi}")?;
        for v in row {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}
