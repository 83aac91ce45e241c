mod io;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use genrel_core::harness::{self, ExperimentSpec, ReportFormat};
use genrel_core::inference::infer_all;
use genrel_core::lasso::{self, SolverOptions};
use genrel_core::model::center_columns;
use genrel_core::simgen::{SimDesign, SimModel};
use genrel_core::{full_pipeline, validate_study, LinkKind, NullValues, PairedStudy, PipelineOptions, SampleCount, TuningRule};
use ndarray::{concatenate, Axis};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "genrel", version, about = "Debiased inference for genetic relatedness between binary traits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a paired study from a simulation design file.
    Simulate(SimulateArgs),
    /// Fit the penalized regression of one trait file.
    Fit(FitArgs),
    /// Estimate, test and build intervals for all four relatedness targets.
    Relate(RelateArgs),
    /// Run a Monte Carlo experiment from a spec file.
    Mc(McArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Link {
    Logistic,
    Identity,
}

impl From<Link> for LinkKind {
    fn from(l: Link) -> Self {
        match l {
            Link::Logistic => LinkKind::Logistic,
            Link::Identity => LinkKind::Identity,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScenarioArg {
    Independent,
    Overlapped,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
    Md,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Json => ReportFormat::Json,
            Format::Csv => ReportFormat::Csv,
            Format::Md => ReportFormat::Markdown,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Count {
    Distinct,
    Total,
}

#[derive(Args)]
struct Common {
    /// Seed for every random choice; drawn from system entropy and printed when absent.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Output file (default: stdout).
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    /// `fixed:C` for lambda = C sqrt(ln p / n), or `cv:C1,C2,...` for cross-validation.
    #[arg(long, default_value = "fixed:0.12")]
    tuning: String,
    #[arg(long, value_enum, default_value = "logistic")]
    link: Link,
    /// Skip centering covariates by their pooled column means.
    #[arg(long)]
    no_center: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulation design (JSON).
    #[arg(long)]
    design: PathBuf,
    /// Directory receiving trait_y.csv, trait_w.csv and truth.json.
    #[arg(long)]
    out_dir: PathBuf,
    /// Overrides the design's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct FitArgs {
    /// Trait file with columns y, x1..xp.
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct RelateArgs {
    /// Trait file for the first trait.
    #[arg(long)]
    y: PathBuf,
    /// Trait file for the second trait.
    #[arg(long)]
    w: PathBuf,
    /// Optional file of shared samples with columns y, w, x1..xp.
    #[arg(long)]
    shared: Option<PathBuf>,
    #[arg(long, value_enum)]
    scenario: Option<ScenarioArg>,
    /// Number of leading rows shared by both trait files.
    #[arg(long)]
    overlap: Option<usize>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[command(flatten)]
    model: ModelArgs,
    /// Fit on half of the samples and correct on the other half.
    #[arg(long)]
    split: bool,
    #[arg(long, default_value_t = 0.0)]
    null_cov: f64,
    #[arg(long, default_value_t = 0.0)]
    null_var_y: f64,
    #[arg(long, default_value_t = 0.0)]
    null_var_w: f64,
    #[arg(long, default_value_t = 0.0)]
    null_corr: f64,
    /// Family size for Bonferroni-adjusted p-values.
    #[arg(long)]
    bonferroni: Option<usize>,
    /// Sample count scaling intervals in the overlapped layout.
    #[arg(long, value_enum, default_value = "distinct")]
    sample_count: Count,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct McArgs {
    /// Experiment spec (JSON).
    #[arg(long)]
    spec: PathBuf,
    /// Zero runtimes so the report is byte-stable.
    #[arg(long)]
    canonical: bool,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    #[command(flatten)]
    common: Common,
}

fn parse_tuning(s: &str, seed: u64) -> Result<TuningRule> {
    let rule = match s.split_once(':') {
        Some(("fixed", c)) => TuningRule::FixedC { c: c.parse().context("tuning constant is not a number")? },
        Some(("cv", grid)) => {
            let grid = grid
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .context("CV grid must be comma-separated numbers")?;
            TuningRule::CrossValidate { grid, folds: 10, seed }
        }
        _ => bail!("tuning must look like `fixed:C` or `cv:C1,C2,...`, got {s:?}"),
    };
    rule.check()?;
    Ok(rule)
}

fn resolve_seed(flag: Option<u64>) -> u64 {
    flag.unwrap_or_else(|| {
        let s = rand::random::<u64>();
        eprintln!("seed: {s}");
        s
    })
}

fn set_workers(workers: Option<usize>) -> Result<()> {
    if let Some(w) = workers {
        if w == 0 {
            bail!("--workers must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(w).build_global()?;
    }
    Ok(())
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("cannot write {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

/// Reads a JSON file, and its `seed` field when present.
fn read_json_with_seed<T: serde::de::DeserializeOwned>(path: &Path) -> Result<(T, Option<u64>)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("{}: invalid JSON", path.display()))?;
    let seed = value.get("seed").and_then(|s| s.as_u64());
    let parsed = serde_json::from_value(value).with_context(|| format!("{}: invalid contents", path.display()))?;
    Ok((parsed, seed))
}

#[derive(Serialize)]
struct Truth<'a> {
    overlap: usize,
    #[serde(flatten)]
    params: &'a genrel_core::TrueParams,
}

fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let (mut design, file_seed): (SimDesign, _) = read_json_with_seed(&a.design)?;
    design.seed = resolve_seed(a.seed.or(file_seed));
    design.validate()?;
    let (study, truth) = SimModel::new(&design)?.sample(design.seed)?;
    std::fs::create_dir_all(&a.out_dir)?;
    io::write_trait(&a.out_dir.join("trait_y.csv"), study.x.view(), study.y.view())?;
    io::write_trait(&a.out_dir.join("trait_w.csv"), study.z.view(), study.w.view())?;
    let truth = Truth { overlap: study.shared_rows(), params: &truth };
    std::fs::write(a.out_dir.join("truth.json"), to_json(&truth)?)?;
    if study.shared_rows() > 0 {
        eprintln!("the first {} rows of both files are shared; relate with --overlap {}", study.shared_rows(), study.shared_rows());
    }
    Ok(())
}

#[derive(Serialize)]
struct FitReport {
    n: usize,
    p: usize,
    link: LinkKind,
    seed: u64,
    center: bool,
    lambda: f64,
    c: f64,
    intercept: f64,
    coefficients: Vec<f64>,
    nonzero: usize,
    objective: f64,
    iterations: usize,
    converged: bool,
    kkt_residual: f64,
    column_means: Vec<f64>,
    cv_table: Vec<lasso::CvEntry>,
}

fn cmd_fit(a: &FitArgs) -> Result<()> {
    set_workers(a.common.workers)?;
    let seed = resolve_seed(a.common.seed);
    let tuning = parse_tuning(&a.model.tuning, seed)?;
    let (x, y) = io::read_trait(&a.input)?;
    if let Some((row, v)) = y.iter().enumerate().find(|(_, v)| **v != 0.0 && **v != 1.0) {
        bail!("{}: line {}: response {v} is not 0 or 1", a.input.display(), row + 2);
    }
    let (x, means) = if a.model.no_center { (x.clone(), ndarray::Array1::zeros(x.ncols())) } else { center_columns(x.view(), None)? };
    let solver = SolverOptions::with_link(a.model.link.into());
    let sel = lasso::select_lambda(x.view(), y.view(), &tuning, &solver)?;
    let fit = lasso::fit(x.view(), y.view(), sel.lambda, &solver)?;
    let report = FitReport {
        n: x.nrows(),
        p: x.ncols(),
        link: solver.link,
        seed,
        center: !a.model.no_center,
        lambda: fit.lambda,
        c: sel.c,
        intercept: fit.intercept,
        coefficients: fit.coefficients.to_vec(),
        nonzero: fit.nonzero_count(),
        objective: fit.objective,
        iterations: fit.iterations,
        converged: fit.converged,
        kkt_residual: fit.kkt_residual,
        column_means: means.to_vec(),
        cv_table: sel.cv_table,
    };
    emit(a.common.out.as_deref(), &to_json(&report)?)
}

fn load_study(a: &RelateArgs) -> Result<PairedStudy> {
    let (x, y) = io::read_trait(&a.y)?;
    let (z, w) = io::read_trait(&a.w)?;
    let study = match (&a.shared, a.overlap) {
        (Some(_), Some(_)) => bail!("use either --shared or --overlap, not both"),
        (Some(path), None) => {
            if a.scenario == Some(ScenarioArg::Independent) {
                bail!("--shared requires the overlapped scenario");
            }
            let t = io::read_table(path, &["y", "w"])?;
            let m = t.covariates.nrows();
            let stack = |a: &ndarray::Array2<f64>, b: &ndarray::Array2<f64>| concatenate(Axis(0), &[a.view(), b.view()]);
            let cat = |a: &ndarray::Array1<f64>, b: &ndarray::Array1<f64>| concatenate(Axis(0), &[a.view(), b.view()]);
            PairedStudy::overlapped(
                stack(&t.covariates, &x).context("shared file and y file disagree on columns")?,
                cat(&t.responses[0], &y)?,
                stack(&t.covariates, &z).context("shared file and w file disagree on columns")?,
                cat(&t.responses[1], &w)?,
                m,
            )
        }
        (None, Some(m)) => {
            if a.scenario == Some(ScenarioArg::Independent) {
                bail!("--overlap requires the overlapped scenario");
            }
            PairedStudy::overlapped(x, y, z, w, m)
        }
        (None, None) => match a.scenario {
            Some(ScenarioArg::Overlapped) => bail!("the overlapped scenario needs --overlap or --shared"),
            _ => PairedStudy::independent(x, y, z, w),
        },
    };
    let study = study.normalized();
    let v = validate_study(&study);
    if !v.is_valid() {
        let list: Vec<String> = v.violations.iter().take(20).map(|x| format!("  - {x}")).collect();
        bail!("invalid study ({} violations):\n{}", v.violations.len(), list.join("\n"));
    }
    Ok(study)
}

fn cmd_relate(a: &RelateArgs) -> Result<()> {
    if !(a.alpha > 0.0 && a.alpha < 1.0) {
        bail!("--alpha must lie in (0, 1)");
    }
    set_workers(a.common.workers)?;
    let seed = resolve_seed(a.common.seed);
    let tuning = parse_tuning(&a.model.tuning, seed)?;
    let study = load_study(a)?;
    let diag = validate_study(&study).diagnostics;
    let opts = PipelineOptions {
        center: !a.model.no_center,
        split: a.split,
        split_seed: seed,
        solver: SolverOptions::with_link(a.model.link.into()),
    };
    let out = full_pipeline(&study, &tuning, &opts)?;
    let nulls = NullValues {
        covariance: a.null_cov,
        variance_y: a.null_var_y,
        variance_w: a.null_var_w,
        correlation: a.null_corr,
    };
    let count = match a.sample_count {
        Count::Distinct => SampleCount::Distinct,
        Count::Total => SampleCount::Total,
    };
    let inf = infer_all(&out, a.alpha, &nulls, count)?;
    let ctx = report::ReportContext {
        alpha: a.alpha,
        seed,
        center: opts.center,
        split: opts.split,
        bonferroni: a.bonferroni,
        case_fractions: (diag.case_fraction_y, diag.case_fraction_w),
    };
    let r = report::build(&out, &inf, &ctx, |t| nulls.get(t));
    for w in &r.warnings {
        eprintln!("warning: {w}");
    }
    let text = match a.format {
        Format::Json => to_json(&r)?,
        Format::Csv => report::to_csv(&r),
        Format::Md => report::to_markdown(&r),
    };
    emit(a.common.out.as_deref(), &text)
}

fn cmd_mc(a: &McArgs) -> Result<()> {
    let (mut spec, file_seed): (ExperimentSpec, _) = read_json_with_seed(&a.spec)?;
    spec.seed = resolve_seed(a.common.seed.or(file_seed));
    if a.common.workers.is_some() {
        spec.workers = a.common.workers;
    }
    spec.canonical |= a.canonical;
    let report = harness::run_tests(&spec)?;
    for f in &report.failures {
        eprintln!("warning: round {} failed: {}", f.round, f.reason);
    }
    let mut text = harness::render_report(&report, a.format.into())?;
    if !text.ends_with('\n') {
        text.push('\n');
    }
    emit(a.common.out.as_deref(), &text)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Relate(a) => cmd_relate(a),
        Command::Mc(a) => cmd_mc(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
