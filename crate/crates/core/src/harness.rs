//! Seeded Monte Carlo experiments: estimation error, interval coverage,
//! test size and power for each method and target.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{bootstrap_with_lambdas, BootstrapOptions};
use crate::error::{Error, Result};
use crate::inference::{hypothesis_test, infer_all, NullValues, SampleCount};
use crate::lasso::TuningRule;
use crate::model::TargetFunctional;
use crate::relatedness::{full_pipeline, PipelineOptions, PipelineOutput};
use crate::rng::{derive_seed, Stream};
use crate::simgen::{SimDesign, SimModel, TrueParams};

/// Share of failed rounds above which an experiment is an error.
pub const MAX_FAILED_ROUNDS: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Debiased,
    PlugIn,
    Bootstrap,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Debiased => "debiased",
            Method::PlugIn => "plug_in",
            Method::Bootstrap => "bootstrap",
        }
    }
}

/// What a run computes beyond point estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Point estimates only.
    Estimation,
    /// Point estimates, intervals and tests.
    Inference,
}

fn default_rounds() -> usize {
    200
}

fn default_alpha() -> f64 {
    0.05
}

fn default_methods() -> Vec<Method> {
    vec![Method::Debiased, Method::PlugIn]
}

fn default_targets() -> Vec<TargetFunctional> {
    TargetFunctional::ALL.to_vec()
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub design: SimDesign,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_targets")]
    pub targets: Vec<TargetFunctional>,
    #[serde(default)]
    pub tuning: TuningRule,
    /// Nulls for power; when absent no power is reported.
    #[serde(default)]
    pub null_values: Option<NullValues>,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; `None` uses the global pool.
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub bootstrap: BootstrapSettings,
    #[serde(default = "default_true")]
    pub center: bool,
    #[serde(default)]
    pub sample_count: SampleCount,
    /// Zero all runtimes so reports are byte-stable.
    #[serde(default)]
    pub canonical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSettings {
    pub replicates: usize,
    pub resample_size: usize,
}

impl Default for BootstrapSettings {
    fn default() -> Self {
        let d = BootstrapOptions::default();
        Self { replicates: d.replicates, resample_size: d.resample_size }
    }
}

impl ExperimentSpec {
    pub fn new(design: SimDesign) -> Self {
        Self {
            design,
            rounds: default_rounds(),
            alpha: default_alpha(),
            methods: default_methods(),
            targets: default_targets(),
            tuning: TuningRule::default(),
            null_values: None,
            seed: 0,
            workers: None,
            bootstrap: BootstrapSettings::default(),
            center: true,
            sample_count: SampleCount::default(),
            canonical: false,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("at least one target is required".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        self.tuning.check()?;
        self.design.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthValues {
    pub cov_yw: f64,
    pub var_y: f64,
    pub var_w: f64,
    pub corr: f64,
}

impl From<&TrueParams> for TruthValues {
    fn from(t: &TrueParams) -> Self {
        Self { cov_yw: t.cov_yw, var_y: t.var_y, var_w: t.var_w, corr: t.corr }
    }
}

impl TruthValues {
    pub fn value(&self, target: TargetFunctional) -> f64 {
        match target {
            TargetFunctional::Covariance => self.cov_yw,
            TargetFunctional::VarianceY => self.var_y,
            TargetFunctional::VarianceW => self.var_w,
            TargetFunctional::Correlation => self.corr,
        }
    }
}

/// One method's output for one target in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub method: Method,
    pub target: TargetFunctional,
    pub estimate: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    /// Interval could not be formed (undefined variance).
    pub undefined: bool,
    /// Rejection of the null at the true value.
    pub reject_true: Option<bool>,
    /// Rejection of the configured power null.
    pub reject_null: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub seed: u64,
    pub truth: TruthValues,
    pub entries: Vec<RecordEntry>,
    /// Milliseconds per method, in the spec's method order.
    pub runtime_ms: Vec<f64>,
    pub clipped_weights: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundFailure {
    pub round: usize,
    pub reason: String,
}

/// Aggregate metrics for one method and target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: Method,
    pub target: TargetFunctional,
    pub rmse: f64,
    pub coverage_pct: Option<f64>,
    pub mean_length: Option<f64>,
    pub type1_rate: Option<f64>,
    pub power: Option<f64>,
    pub mean_runtime_ms: f64,
    pub rounds_completed: usize,
    pub undefined_rounds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub spec: ExperimentSpec,
    pub rounds_requested: usize,
    pub failures: Vec<RoundFailure>,
    pub summaries: Vec<Summary>,
    pub records: Vec<RoundRecord>,
}

impl ExperimentReport {
    pub fn summary(&self, method: Method, target: TargetFunctional) -> Option<&Summary> {
        self.summaries.iter().find(|s| s.method == method && s.target == target)
    }
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn rate(v: impl Iterator<Item = bool>) -> Option<f64> {
    mean(v.map(|b| b as u8 as f64))
}

/// Aggregates per-round records into one summary per (method, target).
pub fn summarize(spec: &ExperimentSpec, records: &[RoundRecord]) -> Vec<Summary> {
    let mut out = Vec::new();
    for (mi, &method) in spec.methods.iter().enumerate() {
        for &target in &spec.targets {
            let rows: Vec<(&RoundRecord, &RecordEntry)> = records
                .iter()
                .filter_map(|r| r.entries.iter().find(|e| e.method == method && e.target == target).map(|e| (r, e)))
                .collect();
            let n = rows.len();
            let rmse = mean(rows.iter().map(|(r, e)| (e.estimate - r.truth.value(target)).powi(2)))
                .map_or(f64::NAN, f64::sqrt);
            let has_ci = rows.iter().any(|(_, e)| e.lower.is_some() || e.undefined);
            let coverage_pct = has_ci
                .then(|| {
                    rate(rows.iter().map(|(r, e)| match (e.lower, e.upper) {
                        (Some(l), Some(u)) => {
                            let t = r.truth.value(target);
                            l <= t && t <= u
                        }
                        _ => false,
                    }))
                    .map(|c| 100.0 * c)
                })
                .flatten();
            let mean_length = has_ci
                .then(|| mean(rows.iter().filter_map(|(_, e)| Some(e.upper? - e.lower?))))
                .flatten();
            let type1_rate = rate(rows.iter().filter_map(|(_, e)| e.reject_true));
            let power = rate(rows.iter().filter_map(|(_, e)| e.reject_null));
            let mean_runtime_ms = mean(rows.iter().map(|(r, _)| r.runtime_ms.get(mi).copied().unwrap_or(0.0)))
                .unwrap_or(0.0);
            let undefined_rounds = rows.iter().filter(|(_, e)| e.undefined).count();
            out.push(Summary {
                method,
                target,
                rmse,
                coverage_pct,
                mean_length,
                type1_rate,
                power,
                mean_runtime_ms,
                rounds_completed: n,
                undefined_rounds,
            });
        }
    }
    out
}

struct RoundContext<'a> {
    spec: &'a ExperimentSpec,
    model: &'a SimModel,
    protocol: Protocol,
}

fn target_point(out: &PipelineOutput, target: TargetFunctional, plug_in: bool) -> f64 {
    let e = &out.estimates;
    match (target, plug_in) {
        (TargetFunctional::Covariance, false) => e.cov_yw,
        (TargetFunctional::VarianceY, false) => e.var_y,
        (TargetFunctional::VarianceW, false) => e.var_w,
        (TargetFunctional::Correlation, false) => e.corr,
        (TargetFunctional::Covariance, true) => e.plug_in_cov,
        (TargetFunctional::VarianceY, true) => e.plug_in_var_y,
        (TargetFunctional::VarianceW, true) => e.plug_in_var_w,
        (TargetFunctional::Correlation, true) => {
            crate::relatedness::estimate_correlation(e.plug_in_cov, e.plug_in_var_y, e.plug_in_var_w).value
        }
    }
}

fn run_round(ctx: &RoundContext<'_>, round: usize) -> Result<RoundRecord> {
    let spec = ctx.spec;
    let seed = derive_seed(spec.seed, Stream::Round as u64, round as u64);
    let (study, truth) = ctx.model.sample(seed)?;
    let truth = TruthValues::from(&truth);
    let opts = PipelineOptions { center: spec.center, split_seed: seed, ..PipelineOptions::default() };

    let started = Instant::now();
    let out = full_pipeline(&study, &spec.tuning, &opts)?;
    if !out.converged() {
        return Err(Error::Config("lasso did not converge".into()));
    }
    let pipeline_ms = started.elapsed().as_secs_f64() * 1e3;
    let inference = match ctx.protocol {
        Protocol::Inference => {
            let truth_nulls = NullValues {
                covariance: truth.cov_yw,
                variance_y: truth.var_y,
                variance_w: truth.var_w,
                correlation: truth.corr,
            };
            let t = Instant::now();
            let s = infer_all(&out, spec.alpha, &truth_nulls, spec.sample_count)?;
            Some((s, t.elapsed().as_secs_f64() * 1e3))
        }
        Protocol::Estimation => None,
    };

    let mut entries = Vec::new();
    let mut runtime_ms = Vec::new();
    for &method in &spec.methods {
        let started = Instant::now();
        for &target in &spec.targets {
            let entry = match method {
                Method::PlugIn => RecordEntry {
                    method,
                    target,
                    estimate: target_point(&out, target, true),
                    lower: None,
                    upper: None,
                    undefined: false,
                    reject_true: None,
                    reject_null: None,
                },
                Method::Debiased => {
                    let estimate = target_point(&out, target, false);
                    match &inference {
                        None => RecordEntry {
                            method,
                            target,
                            estimate,
                            lower: None,
                            upper: None,
                            undefined: false,
                            reject_true: None,
                            reject_null: None,
                        },
                        Some((summary, _)) => {
                            let ti = summary.get(target);
                            match (&ti.result, ti.v2) {
                                (Some(r), Some(v2)) => {
                                    let reject_null = match &spec.null_values {
                                        Some(nv) => Some(
                                            hypothesis_test(
                                                estimate,
                                                v2,
                                                summary.n_total,
                                                nv.get(target),
                                                spec.alpha,
                                                target,
                                            )?
                                            .reject,
                                        ),
                                        None => None,
                                    };
                                    RecordEntry {
                                        method,
                                        target,
                                        estimate,
                                        lower: Some(r.ci_lower),
                                        upper: Some(r.ci_upper),
                                        undefined: false,
                                        reject_true: Some(r.reject),
                                        reject_null,
                                    }
                                }
                                // Undefined variance: no interval and no rejection.
                                _ => RecordEntry {
                                    method,
                                    target,
                                    estimate,
                                    lower: None,
                                    upper: None,
                                    undefined: true,
                                    reject_true: Some(false),
                                    reject_null: spec.null_values.map(|_| false),
                                },
                            }
                        }
                    }
                }
                Method::Bootstrap => {
                    let estimate = target_point(&out, target, true);
                    match ctx.protocol {
                        Protocol::Estimation => RecordEntry {
                            method,
                            target,
                            estimate,
                            lower: None,
                            upper: None,
                            undefined: false,
                            reject_true: None,
                            reject_null: None,
                        },
                        Protocol::Inference => {
                            let bopts = BootstrapOptions {
                                replicates: spec.bootstrap.replicates,
                                resample_size: spec.bootstrap.resample_size,
                                alpha: spec.alpha,
                                seed: derive_seed(seed, Stream::Bootstrap as u64, target as u64),
                            };
                            let b = bootstrap_with_lambdas(
                                &out.analysis,
                                target,
                                &bopts,
                                out.selection_y.lambda,
                                out.selection_w.lambda,
                                &opts.solver,
                            )?;
                            RecordEntry {
                                method,
                                target,
                                estimate,
                                lower: Some(b.lower),
                                upper: Some(b.upper),
                                undefined: false,
                                reject_true: Some(b.rejects(truth.value(target))),
                                reject_null: spec.null_values.map(|nv| b.rejects(nv.get(target))),
                            }
                        }
                    }
                }
            };
            entries.push(entry);
        }
        let own = started.elapsed().as_secs_f64() * 1e3;
        let ms = match method {
            Method::Debiased => pipeline_ms + own + inference.as_ref().map_or(0.0, |(_, ms)| *ms),
            Method::PlugIn => pipeline_ms + own,
            Method::Bootstrap => own,
        };
        runtime_ms.push(if spec.canonical { 0.0 } else { ms });
    }
    Ok(RoundRecord {
        round,
        seed,
        truth,
        entries,
        runtime_ms,
        clipped_weights: out.estimates.clipped_weights,
    })
}

/// Runs every round and aggregates.
pub fn run_experiment(spec: &ExperimentSpec, protocol: Protocol) -> Result<ExperimentReport> {
    spec.check()?;
    let model = SimModel::new(&spec.design)?;
    let ctx = RoundContext { spec, model: &model, protocol };
    let run = || -> Vec<Result<RoundRecord>> {
        (0..spec.rounds).into_par_iter().map(|r| run_round(&ctx, r)).collect()
    };
    let results = match spec.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(run),
        None => run(),
    };
    let mut records = Vec::with_capacity(spec.rounds);
    let mut failures = Vec::new();
    for (round, r) in results.into_iter().enumerate() {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => failures.push(RoundFailure { round, reason: e.to_string() }),
        }
    }
    if failures.len() as f64 > MAX_FAILED_ROUNDS * spec.rounds as f64 {
        return Err(Error::Experiment { failed: failures.len(), total: spec.rounds });
    }
    let summaries = summarize(spec, &records);
    Ok(ExperimentReport { spec: spec.clone(), rounds_requested: spec.rounds, failures, summaries, records })
}

/// Estimation error of each method.
pub fn run_estimation(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    run_experiment(spec, Protocol::Estimation)
}

/// Interval coverage and length.
pub fn run_coverage(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    run_experiment(spec, Protocol::Inference)
}

/// Type-I error at the true values and power at the configured nulls.
pub fn run_tests(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    run_experiment(spec, Protocol::Inference)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "md" | "markdown" => Ok(Self::Markdown),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }
}

/// Column order of the CSV rendering.
pub const CSV_HEADER: [&str; 10] = [
    "method",
    "target",
    "rmse",
    "coverage_pct",
    "mean_length",
    "type1_rate",
    "power",
    "mean_runtime_ms",
    "rounds_completed",
    "undefined_rounds",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn render_report(report: &ExperimentReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => {
            serde_json::to_string_pretty(report).map_err(|e| Error::Config(e.to_string()))
        }
        ReportFormat::Csv => {
            let mut s = CSV_HEADER.join(",");
            s.push('\n');
            for m in &report.summaries {
                let row = [
                    m.method.name().to_string(),
                    m.target.name().to_string(),
                    m.rmse.to_string(),
                    opt(m.coverage_pct),
                    opt(m.mean_length),
                    opt(m.type1_rate),
                    opt(m.power),
                    m.mean_runtime_ms.to_string(),
                    m.rounds_completed.to_string(),
                    m.undefined_rounds.to_string(),
                ];
                s.push_str(&row.join(","));
                s.push('\n');
            }
            Ok(s)
        }
        ReportFormat::Markdown => {
            let d = &report.spec.design;
            let mut s = format!(
                "n1 = {}, n2 = {}, m = {}, p = {}, rounds = {}, failed = {}, alpha = {}\n\n",
                d.n1,
                d.n2,
                d.m,
                d.p,
                report.rounds_requested,
                report.failures.len(),
                report.spec.alpha
            );
            s.push_str("| method | target | rmse | cov (%) | len | type I | power | ms |\n");
            s.push_str("|---|---|---:|---:|---:|---:|---:|---:|\n");
            let f = |v: Option<f64>, prec: usize| v.map_or("-".to_string(), |x| format!("{x:.prec$}"));
            for m in &report.summaries {
                s.push_str(&format!(
                    "| {} | {} | {:.3} | {} | {} | {} | {} | {:.1} |\n",
                    m.method.name(),
                    m.target.name(),
                    m.rmse,
                    f(m.coverage_pct, 1),
                    f(m.mean_length, 3),
                    f(m.type1_rate, 3),
                    f(m.power, 3),
                    m.mean_runtime_ms
                ));
            }
            Ok(s)
        }
    }
}

fn parse_method(s: &str) -> Result<Method> {
    [Method::Debiased, Method::PlugIn, Method::Bootstrap]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
}

/// Reads summaries back from the CSV rendering.
pub fn parse_csv_summaries(text: &str) -> Result<Vec<Summary>> {
    let bad = |line: usize, what: &str| Error::Config(format!("report CSV line {line}: {what}"));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad(1, "missing header"))?;
    if header.split(',').ne(CSV_HEADER.iter().copied()) {
        return Err(bad(1, "unexpected header"));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let ln = i + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != CSV_HEADER.len() {
            return Err(bad(ln, "wrong field count"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(ln, "bad number"));
        let optnum = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad(ln, "bad integer"));
        out.push(Summary {
            method: parse_method(f[0])?,
            target: TargetFunctional::parse(f[1]).ok_or_else(|| bad(ln, "unknown target"))?,
            rmse: num(f[2])?,
            coverage_pct: optnum(f[3])?,
            mean_length: optnum(f[4])?,
            type1_rate: optnum(f[5])?,
            power: optnum(f[6])?,
            mean_runtime_ms: num(f[7])?,
            rounds_completed: int(f[8])?,
            undefined_rounds: int(f[9])?,
        });
    }
    Ok(out)
}
