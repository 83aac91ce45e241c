use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use serde_json::Value;

fn genrel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_genrel")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = genrel(args);
    assert!(out.status.success(), "genrel {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn data_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(rel)
}

fn assert_schema(schema_name: &str, instance: &Value) {
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(repo_file(&format!("docs/{schema_name}"))).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(instance).map(|e| format!("{e} at {}", e.instance_path)).collect();
    assert!(errors.is_empty(), "{schema_name}: {errors:?}");
}

fn write_design(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("design.json");
    std::fs::write(&p, body).unwrap();
    p
}

const SMALL_DESIGN: &str = r#"{"n1": 150, "n2": 130, "m": 0, "p": 30,
  "sigma": {"kind": "exchangeable", "rho": 0.2}, "k": 4, "shared_support": 2, "seed": 5}"#;

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_then_relate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let design = write_design(dir.path(), SMALL_DESIGN);
    let out = dir.path().join("sim");
    ok(&["simulate", "--design", s(&design), "--out-dir", s(&out)]);
    let truth: Value = serde_json::from_str(&std::fs::read_to_string(out.join("truth.json")).unwrap()).unwrap();
    assert_schema("truth.schema.json", &truth);
    let corr = truth["corr"].as_f64().unwrap();
    assert!((-1.0..=1.0).contains(&corr));

    let y = out.join("trait_y.csv");
    let w = out.join("trait_w.csv");
    let report: Value = serde_json::from_str(&ok(&["relate", "--y", s(&y), "--w", s(&w), "--seed", "3"])).unwrap();
    assert_schema("relate_report.schema.json", &report);
    assert_eq!(report["n1"], 150);
    assert_eq!(report["targets"].as_array().unwrap().len(), 4);
}

#[test]
fn simulate_output_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let design = write_design(dir.path(), SMALL_DESIGN);
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&["simulate", "--design", s(&design), "--out-dir", s(&a)]);
    ok(&["simulate", "--design", s(&design), "--out-dir", s(&b)]);
    ok(&["simulate", "--design", s(&design), "--out-dir", s(&c), "--seed", "6"]);
    for f in ["trait_y.csv", "trait_w.csv", "truth.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(std::fs::read(a.join("trait_y.csv")).unwrap(), std::fs::read(c.join("trait_y.csv")).unwrap());
}

#[test]
fn declared_zero_overlap_matches_independent() {
    let (y, w) = (data_file("trait_y.csv"), data_file("trait_w.csv"));
    let base = ["relate", "--y", s(&y), "--w", s(&w), "--seed", "1"];
    let independent = ok(&base);
    let mut args = base.to_vec();
    args.extend(["--scenario", "overlapped", "--overlap", "0"]);
    assert_eq!(ok(&args), independent);
}

#[test]
fn overlapped_prefix_and_shared_file_agree() {
    let dir = tempfile::tempdir().unwrap();
    let design = write_design(
        dir.path(),
        r#"{"n1": 120, "n2": 110, "m": 40, "p": 25, "sigma": {"kind": "ar1", "rho": 0.3}, "k": 4, "shared_support": 2, "seed": 11}"#,
    );
    let out = dir.path().join("sim");
    ok(&["simulate", "--design", s(&design), "--out-dir", s(&out)]);
    let (y, w) = (out.join("trait_y.csv"), out.join("trait_w.csv"));
    let prefix = ok(&["relate", "--y", s(&y), "--w", s(&w), "--overlap", "40", "--seed", "2"]);
    let report: Value = serde_json::from_str(&prefix).unwrap();
    assert_eq!(report["scenario"], "overlapped");
    assert_eq!(report["overlap"], 40);

    // Same study split into a shared file and two private files.
    let split = |path: &Path| -> (Vec<String>, Vec<String>, String) {
        let text = std::fs::read_to_string(path).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap().to_string();
        let rows: Vec<String> = lines.map(str::to_string).collect();
        (rows[..40].to_vec(), rows[40..].to_vec(), header)
    };
    let (shared_y, rest_y, header) = split(&y);
    let (shared_w, rest_w, _) = split(&w);
    let shared: Vec<String> = shared_y
        .iter()
        .zip(&shared_w)
        .map(|(a, b)| {
            let (ya, xs) = a.split_once(',').unwrap();
            let (wb, _) = b.split_once(',').unwrap();
            format!("{ya},{wb},{xs}")
        })
        .collect();
    let write = |name: &str, head: &str, rows: &[String]| {
        let p = dir.path().join(name);
        std::fs::write(&p, format!("{head}\n{}\n", rows.join("\n"))).unwrap();
        p
    };
    let shared_path = write("shared.csv", &header.replacen("y,", "y,w,", 1), &shared);
    let py = write("private_y.csv", &header, &rest_y);
    let pw = write("private_w.csv", &header, &rest_w);
    let via_file = ok(&["relate", "--y", s(&py), "--w", s(&pw), "--shared", s(&shared_path), "--seed", "2"]);
    assert_eq!(via_file, prefix);
}

#[test]
fn malformed_csv_reports_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "y,x1,x2\n1,0.1,0.2\n0,0.3,oops\n").unwrap();
    let w = data_file("trait_w.csv");
    let out = genrel(&["relate", "--y", s(&bad), "--w", s(&w), "--seed", "1"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn invalid_study_lists_violations() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "y,x1,x2\n1,0.1,0.2\n2,0.3,0.4\n0,0.5,0.6\n").unwrap();
    let out = genrel(&["relate", "--y", s(&bad), "--w", s(&bad), "--seed", "1"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("invalid study") && err.contains("row 1"), "{err}");
}

#[test]
fn missing_seed_is_drawn_and_printed() {
    let (y, w) = (data_file("trait_y.csv"), data_file("trait_w.csv"));
    let out = genrel(&["relate", "--y", s(&y), "--w", s(&w)]);
    assert!(out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    let printed: u64 = err.lines().find_map(|l| l.strip_prefix("seed: ")).unwrap().parse().unwrap();
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["seed"].as_u64(), Some(printed));
}

#[test]
fn relate_matches_golden_output() {
    let (y, w) = (data_file("trait_y.csv"), data_file("trait_w.csv"));
    let got = ok(&["relate", "--y", s(&y), "--w", s(&w), "--seed", "1", "--bonferroni", "10"]);
    let golden = std::fs::read_to_string(data_file("relate_golden.json")).unwrap();
    assert_eq!(got, golden);
}

#[test]
fn relate_agrees_with_library() {
    use genrel_core::inference::infer_all;
    use genrel_core::{full_pipeline, NullValues, PairedStudy, PipelineOptions, SampleCount, TargetFunctional, TuningRule};
    let read = |p: PathBuf| {
        let mut r = csv::Reader::from_path(p).unwrap();
        let rows: Vec<Vec<f64>> = r.records().map(|rec| rec.unwrap().iter().map(|v| v.parse().unwrap()).collect()).collect();
        let n = rows.len();
        let p = rows[0].len() - 1;
        let y = ndarray::Array1::from_iter(rows.iter().map(|r| r[0]));
        let x = ndarray::Array2::from_shape_fn((n, p), |(i, j)| rows[i][j + 1]);
        (x, y)
    };
    let (x, y) = read(data_file("trait_y.csv"));
    let (z, w) = read(data_file("trait_w.csv"));
    let study = PairedStudy::independent(x, y, z, w);
    let out = full_pipeline(&study, &TuningRule::default(), &PipelineOptions { split_seed: 1, ..Default::default() }).unwrap();
    let inf = infer_all(&out, 0.05, &NullValues::default(), SampleCount::Distinct).unwrap();
    let golden: Value = serde_json::from_str(&std::fs::read_to_string(data_file("relate_golden.json")).unwrap()).unwrap();
    for (row, t) in golden["targets"].as_array().unwrap().iter().zip(TargetFunctional::ALL) {
        let ti = inf.get(t);
        assert_eq!(row["estimate"].as_f64().unwrap(), ti.point);
        if let Some(r) = &ti.result {
            assert_eq!(row["ci_lower"].as_f64().unwrap(), r.ci_lower);
            assert_eq!(row["p_value"].as_f64().unwrap(), r.p_value);
            let adj = row["p_value_adjusted"].as_f64().unwrap();
            assert_eq!(adj, (10.0 * r.p_value).min(1.0));
        }
    }
}

#[test]
fn null_p_values_look_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let mut p_values = Vec::new();
    for seed in 0..40 {
        // Disjoint supports under identity covariance: the covariance is 0.
        let design = write_design(
            dir.path(),
            &format!(r#"{{"n1": 200, "n2": 200, "p": 20, "sigma": {{"kind": "identity"}}, "k": 3, "shared_support": 0, "seed": {seed}}}"#),
        );
        let out = dir.path().join(format!("s{seed}"));
        ok(&["simulate", "--design", s(&design), "--out-dir", s(&out)]);
        let report: Value = serde_json::from_str(&ok(&[
            "relate",
            "--y",
            s(&out.join("trait_y.csv")),
            "--w",
            s(&out.join("trait_w.csv")),
            "--seed",
            "0",
        ]))
        .unwrap();
        p_values.push(report["targets"][0]["p_value"].as_f64().unwrap());
    }
    let mean = p_values.iter().sum::<f64>() / p_values.len() as f64;
    let small = p_values.iter().filter(|p| **p < 0.05).count();
    // Uniform p-values: mean 0.5 with sd 0.046 over 40 draws.
    assert!((mean - 0.5).abs() < 0.15, "mean p-value {mean}");
    assert!(small <= 6, "{small} of 40 below 0.05");
}

#[test]
fn fit_report_validates() {
    let report: Value = serde_json::from_str(&ok(&["fit", "--input", s(&data_file("trait_y.csv")), "--seed", "1"])).unwrap();
    assert_schema("fit_report.schema.json", &report);
    let cv: Value = serde_json::from_str(&ok(&[
        "fit",
        "--input",
        s(&data_file("trait_y.csv")),
        "--seed",
        "1",
        "--tuning",
        "cv:0.06,0.12,0.24",
    ]))
    .unwrap();
    assert_schema("fit_report.schema.json", &cv);
    assert_eq!(cv["cv_table"].as_array().unwrap().len(), 3);
}

const TINY_SPEC: &str = r#"{
  "design": {"n1": 50, "n2": 50, "p": 20, "sigma": {"kind": "exchangeable", "rho": 0.2}, "k": 4, "shared_support": 2},
  "rounds": 3,
  "methods": ["debiased", "plug_in"],
  "seed": 17
}"#;

#[test]
fn mc_tiny_spec_is_fast_and_canonical() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, TINY_SPEC).unwrap();
    let started = Instant::now();
    let a = ok(&["mc", "--spec", s(&spec), "--canonical"]);
    // Smoke bound for an optimized build on a laptop-class machine.
    assert!(started.elapsed() < Duration::from_secs(10));
    let b = ok(&["mc", "--spec", s(&spec), "--canonical", "--workers", "2"]);
    assert_eq!(a, b.replace("\"workers\": 2", "\"workers\": null"));
    let report: Value = serde_json::from_str(&a).unwrap();
    assert_schema("experiment_report.schema.json", &report);

    let md = ok(&["mc", "--spec", s(&spec), "--canonical", "--format", "md"]);
    let rows = md.lines().filter(|l| l.starts_with("| debiased |") || l.starts_with("| plug_in |")).count();
    assert_eq!(rows, 8);
    let csv = ok(&["mc", "--spec", s(&spec), "--canonical", "--format", "csv"]);
    assert_eq!(csv.lines().count(), 9);
}

#[test]
fn mc_config_error_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, TINY_SPEC.replace("\"rounds\": 3", "\"rounds\": 0")).unwrap();
    let out = genrel(&["mc", "--spec", s(&spec)]);
    assert_eq!(out.status.code(), Some(1));
}
