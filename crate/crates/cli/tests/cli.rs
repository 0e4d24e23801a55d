use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sfa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sfa"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn simulated(dir: &Path, dims: &str, ranks: &str) -> (String, String) {
    let data = dir.join("data.csv");
    let out = sfa(&["simulate", "--dims", dims, "--ranks", ranks, "--seed", "7", "--out", p(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (p(&data).to_string(), p(&dir.join("data.schema.json")).to_string())
}

#[test]
fn simulate_writes_data_schema_and_truth() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    let truth = dir.path().join("truth.json");
    let out = sfa(&[
        "simulate", "--dims", "4,3,2", "--ranks", "1,0,2", "--seed", "1", "--out", p(&data), "--truth", p(&truth),
    ]);
    assert!(out.status.success());
    let text = fs::read_to_string(&data).unwrap();
    assert_eq!(text.lines().next().unwrap(), "i1,i2,i3,y");
    assert_eq!(text.lines().count(), 1 + 24);
    assert!(dir.path().join("d.schema.json").exists());
    let t: serde_json::Value = serde_json::from_str(&fs::read_to_string(&truth).unwrap()).unwrap();
    assert_eq!(t["ranks"], serde_json::json!([1, 0, 2]));
}

#[test]
fn fit_mle_and_diagnose() {
    let dir = tempfile::tempdir().unwrap();
    let (data, schema) = simulated(dir.path(), "10,8,6", "2,1,0");
    let fit = dir.path().join("fit.json");
    let out = sfa(&["fit-mle", "--data", &data, "--schema", &schema, "--ranks", "2,1,0", "--out", p(&fit)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rec: serde_json::Value = serde_json::from_str(&fs::read_to_string(&fit).unwrap()).unwrap();
    assert_eq!(rec["converged"], serde_json::json!(true));
    assert!(rec["log_lik"].as_f64().unwrap().is_finite());

    let diag = dir.path().join("diag");
    let out = sfa(&["diagnose", "--data", &data, "--schema", &schema, "--fit", p(&fit), "--out", p(&diag)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["summary.csv", "i1_correlation.csv", "i2_pcs.csv", "i3_lags.csv"] {
        assert!(diag.join(f).exists(), "{} missing", f);
    }
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 3);
}

#[test]
fn rank_select_prints_ranks() {
    let dir = tempfile::tempdir().unwrap();
    let (data, schema) = simulated(dir.path(), "8,6,4", "0,0,0");
    let report = dir.path().join("report.csv");
    let out = sfa(&["rank-select", "--data", &data, "--schema", &schema, "--alpha", "0.05", "--out", p(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "0,0,0");
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.lines().last().unwrap().starts_with("selected"));
}

fn with_missing(dir: &Path) -> (String, String) {
    let (data, schema) = simulated(dir, "5,4,3", "1,0,0");
    let text = fs::read_to_string(&data).unwrap();
    // Drop one row and blank another.
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines.remove(5);
    let blank = lines[9].rsplit_once(',').unwrap().0.to_string() + ",";
    lines[9] = blank;
    fs::write(&data, lines.join("\n") + "\n").unwrap();
    (data, schema)
}

#[test]
fn impute_and_fit_bayes_report_missing_cells() {
    let dir = tempfile::tempdir().unwrap();
    let (data, schema) = with_missing(dir.path());
    let imp = dir.path().join("imp.csv");
    let chain = ["--iters", "300", "--burnin", "100", "--thin", "2", "--seed", "3"];
    let mut args = vec!["impute", "--data", &data, "--schema", &schema, "--ranks", "1,0,0", "--out", p(&imp)];
    args.extend(chain);
    let out = sfa(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&imp).unwrap();
    assert_eq!(text.lines().next().unwrap(), "i1,i2,i3,mean,q025,q975,ess");
    assert_eq!(text.lines().count(), 3);

    let outdir = dir.path().join("chain");
    let mut args = vec!["fit-bayes", "--data", &data, "--schema", &schema, "--ranks", "1,0,0", "--out", p(&outdir)];
    args.extend(chain);
    let out = sfa(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let traces = fs::read_to_string(outdir.join("traces.csv")).unwrap();
    assert_eq!(traces.lines().count(), 1 + 100);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(outdir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["draws"], serde_json::json!(100));
    assert!(outdir.join("imputations.csv").exists());

    // Maximum likelihood refuses incomplete data as an input error.
    let out = sfa(&["fit-mle", "--data", &data, "--schema", &schema, "--ranks", "1,0,0", "--out", p(&dir.path().join("f.json"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn cross_validate_table() {
    let dir = tempfile::tempdir().unwrap();
    let (data, schema) = simulated(dir.path(), "6,5,4", "2,0,0");
    let cv = dir.path().join("cv.csv");
    let out = sfa(&[
        "cross-validate", "--data", &data, "--schema", &schema, "--models", "iid,time,sfa:2,0,0", "--reps", "3",
        "--frac", "0.2", "--seed", "1", "--iters", "60", "--burnin", "20", "--out", p(&cv),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&cv).unwrap();
    // Header, average, standard deviation, one row per replication.
    assert_eq!(text.lines().count(), 3 + 3);
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 3);
}

#[test]
fn exit_codes() {
    let out = sfa(&["fit-mle", "--ranks", "1"]);
    assert_eq!(out.status.code(), Some(1));
    let out = sfa(&["--help"]);
    assert_eq!(out.status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let out = sfa(&["fit-mle", "--data", "nope.csv", "--schema", "nope.json", "--ranks", "1", "--out", "x.json"]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_str(String::from_utf8(out.stderr).unwrap().trim()).unwrap();
    assert!(err["message"].as_str().unwrap().contains("nope.json"));

    // A 10-level unstructured mode with two replicates has a singular scatter.
    let (data, schema) = simulated(dir.path(), "10,2", "0,0");
    let out = sfa(&["fit-mle", "--data", &data, "--schema", &schema, "--ranks", "10,0", "--out", p(&dir.path().join("f.json"))]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let err: serde_json::Value = serde_json::from_str(String::from_utf8(out.stderr).unwrap().trim()).unwrap();
    assert!(err["error"].is_string());

    // Duplicate key is a parse error naming the row.
    let (data, schema) = simulated(dir.path(), "2,2", "0,0");
    let mut text = fs::read_to_string(&data).unwrap();
    let dup = text.lines().nth(1).unwrap().to_string();
    text.push_str(&dup);
    text.push('\n');
    fs::write(&data, text).unwrap();
    let out = sfa(&["fit-mle", "--data", &data, "--schema", &schema, "--ranks", "0,0", "--out", p(&dir.path().join("g.json"))]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_str(String::from_utf8(out.stderr).unwrap().trim()).unwrap();
    assert_eq!(err["error"], "parse");
    assert!(err["message"].as_str().unwrap().contains("row 6"));
}
