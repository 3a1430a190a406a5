use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

use ofi_svar::market_data::read_bars_csv;

fn ofi_svar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ofi-svar"))
        .args(["--threads", "1"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = ofi_svar(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn empty_input_fails_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("empty.csv");
    fs::write(&input, "").unwrap();
    let out_dir = tmp.path().join("out");
    let out = ofi_svar(&["ingest", path(&input), "--out", path(&out_dir)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));
    assert!(!out_dir.exists());

    let header_only = tmp.path().join("header.csv");
    fs::write(&header_only, "date,timestamp,sequence,bid_price,bid_size,ask_price,ask_size\n").unwrap();
    assert!(!ofi_svar(&["ingest", path(&header_only), "--out", path(&out_dir)]).status.success());
    assert!(!out_dir.exists());
}

#[test]
fn malformed_line_is_reported_with_its_number() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("bad.csv");
    fs::write(
        &input,
        "date,timestamp,sequence,bid_price,bid_size,ask_price,ask_size\n\
         2024-01-02,08:30:00.5,1,1400,10,1400.25,12\n\
         2024-01-02,08:30:01.0,2,abc,10,1400.25,12\n",
    )
    .unwrap();
    let out_dir = tmp.path().join("out");
    let out = ofi_svar(&["ingest", path(&input), "--out", path(&out_dir)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!out_dir.exists());
}

#[test]
fn two_simulated_days_attempt_52_windows_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    ok(&["--seed", "4", "simulate", "panel", "--days", "2", "--out", path(&sim)]);
    let bars = sim.join("bars.csv");
    let calendar = sim.join("calendar.csv");
    let run = |name: &str, extra: &[&str]| {
        let dir = tmp.path().join(name);
        let mut args = extra.to_vec();
        args.extend(["estimate", path(&bars), "--calendar", path(&calendar), "--out", path(&dir)]);
        ok(&args);
        dir
    };
    let first = run("est1", &[]);
    let report = json(first.join("run_report.json"));
    assert_eq!(report["accounting"]["attempted"], 52);
    let estimated = report["accounting"]["estimated"].as_u64().unwrap();
    let excluded = report["accounting"]["excluded"].as_u64().unwrap();
    assert_eq!(estimated + excluded, 52);

    let hash = report["manifest_sha256"].as_str().unwrap().to_string();
    for (name, bytes) in files(&first) {
        let text = String::from_utf8(bytes).unwrap();
        if name.ends_with(".json") {
            assert!(text.contains(&hash), "{name}");
        } else {
            assert_eq!(text.lines().next().unwrap(), format!("# manifest_sha256={hash}"), "{name}");
        }
    }
    for expected in ["panel.csv", "exclusions.csv", "pooled.txt", "irf_bands.csv", "regressions.csv", "profile.csv"] {
        assert!(first.join(expected).exists(), "{expected}");
    }

    let second = run("est2", &[]);
    assert_eq!(files(&first), files(&second));

    let changed = run("est3", &["--max-lag", "5"]);
    let other = json(changed.join("run_report.json"));
    assert_ne!(other["manifest_sha256"], report["manifest_sha256"]);
}

#[test]
fn planted_parameters_are_recovered_on_average() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    ok(&["--seed", "8", "simulate", "panel", "--days", "3", "--out", path(&sim)]);
    let est = tmp.path().join("est");
    ok(&["estimate", path(&sim.join("bars.csv")), "--out", path(&est)]);
    let truth = json(sim.join("truth.json"));
    let csv = fs::read_to_string(est.join("pooled_structural.csv")).unwrap();
    let mean_of = |label: &str| -> f64 {
        let line = csv.lines().find(|l| l.starts_with(&format!("{label},"))).unwrap();
        line.split(',').nth(2).unwrap().parse().unwrap()
    };
    let b_r = truth["truth"]["b_r"].as_f64().unwrap();
    let b_f = truth["truth"]["b_f"].as_f64().unwrap();
    assert!((mean_of("b_r") - b_r).abs() < 0.05, "{}", mean_of("b_r"));
    assert!((mean_of("b_f") - b_f).abs() < 0.05, "{}", mean_of("b_f"));
}

#[test]
fn svar_simulation_writes_truth_sidecar() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("sim.toml");
    fs::write(
        &config,
        r#"
seed = 12
[svar]
b_r = 0.7
b_f = 0.2
phi = [[[0.1, 0.0], [0.05, 0.2]]]
regimes = [
  { omega_r = 1.0, omega_f = 0.5, length = 200 },
  { omega_r = 0.4, omega_f = 1.3, length = 150 },
]
"#,
    )
    .unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["--config", path(&config), "simulate", "svar", "--out", path(&a)]);
    ok(&["--config", path(&config), "simulate", "svar", "--out", path(&b)]);
    assert_eq!(files(&a), files(&b));

    let truth = &json(a.join("truth.json"))["truth"];
    assert_eq!(truth["b_r"], 0.7);
    assert_eq!(truth["b_f"], 0.2);
    assert_eq!(truth["omega_r"], serde_json::json!([1.0, 0.4]));
    assert_eq!(truth["omega_f"], serde_json::json!([0.5, 1.3]));
    assert_eq!(truth["regime_lengths"], serde_json::json!([200, 150]));
    assert_eq!(truth["seed"], 12);
    let coefs = truth["reduced_coefs"].as_array().unwrap();
    assert_eq!(coefs.len(), 1);

    let series = fs::read_to_string(a.join("series.csv")).unwrap();
    let regimes: Vec<&str> = series.lines().skip(2).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(regimes.iter().filter(|&&r| r == "0").count(), 200);
    assert_eq!(regimes.iter().filter(|&&r| r == "1").count(), 150);
    assert!(regimes[..200].iter().all(|&r| r == "0"));

    let reseeded = tmp.path().join("c");
    ok(&["--config", path(&config), "--seed", "13", "simulate", "svar", "--out", path(&reseeded)]);
    assert_ne!(fs::read(a.join("series.csv")).unwrap(), fs::read(reseeded.join("series.csv")).unwrap());
}

#[test]
fn ingesting_a_simulated_book_reproduces_its_ground_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("book");
    ok(&["simulate", "book", "--duration", "900", "--out", path(&sim)]);
    let ingested = tmp.path().join("ingested");
    ok(&["ingest", path(&sim.join("bbo.csv")), "--out", path(&ingested)]);

    let bars = read_bars_csv(fs::File::open(ingested.join("bars.csv")).unwrap()).unwrap();
    assert_eq!(bars.len(), 1);
    let truth = fs::read_to_string(sim.join("truth.csv")).unwrap();
    let truth: Vec<Vec<String>> = truth
        .lines()
        .skip(2)
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    assert_eq!(truth.len(), 900);
    for (bar, t) in bars[0].bars.iter().zip(&truth) {
        let flow: i64 = t[1].parse().unwrap();
        assert_eq!(bar.f, flow as f64 / 1000.0);
        assert_eq!(bar.ne.to_string(), t[2]);
        let depth: Option<f64> = (!t[3].is_empty()).then(|| t[3].parse().unwrap());
        assert_eq!(bar.depth, depth);
    }

    let summary = fs::read_to_string(ingested.join("summary.csv")).unwrap();
    let header = summary.lines().nth(1).unwrap();
    assert_eq!(header, "variable,count,Mean,SD,1%,5%,25%,50%,75%,95%,99%");
}

#[test]
fn summarize_matches_ingest_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    ok(&["simulate", "panel", "--days", "1", "--out", path(&sim)]);
    let out = tmp.path().join("summary");
    ok(&["summarize", path(&sim.join("bars.csv")), "--out", path(&out)]);
    let text = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(text.contains("Mean") && text.contains("99%"));
    let intraday = fs::read_to_string(out.join("intraday.csv")).unwrap();
    // Header comment, column header, 26 fifteen-minute buckets.
    assert_eq!(intraday.lines().count(), 28);
}
