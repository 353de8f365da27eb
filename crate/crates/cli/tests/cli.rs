use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sharplab"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("sharplab-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&d);
    fs::create_dir_all(&d).unwrap();
    d
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out").arg(out).output().unwrap()
}

fn first_line(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap_or("").to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn sweep_on_shipped_config_passes_with_stable_headers() {
    let out = scratch("sweep");
    let cfg = config("eigen_strip.json");
    let o = run(&["sweep", "--config", cfg.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(first_line(&out.join("rows.csv")), "eps,quantity,probe,measured,predicted,abs_gap,rel_gap,error");
    assert_eq!(first_line(&out.join("verdicts.csv")), "name,pass,value,threshold,detail");
    assert_eq!(first_line(&out.join("orders.csv")), "quantity,probe,eps_coarse,eps_fine,order");

    let m: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["status"], "pass");
    assert_eq!(m["subcommand"], "sweep");
    let text: Value = serde_json::from_str(&fs::read_to_string(&cfg).unwrap()).unwrap();
    assert_eq!(m["config_hash"], sharplab::io::canonical_hash(&text));

    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["experiment"], "eigen_bound_ac");
    assert!(report["version"].is_string());
    assert!(report["timings"].as_array().is_some_and(|t| !t.is_empty()));
}

#[test]
fn row_format_uses_seventeen_significant_digits() {
    let out = scratch("format");
    let cfg = config("eigen_strip.json");
    let o = run(&["sweep", "--config", cfg.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(0));
    let rows = fs::read_to_string(out.join("rows.csv")).unwrap();
    let line = rows.lines().nth(1).unwrap();
    let eps = line.split(',').next().unwrap();
    assert_eq!(eps, "8.0000000000000002e-2");
    assert_eq!(eps.parse::<f64>().unwrap(), 0.08);
}

#[test]
fn reruns_and_report_are_byte_identical() {
    let cfg = config("eigen_strip.json");
    let a = scratch("rerun-a");
    let b = scratch("rerun-b");
    assert_eq!(run(&["sweep", "--config", cfg.to_str().unwrap(), "--jobs", "1"], &a).status.code(), Some(0));
    assert_eq!(run(&["sweep", "--config", cfg.to_str().unwrap(), "--jobs", "3"], &b).status.code(), Some(0));
    for f in ["rows.csv", "verdicts.csv", "orders.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c = scratch("report");
    let saved = a.join("report.json");
    let o = run(&["report", "--config", saved.to_str().unwrap()], &c);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["rows.csv", "verdicts.csv", "orders.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(c.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn check_variations_emits_residual_csv() {
    let out = scratch("check");
    let o = run(&["check-variations", "--seed", "7", "--probes", "2"], &out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("check.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("probe,functional,residual,value,tolerance,pass"));
    let rows: Vec<_> = lines.collect();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.ends_with(",true")));
    for f in ["allen_cahn", "nonlocal_b", "ohta_kawasaki"] {
        assert!(rows.iter().any(|r| r.split(',').nth(1) == Some(f)), "{f}");
    }
}

#[test]
fn negative_eps_is_a_usage_error_naming_the_field() {
    let out = scratch("bad-eps");
    let bad = out.join("bad.json");
    let text = fs::read_to_string(config("spectrum_strip.json")).unwrap().replace("\"eps\": 0.04", "\"eps\": -0.04");
    fs::write(&bad, text).unwrap();
    let o = run(&["spectrum", "--config", bad.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(64));
    assert!(stderr(&o).contains("eps"), "{}", stderr(&o));
}

#[test]
fn unknown_flags_and_fields_are_usage_errors() {
    let out = scratch("usage");
    let o = run(&["sweep", "--bogus"], &out);
    assert_eq!(o.status.code(), Some(64));

    let bad = out.join("bad.json");
    fs::write(&bad, r#"{"domain": {"shape": "rectangle", "L": [1, 1], "n": [17, 17]}, "interface": {"kind": "segment", "x": 0.5}, "eps": 0.1, "epsilon": 0.1}"#).unwrap();
    let o = run(&["solve", "--config", bad.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(64));
    assert!(stderr(&o).contains("epsilon"), "{}", stderr(&o));

    let o = run(&["sweep", "--config", out.join("missing.json").to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(64));
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(bin().arg("--help").output().unwrap().status.code(), Some(0));
    let o = bin().arg("--version").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("sharplab "));
}

#[test]
fn failing_verdicts_exit_two() {
    let out = scratch("verdict");
    let cfg = out.join("strict.json");
    // Newton cannot reach this tolerance, so the point becomes an error row.
    fs::write(
        &cfg,
        r#"{"experiment": "eigen_bound_ac", "domain": {"shape": "rectangle", "L": [1, 1], "n": [17, 17]},
            "interface": {"kind": "segment", "x": 0.5}, "eps": [0.2], "newton_tol": 1e-300}"#,
    )
    .unwrap();
    let o = run(&["sweep", "--config", cfg.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let m: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["status"], "fail");
    let verdicts = fs::read_to_string(out.join("verdicts.csv")).unwrap();
    assert!(verdicts.lines().any(|l| l.starts_with("complete,false")));
}

#[test]
fn solve_writes_field_container_and_sidecar() {
    let out = scratch("solve");
    let cfg = config("solve_lamella.json");
    let o = run(&["solve", "--config", cfg.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let data = sharplab::io::decode(&fs::read(out.join("u.bin")).unwrap()).unwrap();
    assert_eq!(data.components.len(), 1);
    assert_eq!(data.components[0].len(), 129 * 129);
    let side: Value = serde_json::from_str(&fs::read_to_string(out.join("solve.json")).unwrap()).unwrap();
    assert!(side["result"]["residual_norm"].as_f64().unwrap() < 1e-9);
    assert!(side["energy"].as_f64().unwrap() > 0.0);
}

#[test]
fn spectrum_emits_sorted_eigenvalues_and_eigenfunctions() {
    let out = scratch("spectrum");
    let cfg = config("spectrum_strip.json");
    let o = run(&["spectrum", "--config", cfg.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("spectrum.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("k,eigenvalue,residual"));
    let ev: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(ev.len(), 4);
    assert!(ev.windows(2).all(|w| w[0] <= w[1]));
    for k in 1..=4 {
        assert!(out.join(format!("phi_{k}.bin")).exists());
    }
}

#[test]
fn green_reuses_its_cache() {
    let out = scratch("green");
    let cache = out.join("cache");
    let cfg = config("green_lamella.json");
    let go = |dir: &Path| {
        bin().args(["green", "--config", cfg.to_str().unwrap(), "--out"]).arg(dir).env("SHARPLAB_CACHE", &cache).output().unwrap()
    };
    let o = go(&out.join("a"));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read_dir(&cache).unwrap().count(), 1);
    assert_eq!(go(&out.join("b")).status.code(), Some(0));
    assert_eq!(fs::read(out.join("a/green.csv")).unwrap(), fs::read(out.join("b/green.csv")).unwrap());
    assert!(out.join("a/v0.bin").exists());
    assert_eq!(first_line(&out.join("a/green.csv")), "probe,surface_form");
}
