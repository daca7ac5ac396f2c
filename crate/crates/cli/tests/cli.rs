use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_treelab"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(cmd: &str, cfg: &Path, out: &Path, extra: &[&str]) -> i32 {
    bin()
        .arg(cmd)
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .args(extra)
        .status()
        .unwrap()
        .code()
        .unwrap()
}

fn report(out: &Path, name: &str) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(out.join(name)).unwrap()).unwrap()
}

#[test]
fn malformed_graph_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run("spectrum", &config("malformed.json"), dir.path(), &[]), 2);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"graph\": 3}").unwrap();
    assert_eq!(run("pressure", &bad, dir.path(), &[]), 2);
}

#[test]
fn out_of_range_parameter_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("theta_unit.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["llt"]["dt"] = serde_json::json!(0.5);
    let path = dir.path().join("c.json");
    std::fs::write(&path, v.to_string()).unwrap();
    assert_eq!(run("llt", &path, dir.path(), &[]), 2);
    v["llt"]["dt"] = serde_json::json!(0.01);
    v["unknown"] = serde_json::json!(1);
    std::fs::write(&path, v.to_string()).unwrap();
    assert_eq!(run("pressure", &path, dir.path(), &[]), 2);
}

#[test]
fn pressure_verdict_passes_on_theta_unit() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run("pressure", &config("theta_unit.json"), dir.path(), &[]), 0);
    let r = report(dir.path(), "pressure.json");
    assert_eq!(r["report"]["verdict"], "PASS");
    let csv = std::fs::read_to_string(dir.path().join("pressure.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("lambda,delta,s_star,band"));
    let deltas: Vec<f64> = lines
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(deltas.len(), 8);
    assert!(deltas.iter().all(|d| *d <= 1e-6));
    assert!(deltas.windows(2).all(|w| w[1] > w[0]));
    assert!(!csv.contains('\r'));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        assert_eq!(run("pressure", &config("theta_dio.json"), d.path(), &["--threads", "2", "--seed", "11"]), 0);
        assert_eq!(run("green", &config("theta_dio.json"), d.path(), &["--threads", "2", "--seed", "11"]), 0);
    }
    for f in ["pressure.json", "pressure.csv", "green.json", "green.csv"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let r = report(a.path(), "pressure.json");
    assert_eq!(r["provenance"]["seed"], 11);
    assert_eq!(r["provenance"]["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(r["provenance"]["version"], env!("CARGO_PKG_VERSION"));
}

#[test]
fn seed_changes_the_config_hash() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run("pressure", &config("theta_unit.json"), a.path(), &["--seed", "1"]);
    run("pressure", &config("theta_unit.json"), b.path(), &["--seed", "2"]);
    assert_ne!(
        report(a.path(), "pressure.json")["provenance"]["config_hash"],
        report(b.path(), "pressure.json")["provenance"]["config_hash"]
    );
}

#[test]
fn spectrum_routes_agree_on_theta_unit() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run("spectrum", &config("theta_unit.json"), dir.path(), &[]), 0);
    let r = report(dir.path(), "spectrum.json");
    assert!(r["report"]["agreement"].as_f64().unwrap() <= 2e-3);
}

#[test]
fn floats_are_written_with_seventeen_digits() {
    let dir = tempfile::tempdir().unwrap();
    run("green", &config("theta_unit.json"), dir.path(), &[]);
    let text = std::fs::read_to_string(dir.path().join("green.json")).unwrap();
    let g = text.lines().find(|l| l.trim_start().starts_with("\"green\":")).unwrap();
    let num = g.split(':').nth(1).unwrap().trim().trim_end_matches(',');
    let mantissa = num.split('e').next().unwrap().replace(['.', '-'], "");
    assert_eq!(mantissa.len(), 17, "{num}");
}

#[test]
fn llt_refuses_the_label_on_a_lattice_graph() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("theta_unit.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["llt"]["radius"] = serde_json::json!(16.0);
    v["llt"]["reference_radii"] = serde_json::json!([14.0]);
    v["llt"]["window"] = serde_json::json!([10.0, 30.0]);
    let path = dir.path().join("c.json");
    std::fs::write(&path, v.to_string()).unwrap();
    assert_eq!(run("llt", &path, dir.path(), &[]), 0);
    let r = report(dir.path(), "llt.json");
    assert_eq!(r["report"]["fit"]["llt_label"], false);
    assert_eq!(r["report"]["verification"], "refused: lattice length spectrum");
    assert!(r["report"]["fit"]["predicted_c"].as_f64().unwrap() > 0.0);
    assert!(r["report"]["fit"]["c_fit"].as_f64().unwrap() > 0.0);
    let cached = std::fs::read_dir(dir.path().join("cache")).unwrap().count();
    assert_eq!(cached, 2);
    assert_eq!(run("llt", &path, dir.path(), &[]), 0);
    assert!(dir.path().join("llt_curve.csv").exists());
}
