use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_jumpex");

fn canonical() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/canonical.toml")
}

fn jumpex(args: &[&str], out: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("JUMPEX_OUT")
        .env_remove("JUMPEX_THREADS")
        .env("JUMPEX_OUT", out)
        .output()
        .expect("binary runs")
}

fn run_dirs(out: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(out).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

fn body(dir: &Path) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("wall_clock_seconds");
    v
}

#[test]
fn hjb_passes_and_writes_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = canonical();
    let o = jumpex(&["hjb", "--config", cfg.to_str().unwrap()], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("hjb [PASS]"), "{stdout}");
    let dirs = run_dirs(tmp.path());
    assert_eq!(dirs.len(), 1);
    for f in ["report.json", "report.csv", "hjb_residuals.csv"] {
        assert!(dirs[0].join(f).exists(), "{f}");
    }
    let v = body(&dirs[0]);
    assert_eq!(v["seed"], 20261016);
    assert_eq!(v["experiment"], "hjb");
    assert_eq!(v["thresholds"]["hjb_perturbation"], 1.01);
    assert_eq!(v["config_digest"].as_str().unwrap().len(), 64);
    let residuals = fs::read_to_string(dirs[0].join("hjb_residuals.csv")).unwrap();
    assert_eq!(residuals.lines().count(), 28);
}

#[test]
fn unknown_experiment_lists_valid_names() {
    let tmp = tempfile::tempdir().unwrap();
    let o = jumpex(&["fit", "--config", canonical().to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    for name in ["converge", "value-check", "lagrange", "hjb", "demo-sample-state"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn config_errors_exit_nonzero_with_field() {
    let tmp = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(canonical()).unwrap().replace("intensity = 1.0", "intensity = \"fast\"");
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, text).unwrap();
    let o = jumpex(&["hjb", "--config", cfg.to_str().unwrap()], &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("intensity"), "{err}");

    let text = fs::read_to_string(canonical()).unwrap().replace("probs = [0.5, 0.5]", "probs = [0.5, 0.6]");
    fs::write(&cfg, text).unwrap();
    let o = jumpex(&["hjb", "--config", cfg.to_str().unwrap()], &tmp.path().join("out"));
    assert_ne!(o.status.code(), Some(0));
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
}

#[test]
fn failing_check_names_the_row() {
    let tmp = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(canonical()).unwrap().replace("hjb_detection = 1e-3", "hjb_detection = 1.0");
    let cfg = tmp.path().join("strict.toml");
    fs::write(&cfg, text).unwrap();
    let o = jumpex(&["hjb", "--config", cfg.to_str().unwrap()], &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("FAIL: perturbed K x1.01"));
}

#[test]
fn json_config_and_model_file() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v: serde_json::Value = toml::from_str(&fs::read_to_string(canonical()).unwrap()).unwrap();
    let model = v.as_object_mut().unwrap().remove("model").unwrap();
    fs::write(tmp.path().join("model.json"), serde_json::to_string(&model).unwrap()).unwrap();
    v["model_file"] = "model.json".into();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    let out = tmp.path().join("out");
    let o = jumpex(&["lagrange", "--config", cfg.to_str().unwrap(), "--paths", "4000", "--json"], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = &run_dirs(&out)[0];
    assert!(dir.join("report.json").exists() && !dir.join("report.csv").exists());
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("multiplier.json")).unwrap()).unwrap();
    assert_eq!(m[0]["method"], "closed-form");
    assert_eq!(m[0]["se"], "exact");
    assert!(m[1]["se"].as_f64().unwrap() > 0.0);
    assert_eq!(body(dir)["config"]["paths"], 4000);
}

#[test]
fn reruns_reproduce_and_never_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = canonical();
    let args = ["value-check", "--config", cfg.to_str().unwrap(), "--paths", "2000", "--steps", "32", "--seed", "7"];
    assert!(jumpex(&args, tmp.path()).status.success());
    let first = run_dirs(tmp.path())[0].clone();
    let before = fs::read_to_string(first.join("report.json")).unwrap();
    let o = Command::new(BIN)
        .args(args)
        .env("JUMPEX_OUT", tmp.path())
        .env("JUMPEX_THREADS", "3")
        .output()
        .unwrap();
    assert!(o.status.success());
    let dirs = run_dirs(tmp.path());
    assert_eq!(dirs.len(), 2);
    assert_eq!(fs::read_to_string(first.join("report.json")).unwrap(), before);
    assert_eq!(body(&dirs[0]), body(&dirs[1]));
    let csv = fs::read_to_string(dirs[1].join("report.csv")).unwrap();
    for line in csv.lines().filter(|l| !l.starts_with('#')).skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        assert!(cells[2] == "exact" || cells[2].parse::<f64>().is_ok(), "{line}");
    }
}

#[test]
fn cli_out_flag_beats_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let flag = tmp.path().join("flag");
    let o = jumpex(
        &["demo-sample-state", "--config", canonical().to_str().unwrap(), "--paths", "2000", "--out", flag.to_str().unwrap()],
        &tmp.path().join("env"),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(run_dirs(&flag).len(), 1);
    assert!(!tmp.path().join("env").exists());
}

#[test]
fn bad_thread_count_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(BIN)
        .args(["hjb", "--config", canonical().to_str().unwrap()])
        .env("JUMPEX_OUT", tmp.path())
        .env("JUMPEX_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("JUMPEX_THREADS"));
}
