use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn relaxo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relaxo"))
        .args(args)
        .env_remove("RELAXO_WORKERS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn ok(args: &[&str]) -> Value {
    let out = relaxo(args);
    assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn param(fit: &Value, name: &str) -> f64 {
    fit["params"]
        .as_array()
        .unwrap()
        .iter()
        .find(|p| p["name"] == name)
        .unwrap()["value"]
        .as_f64()
        .unwrap()
}

const CURVE: &str = r#"{"kind": "curve", "version": 1, "gamma1": "0.5kHz", "eta": 0.4,
    "tau": {"start": "1us", "stop": "5ms", "points": 25}, "repetitions": 1000000, "seed": 3}"#;

fn scene(seed: u64, particles: &str) -> String {
    format!(
        r#"{{"kind": "scene", "version": 1, "width": 32, "height": 32, "t_p": "10us",
        "eta_span": [0.3, 0.8], "gamma1_background": "200Hz", "seed": {seed},
        "particles": [{particles}]}}"#
    )
}

#[test]
fn simulate_and_fit_a_curve() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "curve.json", CURVE);
    let out = dir.path().join("sim");
    let summary = ok(&["simulate", s(&cfg), "--out", s(&out)]);
    assert_eq!(summary["kind"], "curve");
    let csv = out.join("curve.csv");

    let two = ok(&["fit", s(&csv), "--model", "two-state", "--fix", "eta=0.4"]);
    let se = two["params"][0]["stderr"].as_f64().unwrap();
    assert!((param(&two, "gamma1") - 500.0).abs() < 3.0 * se, "{two}");
    assert_eq!(param(&two, "eta"), 0.4);

    let single = ok(&["fit", s(&csv), "--model", "single"]);
    assert!(param(&single, "gamma1") > param(&two, "gamma1"));

    let json = dir.path().join("fit.json");
    let row = dir.path().join("fit.csv");
    let summary = ok(&["fit", s(&csv), "--model", "stretched", "--out", s(&json), "--csv", s(&row)]);
    assert_eq!(summary["converged"], true);
    let text = fs::read_to_string(&row).unwrap();
    assert!(text.starts_with("model,gamma1,gamma1_stderr"));
    assert_eq!(text.lines().count(), 2);
    let full: Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(full["model"], "stretched");

    let fixed = ok(&["fit", s(&csv), "--model", "two-state", "--fix", "gamma1=0.5kHz"]);
    assert_eq!(param(&fixed, "gamma1"), 500.0);
}

#[test]
fn simulate_an_ensemble_curve() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "ens.json",
        r#"{"kind": "ensemble", "version": 1, "gamma1": 500, "eta": 0.3, "tau": ["1us", "10us", "100us", "1ms"],
            "ensemble": {"rate_sd": "100Hz", "members": 200}, "seed": 4}"#,
    );
    let summary = ok(&["simulate", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(summary["members"], 200);
    assert_eq!(fs::read_to_string(dir.path().join("curve.csv")).unwrap().lines().count(), 5);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "curve.json", CURVE);
    ok(&["simulate", s(&cfg), "--out", s(dir.path())]);
    let csv = dir.path().join("curve.csv");

    assert_eq!(code(&relaxo(&["fit", s(&csv), "--model", "single", "--fix", "bogus=1"])), 2);
    assert_eq!(code(&relaxo(&["fit", s(&dir.path().join("nope.csv")), "--model", "single"])), 2);
    assert_eq!(code(&relaxo(&["fit", s(&csv), "--model", "quadratic"])), 2);
    assert_eq!(code(&relaxo(&["characterize", "/nonexistent/manifest.json", "--out", s(dir.path())])), 2);

    let bad_version = write(dir.path(), "v2.json", &CURVE.replace("\"version\": 1", "\"version\": 2"));
    assert_eq!(code(&relaxo(&["simulate", s(&bad_version), "--out", s(dir.path())])), 2);
    let unknown = write(dir.path(), "u.json", &CURVE.replace("\"seed\"", "\"colour\": 1, \"seed\""));
    let out = relaxo(&["simulate", s(&unknown), "--out", s(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));

    let scene_cfg = write(dir.path(), "scene.json", &scene(1, ""));
    let stack = dir.path().join("stack");
    ok(&["simulate", s(&scene_cfg), "--out", s(&stack)]);
    let manifest = stack.join("manifest.json");
    let eta = stack.join("truth_eta.json");
    let maps = dir.path().join("maps");
    assert_eq!(code(&relaxo(&["map", s(&manifest), "--out", s(&maps)])), 2);
    assert_eq!(
        code(&relaxo(&["map", s(&manifest), "--eta", s(&eta), "--model", "stretched", "--out", s(&maps)])),
        2
    );
    let wrong = dir.path().join("wrong");
    ok(&["simulate", s(&write(dir.path(), "small.json", &scene(1, "").replace("32", "16"))), "--out", s(&wrong)]);
    let out = relaxo(&["map", s(&manifest), "--eta", s(&wrong.join("truth_eta.json")), "--out", s(&maps)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("dimension"));

    let list = write(dir.path(), "p.json", r#"{"roi_half_size": 3, "particles": [{"id": "edge", "x": 31, "y": 10}]}"#);
    let out = relaxo(&["particles", s(&eta), "--particles", s(&list), "--out", s(&maps)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("edge"));
}

#[test]
fn analytic_failures_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let dark = scene(1, "").replace(r#""eta_span": [0.3, 0.8]"#, r#""beam": {"center": [16, 16], "radius": 10, "peak_gamma_p": 0}"#);
    let cfg = write(dir.path(), "dark.json", &dark);
    ok(&["simulate", s(&cfg), "--out", s(dir.path())]);
    let out = relaxo(&["characterize", s(&dir.path().join("manifest.json")), "--out", s(dir.path())]);
    assert_eq!(code(&out), 3);
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["valid_pixels"], 0);
    let eta = dir.path().join("eta.json");
    assert!(eta.exists());
    assert_eq!(code(&relaxo(&["render", s(&eta), "--out", s(&dir.path().join("eta.pgm"))])), 3);
    assert_eq!(code(&relaxo(&["particles", s(&eta), "--out", s(dir.path())])), 3);
}

#[test]
fn full_pipeline_from_scene_to_render() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let reference = write(d, "reference.json", &scene(8, ""));
    let target = write(
        d,
        "target.json",
        &scene(7, r#"{"x": 9, "y": 9, "radius": 3, "gamma_target": "200Hz"}, {"x": 22, "y": 20, "radius": 3, "gamma_target": 200}"#),
    );
    ok(&["simulate", s(&reference), "--out", s(&d.join("ref"))]);
    let summary = ok(&["simulate", s(&target), "--out", s(&d.join("tgt"))]);
    assert_eq!(summary["particles"], 2);

    let summary = ok(&["characterize", s(&d.join("ref/manifest.json")), "--gamma1", "200Hz", "--out", s(&d.join("eta"))]);
    assert_eq!(summary["valid_pixels"], 32 * 32);
    let eta = d.join("eta/eta.json");
    let manifest = d.join("tgt/manifest.json");
    ok(&["map", s(&manifest), "--eta", s(&eta), "--out", s(&d.join("maps"))]);
    ok(&["map", s(&manifest), "--model", "stretched", "--workers", "2", "--out", s(&d.join("maps"))]);
    for stem in ["gamma1", "amplitude", "offset", "chi2", "gamma1_stretched", "stretch", "chi2_stretched"] {
        for ext in ["json", "f32", "mask"] {
            assert!(d.join(format!("maps/{stem}.{ext}")).exists(), "{stem}.{ext}");
        }
    }

    let gamma = d.join("maps/gamma1.json");
    let summary = ok(&[
        "particles",
        s(&gamma),
        "--particles",
        s(&d.join("tgt/particles.json")),
        "--intrinsic",
        "200Hz",
        "--out",
        s(&d.join("report")),
    ]);
    assert_eq!(summary["particles"], 2);
    let report: Value = serde_json::from_str(&fs::read_to_string(d.join("report/report.json")).unwrap()).unwrap();
    for p in report["particles"].as_array().unwrap() {
        let excess = p["target"]["value"].as_f64().unwrap();
        assert!((excess - 200.0).abs() < 20.0, "{p}");
    }
    assert!((report["background"]["mean"].as_f64().unwrap() - 200.0).abs() < 5.0);
    let csv = fs::read_to_string(d.join("report/particles.csv")).unwrap();
    assert!(csv.starts_with("id,x,y,n_valid,mean,sd,target_rate,unphysical"));
    assert!(fs::read_to_string(d.join("report/histogram.csv")).unwrap().starts_with("bin_left,bin_right,background,particles"));

    let detected = ok(&["particles", s(&gamma), "--detect", "5", "--roi-half-size", "2", "--out", s(&d.join("detected"))]);
    assert_eq!(detected["particles"], 2);

    let pgm = d.join("render/gamma1.pgm");
    ok(&["render", s(&gamma), "--out", s(&pgm)]);
    let bytes = fs::read(&pgm).unwrap();
    assert!(bytes.starts_with(b"P5\n32 32\n65535\n"));
    assert_eq!(bytes.len(), b"P5\n32 32\n65535\n".len() + 32 * 32 * 2);
    let info: Value = serde_json::from_str(&fs::read_to_string(d.join("render/gamma1.pgm.json")).unwrap()).unwrap();
    assert_eq!(info["quantity"], "gamma1");
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write(d, "scene.json", &scene(5, r#"{"x": 16, "y": 16, "radius": 3, "gamma_target": 300}"#));
    for run in ["a", "b"] {
        let out = d.join(run);
        ok(&["simulate", s(&cfg), "--out", s(&out)]);
        ok(&["characterize", s(&out.join("manifest.json")), "--out", s(&out)]);
        let workers = if run == "a" { "1" } else { "3" };
        ok(&["map", s(&out.join("manifest.json")), "--eta", s(&out.join("eta.json")), "--workers", workers, "--out", s(&out)]);
    }
    let mut names: Vec<_> = fs::read_dir(d.join("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() > 50);
    for name in names {
        let a = fs::read(d.join("a").join(&name)).unwrap();
        let b = fs::read(d.join("b").join(&name)).unwrap();
        assert!(a == b, "{name:?} differs");
    }
}

#[test]
fn workers_may_come_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write(d, "scene.json", &scene(2, ""));
    ok(&["simulate", s(&cfg), "--out", s(d)]);
    let out = Command::new(env!("CARGO_BIN_EXE_relaxo"))
        .args(["characterize", s(&d.join("manifest.json")), "--out", s(d)])
        .env("RELAXO_WORKERS", "0")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}
