use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pdemap"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn bundled_estimate_config_converges() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("estimate.json");
    let out = run(&["estimate", "-c", cfg.to_str().unwrap(), "-o", tmp.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s = summary(tmp.path());
    assert_eq!(s["status"], "ok");
    assert_eq!(s["converged"], true);
    let fit: Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("fit.json")).unwrap()).unwrap();
    assert_eq!(fit["converged"], true);
    assert!(tmp.path().join("trace.csv").exists() && tmp.path().join("f_hat.csv").exists());
}

#[test]
fn missing_sigma_is_a_config_error_naming_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    std::fs::write(
        &cfg,
        "{\n  \"model\": { \"kind\": \"darcy\" },\n  \"simulate\": { \"n_obs\": 16 }\n}\n",
    )
    .unwrap();
    let out_dir = tmp.path().join("out");
    let out = run(&["simulate", "-c", cfg.to_str().unwrap(), "-o", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("sigma"), "{err}");
    assert!(err.contains("\"line\":3"), "{err}");
    assert_eq!(summary(&out_dir)["status"], "error");
}

#[test]
fn unknown_keys_and_bad_overrides_are_rejected() {
    let cfg = configs().join("simulate.json");
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "simulate",
        "-c",
        cfg.to_str().unwrap(),
        "-o",
        tmp.path().to_str().unwrap(),
        "--set",
        "simulate.sigmaa=0.1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("simulate.sigmaa"));
}

#[test]
fn numerical_failures_exit_with_code_three() {
    // squared residuals of a 1e300-scale solution overflow
    let cfg = configs().join("estimate.json");
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "estimate",
        "-c",
        cfg.to_str().unwrap(),
        "-o",
        tmp.path().to_str().unwrap(),
        "--set",
        "model.source_amplitude=1e300",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let s = summary(tmp.path());
    assert_eq!(s["status"], "error");
    assert_eq!(s["kind"], "numerical");

    let out = run(&["estimate", "-c", cfg.to_str().unwrap(), "-o", tmp.path().to_str().unwrap(), "--set", "model.n=1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn reruns_are_byte_identical() {
    let cfg = configs().join("simulate.json");
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        let out = run(&["simulate", "-c", cfg.to_str().unwrap(), "-o", dir.path().to_str().unwrap(), "--set", "simulate.n_obs=200"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for file in ["data.csv", "truth_f.csv", "data.json", "summary.json"] {
        let x = std::fs::read(a.path().join(file)).unwrap();
        let y = std::fs::read(b.path().join(file)).unwrap();
        assert_eq!(x, y, "{file} differs");
    }
}

#[test]
fn estimate_reads_saved_data() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = configs().join("simulate.json");
    let out = run(&["simulate", "-c", sim.to_str().unwrap(), "-o", tmp.path().to_str().unwrap(), "--set", "simulate.n_obs=128", "--set", "model.n=32"]);
    assert!(out.status.success());
    let cfg = tmp.path().join("fit.json");
    std::fs::write(
        &cfg,
        r#"{ "model": { "kind": "darcy", "n": 32 }, "data": { "csv": "data.csv", "meta": "data.json" }, "estimator": { "K": 4, "r": 0.1 } }"#,
    )
    .unwrap();
    let out_dir = tmp.path().join("fit");
    let out = run(&["estimate", "-c", cfg.to_str().unwrap(), "-o", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s = summary(&out_dir);
    assert_eq!(s["n_obs"], 128);
    assert_eq!(s["K"], 4);
}

#[test]
fn props_and_oracle_run_small() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("props.json");
    let out = run(&["props", "-c", cfg.to_str().unwrap(), "-o", tmp.path().to_str().unwrap(), "--set", "props.pairs=40", "--set", "model.n=32"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(summary(tmp.path())["interpolation"]["pass"].as_bool().unwrap());

    let cfg = configs().join("oracle-check.json");
    let out = run(&[
        "oracle-check",
        "-c",
        cfg.to_str().unwrap(),
        "-o",
        tmp.path().to_str().unwrap(),
        "--set",
        "oracle.n_paths=4000",
        "--set",
        "oracle.dt=1e-4",
        "--set",
        "oracle.points=[[0.5]]",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(summary(tmp.path())["all_agree"], true);
}

#[test]
fn help_lists_every_key() {
    for (cmd, key) in [
        ("simulate", "simulate.sigma"),
        ("estimate", "estimator.restarts"),
        ("rates", "campaign.workers"),
        ("props", "props.c7_tolerance"),
        ("oracle-check", "oracle.bias"),
    ] {
        let out = run(&[cmd, "--help"]);
        let text = String::from_utf8_lossy(&out.stdout);
        assert!(text.contains(key), "{cmd} help lacks {key}");
        assert!(text.contains("model.kind"));
    }
}

#[test]
fn campaign_commands_write_artifacts() {
    let small = ["--set", "model.n=16", "--set", "estimator.restarts=1"];
    let tmp = tempfile::tempdir().unwrap();
    let cases: [(&str, &[&str], &[&str]); 3] = [
        ("rates", &["--set", "campaign.n_ladder=[32,64,128,256]", "--set", "campaign.reps=10", "--set", "campaign.workers=2"], &["rates.csv", "rates.json", "rates.svg"]),
        ("concentration", &["--set", "campaign.n_ladder=[64]", "--set", "campaign.reps=50"], &["concentration.csv", "concentration.json"]),
        ("stability", &["--set", "campaign.n_ladder=[32,128]", "--set", "campaign.reps=5"], &["stability.csv", "stability.json"]),
    ];
    for (cmd, extra, files) in cases {
        let cfg = configs().join(format!("{cmd}.json"));
        let dir = tmp.path().join(cmd);
        let mut args = vec![cmd, "-c", cfg.to_str().unwrap(), "-o", dir.to_str().unwrap()];
        args.extend_from_slice(&small);
        args.extend_from_slice(extra);
        let out = run(&args);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(summary(&dir)["status"], "ok");
        for f in files {
            assert!(dir.join(f).exists(), "{cmd} did not write {f}");
        }
    }
    let conc = summary(&tmp.path().join("concentration"));
    assert_eq!(conc["frequencies"][0], 1.0);
    assert_eq!(conc["non_increasing"], true);

    let cfg = configs().join("rates.json");
    let out = run(&["rates", "-c", cfg.to_str().unwrap(), "-o", tmp.path().to_str().unwrap(), "--set", "estimator.K=3"]);
    assert_eq!(out.status.code(), Some(2));
}
