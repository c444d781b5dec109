use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use periscope::synthgen::SceneSpec;
use serde_json::Value;

fn periscope(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_periscope"))
        .args(args)
        .current_dir(dir)
        .env_remove("PERISCOPE_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> Output {
    let out = periscope(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json_stdout(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

const TINY: &str = r#"{"network": {"base_channels": 1}, "train": {"max_epochs": 3, "patience": 0}}"#;

#[test]
fn synth_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["synth", "--n", "10", "--seed", "1", "--out", "a"], tmp.path());
    ok(&["synth", "--n", "10", "--seed", "1", "--out", "b"], tmp.path());
    let a = read_tree(&tmp.path().join("a"));
    assert_eq!(a.len(), 31);
    assert_eq!(a, read_tree(&tmp.path().join("b")));
}

#[test]
fn seed_precedence_flag_over_env() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |seed_env: &str, extra: &[&str], out: &str| {
        let mut args = vec!["synth", "--n", "10", "--out", out];
        args.extend_from_slice(extra);
        let o = Command::new(env!("CARGO_BIN_EXE_periscope"))
            .args(&args)
            .current_dir(tmp.path())
            .env("PERISCOPE_SEED", seed_env)
            .output()
            .unwrap();
        assert!(o.status.success());
        let stderr = String::from_utf8(o.stderr).unwrap();
        assert!(stderr.starts_with("resolved config: {"), "{stderr}");
        let m: Value = serde_json::from_slice(&fs::read(tmp.path().join(out).join("manifest.json")).unwrap()).unwrap();
        m["seed"].as_u64().unwrap()
    };
    assert_eq!(run("5", &[], "env"), 5);
    assert_eq!(run("5", &["--seed", "9"], "flag"), 9);
}

#[test]
fn errors_are_one_classified_line() {
    let tmp = tempfile::tempdir().unwrap();
    let out = periscope(&["eval", "--data", "missing", "--checkpoint", "x.ckpt"], tmp.path());
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    assert!(stderr.starts_with("error[io]: "), "{stderr}");

    fs::write(tmp.path().join("bad.json"), r#"{"train": {"lr": -1}}"#).unwrap();
    ok(&["synth", "--n", "10", "--out", "d"], tmp.path());
    let out = periscope(
        &["train", "--data", "d", "--config", "bad.json", "--out-checkpoint", "m.ckpt"],
        tmp.path(),
    );
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.lines().last().unwrap().starts_with("error[config]: "), "{stderr}");
}

#[test]
fn train_is_reproducible_and_eval_reports_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("tiny.json"), TINY).unwrap();
    ok(&["synth", "--n", "10", "--seed", "3", "--out", "data"], d);
    for name in ["a.ckpt", "b.ckpt"] {
        ok(
            &["train", "--data", "data", "--config", "tiny.json", "--seed", "2", "--out-checkpoint", name],
            d,
        );
    }
    assert_eq!(fs::read(d.join("a.ckpt")).unwrap(), fs::read(d.join("b.ckpt")).unwrap());
    let history = fs::read_to_string(d.join("a.ckpt.history.jsonl")).unwrap();
    assert_eq!(history, fs::read_to_string(d.join("b.ckpt.history.jsonl")).unwrap());
    assert_eq!(history.lines().count(), 3);

    let report = json_stdout(&ok(&["eval", "--data", "data", "--checkpoint", "a.ckpt"], d));
    assert_eq!(report["format_version"], 1);
    for key in ["abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3"] {
        assert!(report[key].is_f64(), "{key} missing");
    }
}

#[test]
fn eval_of_perfect_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("tiny.json"), TINY).unwrap();
    ok(&["synth", "--n", "10", "--seed", "4", "--out", "data"], d);
    ok(&["train", "--data", "data", "--config", "tiny.json", "--out-checkpoint", "m.ckpt"], d);
    // replace every ground-truth depth with the model's own prediction
    let manifest: Value = serde_json::from_slice(&fs::read(d.join("data/manifest.json")).unwrap()).unwrap();
    for entry in manifest["samples"].as_array().unwrap() {
        let id = entry["id"].as_str().unwrap();
        let img = format!("data/{id}_img.png");
        ok(&["predict", "--image", &img, "--checkpoint", "m.ckpt", "--out", "pred"], d);
        fs::copy(
            d.join(format!("pred/{id}_img_depth.f32")),
            d.join(format!("data/{id}_depth.f32")),
        )
        .unwrap();
    }
    let report = json_stdout(&ok(&["eval", "--data", "data", "--checkpoint", "m.ckpt", "--split", "test"], d));
    assert!(report["abs_rel"].as_f64().unwrap() < 1e-6, "{report}");
    assert_eq!(report["delta1"].as_f64().unwrap(), 1.0);
}

#[test]
fn refraction_table_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&["refraction-sim"], tmp.path());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "angle, actual, observed, error%");
    assert_eq!(lines.len(), 8);
    assert!(lines[7].starts_with("60, 4.00, "));

    let out = ok(&["refraction-sim", "--refractive-index", "1.0", "--angles", "60:60:1"], tmp.path());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "angle, actual, observed, error%\n60, 4.00, 4.00, 0.00\n");

    let out = periscope(&["refraction-sim", "--angles", "0:90:10"], tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error[config]"));
}

#[test]
fn calibrate_writes_trace_and_spec() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let spec0 = SceneSpec::canonical();
    let mut truth = spec0;
    truth.theta_light *= 1.2;
    fs::write(d.join("spec0.json"), serde_json::to_vec(&spec0).unwrap()).unwrap();
    fs::write(d.join("truth.json"), serde_json::to_vec(&truth).unwrap()).unwrap();
    ok(
        &["synth-stream", "--out", "target", "--spec", "truth.json", "--frames", "1", "--blink-period-s", "0"],
        d,
    );
    let out = ok(
        &["calibrate", "--target", "target/frame_00000.png", "--spec0", "spec0.json", "--out-trace", "trace.csv"],
        d,
    );
    let report = json_stdout(&out);
    assert_eq!(report["status"], "converged");
    assert!(report["mae_total"].as_f64().unwrap() < 1.275);
    let light = report["spec"]["theta_light"].as_f64().unwrap();
    assert!((light / truth.theta_light - 1.0).abs() < 0.05);
    let trace = fs::read_to_string(d.join("trace.csv")).unwrap();
    assert!(trace.starts_with("step,theta_noise,theta_light,mae_total\n0,"));
    assert_eq!(trace.lines().count() as u64, report["steps"].as_u64().unwrap() + 1);
}

#[test]
fn measure_pupil_on_synthetic_stream() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("tiny.json"), TINY).unwrap();
    ok(&["synth", "--n", "10", "--out", "data"], d);
    ok(&["train", "--data", "data", "--config", "tiny.json", "--out-checkpoint", "m.ckpt"], d);
    ok(&["synth-stream", "--out", "s", "--frames", "70"], d);
    let out = ok(
        &["measure-pupil", "--stream-dir", "s", "--checkpoint", "m.ckpt", "--provider", "synthetic", "--with-ground-truth"],
        d,
    );
    let r = json_stdout(&out);
    assert_eq!(r["n_maps_used"], 8);
    assert_eq!(r["complete"], true);
    assert!(r["diameter_mm"].as_f64().unwrap() > 0.0);
    assert!(r["per_region_mae"]["pupil"].is_f64());

    ok(&["predict", "--stream-dir", "s", "--checkpoint", "m.ckpt", "--out", "p"], d);
    assert_eq!(fs::read_dir(d.join("p")).unwrap().count(), 140);
}
