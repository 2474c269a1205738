use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn speckle(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_speckle"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn sim_config(eta: f64, seed: u64) -> String {
    format!(
        r#"{{"viscosity_pa_s":{eta},"particle_radius_m":7e-7,"temperature_k":293.15,"opacity":1.0,
"wavelength_m":8e-7,"width":64,"height":64,"pixels_per_meter":1.25e7,"frames":120,"fps":30,"seed":{seed},
"particle_count":200}}"#
    )
}

#[test]
fn sim_distort_stabilize_analyze() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("sim.json"), sim_config(2e-3, 3)).unwrap();
    assert!(speckle(&["sim", "--config", "sim.json", "--out", "clean"], dir)
        .status
        .success());
    assert!(dir.join("clean/frame_000119.pgm").exists());
    assert!(speckle(&["distort", "clean", "captured", "--seed", "4"], dir)
        .status
        .success());
    let out = speckle(&["stabilize", "captured", "--out", "sel.json"], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sel: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("sel.json")).unwrap()).unwrap();
    assert_eq!(sel["indices"].as_array().unwrap().len(), 10);
    assert!(speckle(
        &["analyze", "captured", "--selection", "sel.json", "--out", "curve.json"],
        dir
    )
    .status
    .success());
    let curve: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("curve.json")).unwrap()).unwrap();
    for key in [
        "lags",
        "coefficients",
        "viscosity_coefficient",
        "tau_c",
        "crop",
        "contrast_first_frame",
    ] {
        assert!(curve.get(key).is_some(), "missing {key}");
    }
    assert_eq!(curve["coefficients"][0], 1.0);
}

#[test]
fn calibrate_then_convert() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(
        dir.join("points.csv"),
        "V,viscosity_cp\n0.2,1\n0.4,2\n0.6,4\n0.8,8\n0.9,12\n",
    )
    .unwrap();
    assert!(
        speckle(&["calibrate", "--points", "points.csv", "--out", "model.json"], dir)
            .status
            .success()
    );
    let out = speckle(&["viscosity", "--model", "model.json", "--v", "0.95"], dir);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["extrapolated"], true);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    // Missing input is a validation error.
    assert_eq!(speckle(&["analyze", "nowhere"], dir).status.code(), Some(2));
    assert_eq!(speckle(&["experiment", "no-such-preset"], dir).status.code(), Some(2));
    fs::write(dir.join("few.csv"), "V,viscosity_cp\n0.2,1\n0.4,2\n0.6,4\n").unwrap();
    assert_eq!(
        speckle(&["calibrate", "--points", "few.csv"], dir).status.code(),
        Some(3)
    );
    // A clean clip has no flicker comb, so too few peaks survive.
    fs::write(dir.join("sim.json"), sim_config(1.0, 5)).unwrap();
    assert!(speckle(&["sim", "--config", "sim.json", "--out", "clean"], dir)
        .status
        .success());
    let out = speckle(&["stabilize", "clean"], dir);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn classify_train_and_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (label, eta) in [("thin", 1e-3), ("thick", 1.0)] {
        for seed in 0..3u64 {
            let name = format!("{label}-{seed}");
            fs::write(
                dir.join("sim.json"),
                sim_config(eta, seed).replace("\"frames\":120", "\"frames\":10"),
            )
            .unwrap();
            assert!(speckle(&["sim", "--config", "sim.json", "--out", &name], dir)
                .status
                .success());
            let entry = serde_json::json!({ "dir": name, "label": label });
            if seed < 2 {
                train.push(entry)
            } else {
                test.push(entry)
            }
        }
    }
    fs::write(dir.join("train.json"), serde_json::to_string(&train).unwrap()).unwrap();
    fs::write(dir.join("test.json"), serde_json::to_string(&test).unwrap()).unwrap();
    assert!(speckle(
        &["classify", "train", "--manifest", "train.json", "--out", "svm.json"],
        dir
    )
    .status
    .success());
    let out = speckle(
        &[
            "classify",
            "eval",
            "--model",
            "svm.json",
            "--manifest",
            "test.json",
            "--out",
            "c.csv",
        ],
        dir,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["accuracy"], 1.0);
    assert!(fs::read_to_string(dir.join("c.csv"))
        .unwrap()
        .starts_with("true\\predicted"));
    // Evaluating on training sequences is refused.
    let out = speckle(
        &[
            "classify",
            "eval",
            "--model",
            "svm.json",
            "--manifest",
            "train.json",
            "--out",
            "c.csv",
        ],
        dir,
    );
    assert_eq!(out.status.code(), Some(2));
}
