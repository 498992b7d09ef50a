use std::path::Path;
use std::process::{Command, Output};

use catnus::volume::read_volume;

fn catnus(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_catnus"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = catnus(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn phantom(dir: &Path) {
    ok(dir, &["phantom", "--out", "ph"]);
}

#[test]
fn exit_codes_and_messages() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(catnus(d, &[]).status.code(), Some(1));
    assert_eq!(catnus(d, &["nonsense"]).status.code(), Some(1));
    assert_eq!(catnus(d, &["--help"]).status.code(), Some(0));

    let unknown = catnus(d, &["eval", "--pred", "a", "--gt", "b", "--bogus"]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("--bogus"));

    let missing = catnus(d, &["eval", "--pred", "nope.ctnv", "--gt", "nope.ctnv"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("missing input"));

    std::fs::write(d.join("cfg.json"), r#"{"min_thalamus_size": 5, "unknown_key": 1}"#).unwrap();
    let schema = catnus(d, &["postprocess", "--seg", "s", "--probs", ".", "--config", "cfg.json"]);
    assert_eq!(schema.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&schema.stderr).contains("schema violation"));

    std::fs::write(d.join("garbage.ctnv"), b"not a volume").unwrap();
    let corrupt = catnus(d, &["eval", "--pred", "garbage.ctnv", "--gt", "garbage.ctnv"]);
    assert_eq!(corrupt.status.code(), Some(2));

    let bad_value = catnus(d, &["synth", "--t1", "a", "--pd", "b", "--tr", "100", "--ti", "400"]);
    assert_eq!(bad_value.status.code(), Some(1));
}

#[test]
fn synth_writes_default_ti_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    phantom(d);
    ok(d, &["synth", "--t1", "ph/t1.ctnv", "--pd", "ph/pd.ctnv", "--tr", "4000", "--out", "synth"]);
    let mut names: Vec<String> = std::fs::read_dir(d.join("synth"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("ti_"))
        .collect();
    names.sort();
    assert_eq!(names.len(), 51);
    assert_eq!(names.first().unwrap(), "ti_0400.ctnv");
    assert_eq!(names.last().unwrap(), "ti_1400.ctnv");

    ok(d, &["synth", "--t1", "ph/t1.ctnv", "--pd", "ph/pd.ctnv", "--ti-range", "500,700,100", "--out", "few"]);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("few/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 3);
    assert_eq!(manifest["inputs"][0]["file"], "t1.ctnv");
}

#[test]
fn eval_of_identical_volumes_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    phantom(d);
    let out = ok(d, &["eval", "--pred", "ph/labels.ctnv", "--gt", "ph/labels.ctnv", "--out", "ev"]);
    let report = std::fs::read_to_string(d.join("ev/report.csv")).unwrap();
    assert_eq!(String::from_utf8_lossy(&out.stdout), report);
    let rows: Vec<&str> = report.lines().skip(1).collect();
    assert_eq!(rows.len(), 13 + 1 + 7 + 1);
    assert!(rows.iter().all(|r| r.ends_with(",1.000000")), "{report}");
}

#[test]
fn flags_override_config_and_verbose_prints_it() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("cfg.json"), r#"{"noise_sigma": 0.01, "seed": 5}"#).unwrap();
    let out = ok(d, &["phantom", "--config", "cfg.json", "--seed", "9", "--out", "a", "--verbose"]);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("\"seed\": 9"), "{stderr}");
    assert!(stderr.contains("\"noise_sigma\": 0.01"), "{stderr}");

    ok(d, &["phantom", "--noise", "0.01", "--seed", "9", "--out", "b"]);
    for name in ["mprage.ctnv", "fgatir.ctnv", "manifest.json"] {
        let a = std::fs::read(d.join("a").join(name)).unwrap();
        let b = std::fs::read(d.join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
    ok(d, &["phantom", "--noise", "0.01", "--seed", "10", "--out", "c"]);
    assert_ne!(std::fs::read(d.join("a/mprage.ctnv")).unwrap(), std::fs::read(d.join("c/mprage.ctnv")).unwrap());
}

#[test]
fn chain_on_default_phantom() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["phantom", "--out", "ph", "--format", "nifti"]);
    ok(d, &["fit", "--mprage", "ph/mprage.nii", "--fgatir", "ph/fgatir.nii", "--mask", "ph/brain_mask.nii", "--out", "fit", "--threads", "2"]);
    let t1 = read_volume(d.join("fit/t1.ctnv")).unwrap().into_scalar().unwrap();
    let truth = read_volume(d.join("ph/t1.nii")).unwrap().into_scalar().unwrap();
    let mask = read_volume(d.join("ph/brain_mask.nii")).unwrap().into_label().unwrap();
    for i in 0..t1.len() {
        if mask.data()[i] != 0 {
            // NIfTI scalars are stored as f32.
            assert!((t1.data()[i] - truth.data()[i]).abs() / truth.data()[i] < 1e-5);
        }
    }
    ok(d, &["train", "--image", "fit/t1.ctnv", "--labels", "ph/labels.nii", "--epochs", "1", "--crop", "32", "--no-augment", "--out", "model"]);
    ok(d, &["segment", "--model", "model/model.ctnp", "--image", "fit/t1.ctnv", "--out", "seg"]);
    ok(d, &["postprocess", "--seg", "seg/labels.ctnv", "--probs", "seg", "--min-thalamus-size", "100", "--min-fragment-size", "5", "--out", "pp"]);
    ok(d, &["eval", "--pred", "pp/labels_pp.ctnv", "--gt", "ph/labels.nii", "--out", "ev"]);
    let labels = read_volume(d.join("pp/labels_pp.ctnv")).unwrap().into_label().unwrap();
    assert!(labels.data().iter().all(|&c| c <= 13));
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("pp/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["min_thalamus_size"], 100);
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 15);
}
