use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use oarseg::io::{read_mask, write_volume, ElementType};
use oarseg::volume::Volume;

fn config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config/phantom.toml")
}

fn oarseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oarseg"))
        .args(args)
        .env_remove("OARSEG_CONFIG")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = oarseg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn file_workflow_from_phantom_to_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg = config();
    ok(&["phantom", "--out", s(&data), "--cases", "3", "--seed", "7"]);
    let case = data.join("case_000");
    assert!(case.join("image.nrrd").is_file());
    let gt = case.join("masks/brainstem.nrrd");

    let pre = dir.path().join("pre");
    ok(&["preprocess", "--in", s(&case), "--out", s(&pre), "--structure", "brainstem"]);
    assert_eq!(read_mask(pre.join("masks/brainstem.nrrd")).unwrap().dims(), [384, 384, 224]);

    let loc = dir.path().join("loc.bin");
    let seg = dir.path().join("seg.bin");
    for (stage, path) in [("loc", &loc), ("seg", &seg)] {
        ok(&[
            "--config", s(&cfg), "train", "--stage", stage, "--structure", "brainstem", "--data", s(&data),
            "--out", s(path), "--epochs", "0", "--base-channels", "2",
        ]);
    }
    let pred = dir.path().join("pred.nrrd");
    ok(&[
        "infer", "--structure", "brainstem", "--locnet", s(&loc), "--segnet", s(&seg), "--image",
        s(&case.join("image.nrrd")), "--out", s(&pred),
    ]);
    assert_eq!(read_mask(&pred).unwrap().dims(), read_mask(&gt).unwrap().dims());

    // Swapped models are refused.
    let out = oarseg(&[
        "infer", "--structure", "brainstem", "--locnet", s(&seg), "--segnet", s(&loc), "--image",
        s(&case.join("image.nrrd")), "--out", s(&pred),
    ]);
    assert_eq!(out.status.code(), Some(1));

    let report = dir.path().join("report.jsonl");
    let line = ok(&["evaluate", "--pred", s(&gt), "--gt", s(&gt), "--report", s(&report)]);
    let rec: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(rec["dsc"], 1.0);
    assert_eq!(rec["hd95"], 0.0);
    assert_eq!(rec["case"], "case_000");
    ok(&["evaluate", "--pred", s(&pred), "--gt", s(&gt), "--report", s(&report)]);
    assert_eq!(std::fs::read_to_string(&report).unwrap().lines().count(), 2);
    let summary = ok(&["evaluate", "--report", s(&report), "--summary"]);
    assert!(summary.contains("brainstem"), "{summary}");
}

#[test]
fn locate_prints_the_box() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("prob.nrrd");
    let v = Volume::from_fn([16, 16, 16], [1.0; 3], |x, y, z| {
        if (4..8).contains(&x) && (6..10).contains(&y) && (2..6).contains(&z) { 0.9 } else { 0.1 }
    })
    .unwrap();
    write_volume(&v, ElementType::F32, &path).unwrap();
    let line = ok(&["locate", "--prob", s(&path), "--box", "4,4,4"]);
    let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(v["min"], serde_json::json!([4, 6, 2]));
    assert_eq!(v["size"], serde_json::json!([4, 4, 4]));
}

#[test]
fn gradcheck_reports_success() {
    let out = ok(&["gradcheck", "--seed", "3"]);
    assert!(out.contains("max relative error"), "{out}");
}

#[test]
fn bad_arguments_and_inputs_fail_cleanly() {
    let out = oarseg(&["train", "--stage", "both"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[usage]"));

    let out = oarseg(&["locate", "--prob", "/nonexistent.nrrd", "--box", "2,2,2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[io]"));
}
