use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use aerodepth::ingest::{load_manifest, load_tie_points};
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_aerodepth"));
    c.env_remove("RUST_LOG").env_remove("AERODEPTH_WORKERS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_spec(extra_mono: &str) -> String {
    format!(
        r#"{{
  "seed": 3,
  "scene": {{"extent": {{"min_x": -160, "min_y": -160, "max_x": 160, "max_y": 160}},
            "base_elevation": 200}},
  "random_scene": {{"bumps": 3, "buildings": 5, "amplitude": [-10, 25], "sigma": [40, 90],
                    "building_size": [12, 25], "building_height": [8, 20], "margin": 10}},
  "flight": {{"altitude": 200, "forward_overlap": 0.6, "side_overlap": 0.6,
             "intrinsics": {{"fx": 115, "fy": 115, "cx": 49.5, "cy": 33, "width": 100, "height": 67}},
             "aoi": {{"min_x": -120, "min_y": -120, "max_x": 120, "max_y": 120}}}},
  "tie_points": {{"count": 20000, "interpolation_tolerance": 0.00001}},
  "mono": {{"kind": "relative"{extra_mono}}},
  "truth_dsm_cell_size": 4
}}"#
    )
}

fn write_spec(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("spec.json");
    std::fs::write(&p, text).unwrap();
    p
}

fn synth_dataset(dir: &Path) -> PathBuf {
    let spec = write_spec(dir, &small_spec(""));
    let data = dir.join("data");
    let o = run(&["synth", spec.to_str().unwrap(), data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    data
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn shipped_spec_produces_valid_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/low_overlap.synth.json");
    let data = tmp.path().join("d");
    let o = run(&["synth", spec, data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = load_manifest(&data.join("manifest.json")).unwrap();
    assert_eq!(m.images.len(), 20);
    assert!(!load_tie_points(&m).unwrap().points.is_empty());
    assert!(data.join("pipeline.json").is_file());
}

#[test]
fn synth_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), &small_spec(""));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = run(&["synth", spec.to_str().unwrap(), d.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let (fa, fb) = (files(&a), files(&b));
    assert!(fa.len() > 10);
    assert_eq!(fa, fb);
}

#[test]
fn pole_in_range_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let warp = r#", "warp": {"type": "rational", "alpha": 1, "beta": 0, "gamma": 1, "delta": -190}"#;
    let spec = write_spec(tmp.path(), &small_spec(warp));
    let o = run(&["synth", spec.to_str().unwrap(), tmp.path().join("d").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("pole"), "{}", stderr(&o));
}

#[test]
fn unknown_config_field_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    std::fs::write(&cfg, r#"{"manifest": "m.json", "output_dir": "o", "bogus": 1}"#).unwrap();
    let o = run(&["pipeline", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_manifest_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    std::fs::write(&cfg, r#"{"manifest": "nowhere.json", "output_dir": "o"}"#).unwrap();
    let o = run(&["recover", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_workers_and_bad_env_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_dataset(tmp.path());
    let cfg = data.join("pipeline.json");
    let o = run(&["recover", cfg.to_str().unwrap(), "--workers", "0"]);
    assert_eq!(o.status.code(), Some(2));
    let o = bin()
        .args(["recover", cfg.to_str().unwrap()])
        .env("AERODEPTH_WORKERS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["no-such-command"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn pipeline_writes_all_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_dataset(tmp.path());
    let o = run(&["pipeline", data.join("pipeline.json").to_str().unwrap(), "--workers", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(o.stdout.is_empty());
    let out = data.join("output");
    for f in [
        "fit_report.json",
        "cloud.ply",
        "dsm.asc",
        "dsm_unfilled.asc",
        "ortho.png",
        "ortho.pgw",
        "ortho_view_index.asc",
        "eval_report.json",
        "eval_report.txt",
        "run_summary.json",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let report = json(&out.join("fit_report.json"));
    let n = report["images"].as_array().unwrap().len();
    assert_eq!(report["recovered"].as_u64().unwrap() as usize, n);
    assert_eq!(std::fs::read_dir(out.join("recovered")).unwrap().count(), n);
    for img in report["images"].as_array().unwrap() {
        assert_eq!(img["status"], "ok");
        assert!(img["fit"]["residual_rmse"].as_f64().unwrap() < 1e-5, "{img}");
    }
    let eval = json(&out.join("eval_report.json"));
    let c = eval["completeness"].as_f64().unwrap();
    assert!(c >= 0.95 && c > eval["completeness_stereo_baseline"].as_f64().unwrap());
    for img in eval["images"].as_array().unwrap() {
        assert!(img["rmse"].as_f64().unwrap() < 1e-4, "{img}");
    }
    let summary = json(&out.join("run_summary.json"));
    let stages: Vec<_> = summary["stages"].as_array().unwrap().iter().map(|s| s["status"].clone()).collect();
    assert!(stages.iter().all(|s| s == "ok"), "{stages:?}");
}

#[test]
fn stages_run_separately_match_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_dataset(tmp.path());
    let cfg = data.join("pipeline.json");
    let o = run(&["pipeline", cfg.to_str().unwrap(), "--output-dir", tmp.path().join("all").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let split = tmp.path().join("split");
    for stage in ["recover", "cloud", "dsm", "ortho", "eval"] {
        let o = run(&[stage, cfg.to_str().unwrap(), "--output-dir", split.to_str().unwrap()]);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    let (mut a, mut b) = (files(&tmp.path().join("all")), files(&split));
    a.remove(Path::new("run_summary.json"));
    b.remove(Path::new("run_summary.json"));
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    assert!(a == b);
}

#[test]
fn worker_count_does_not_change_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_dataset(tmp.path());
    let cfg = data.join("pipeline.json");
    let mut outputs = Vec::new();
    for w in ["1", "8"] {
        let dir = tmp.path().join(format!("w{w}"));
        let o = run(&["pipeline", cfg.to_str().unwrap(), "--workers", w, "--output-dir", dir.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        let mut f = files(&dir);
        f.remove(Path::new("run_summary.json"));
        outputs.push(f);
    }
    assert!(outputs[0] == outputs[1]);
}

#[test]
fn eval_without_ground_truth_is_skipped() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_dataset(tmp.path());
    let cfg = tmp.path().join("nogt.json");
    let text = format!(
        r#"{{"manifest": "{}", "output_dir": "out", "dsm": {{"cell_size": 4}}}}"#,
        data.join("manifest.json").display()
    );
    std::fs::write(&cfg, text).unwrap();
    let o = run(&["pipeline", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("no ground truth"));
    let summary = json(&tmp.path().join("out/run_summary.json"));
    assert_eq!(summary["stages"][4]["status"], "skipped");
    assert!(!tmp.path().join("out/eval_report.json").exists());
}

#[test]
fn missing_depth_file_skips_that_image() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_dataset(tmp.path());
    std::fs::remove_file(data.join("mono/IMG_0002.pfm")).unwrap();
    let o = run(&["recover", data.join("pipeline.json").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("IMG_0002"));
    let report = json(&data.join("output/fit_report.json"));
    assert_eq!(report["skipped"], serde_json::json!([2]));
    assert!(!data.join("output/recovered/IMG_0002.pfm").exists());
    assert!(data.join("output/recovered/IMG_0001.pfm").exists());
}

#[test]
fn no_recoverable_image_is_a_data_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_dataset(tmp.path());
    for e in std::fs::read_dir(data.join("mono")).unwrap() {
        std::fs::remove_file(e.unwrap().path()).unwrap();
    }
    let o = run(&["recover", data.join("pipeline.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("recover"));
}

#[test]
fn stage_without_prerequisites_fails_with_stage_name() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_dataset(tmp.path());
    let o = run(&["dsm", data.join("pipeline.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("dsm stage failed"), "{}", stderr(&o));
}
