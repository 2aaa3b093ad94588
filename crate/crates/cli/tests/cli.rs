//! End-to-end runs of the `tdm` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tdm_core::detect::{Detection, DetectionRecord};
use tdm_core::synthdata::{read_annotations, write_json_lines, ANNOTATIONS_FILE};

fn tdm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tdm")).args(args).output().unwrap()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn stderr_error(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().last().expect("stderr is empty");
    serde_json::from_str(line).unwrap()
}

#[test]
fn synth_writes_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    let o = tdm(&["synth", "--n", "4", "--seed", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let anns = read_annotations(&out.join(ANNOTATIONS_FILE)).unwrap();
    assert_eq!(anns.len(), 4);
    for a in &anns {
        assert!(out.join(&a.file).exists());
    }
}

#[test]
fn synth_spec_file_matches_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let spec = configs().join("synth_desk.json");
    assert!(tdm(&["synth", "--spec", spec.to_str().unwrap(), "--n", "2", "--out", a.to_str().unwrap()]).status.success());
    assert!(tdm(&["synth", "--n", "2", "--out", b.to_str().unwrap()]).status.success());
    let read = |p: &Path| std::fs::read(p.join(ANNOTATIONS_FILE)).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn inspect_matches_golden_tables() {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden");
    for name in ["toy4", "vgg16", "resnet101", "irnv2"] {
        let arch = configs().join(format!("{}.json", name));
        let g = golden.join(format!("inspect_{}.txt", name));
        let o = tdm(&["inspect", arch.to_str().unwrap(), "--golden", g.to_str().unwrap()]);
        assert!(o.status.success(), "{}: {}", name, String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn inspect_golden_mismatch_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let g = tmp.path().join("g.txt");
    std::fs::write(&g, "not a table\n").unwrap();
    let arch = configs().join("toy4.json");
    let o = tdm(&["inspect", arch.to_str().unwrap(), "--golden", g.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn inspect_json_has_params() {
    let arch = configs().join("toy4.json");
    let o = tdm(&["inspect", arch.to_str().unwrap(), "--json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v.is_object());
}

#[test]
fn eval_scores_replayed_ground_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    assert!(tdm(&["synth", "--n", "5", "--seed", "3", "--out", data.to_str().unwrap()]).status.success());
    let gt = data.join(ANNOTATIONS_FILE);
    let dets: Vec<DetectionRecord> = read_annotations(&gt)
        .unwrap()
        .iter()
        .map(|a| DetectionRecord {
            image_id: a.image_id,
            boxes: a
                .boxes
                .iter()
                .map(|b| Detection {
                    bbox: b.bbox,
                    class_id: b.class_id,
                    score: 0.9,
                })
                .collect(),
        })
        .collect();
    let dets_path = tmp.path().join("dets.json");
    write_json_lines(&dets_path, &dets).unwrap();
    let (report, csv) = (tmp.path().join("r.json"), tmp.path().join("r.csv"));
    let args = [
        "eval",
        "--dets",
        dets_path.to_str().unwrap(),
        "--gt",
        gt.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
        "--num-classes",
        "5",
    ];
    let o = tdm(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["ap"], 1.0);
    assert_eq!(r["ar100"], 1.0);
    // A second run appends a row under the same header.
    assert!(tdm(&args).status.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().next().unwrap().contains("ap"));
}

#[test]
fn missing_input_reports_io_error() {
    let o = tdm(&["inspect", "/nonexistent/arch.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_error(&o)["error"]["kind"], "io");
}

#[test]
fn malformed_config_reports_parse_error() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("bad.json");
    std::fs::write(&p, "{\n  \"name\": \"x\",\n  oops\n}\n").unwrap();
    let o = tdm(&["inspect", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr_error(&o);
    assert_eq!(e["error"]["kind"], "parse");
    assert!(e["error"]["message"].as_str().unwrap().contains("bad.json"));
}

#[test]
fn usage_errors_exit_2() {
    let o = tdm(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_error(&o)["error"]["kind"], "usage");
    assert!(tdm(&["--help"]).status.success());
}

#[test]
fn grad_check_json() {
    let o = tdm(&["grad-check", "--seeds", "1", "--json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v.to_string().contains("max_rel_err"));
}

#[test]
fn shipped_run_configs_validate() {
    use tdm_core::experiment::{AblationConfig, ExperimentConfig};
    let a = AblationConfig::load(&configs().join("ablation_desk.json")).unwrap();
    let arch = tdm_core::ArchConfig::load(&a.arch).unwrap();
    a.validate(&arch).unwrap();
    assert_eq!(a.seeds.len(), 3);
    let e = ExperimentConfig::load(&configs().join("train_toy4.json")).unwrap();
    e.validate(&arch).unwrap();
}

#[test]
fn train_then_eval_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for (name, n, seed) in [("train", "4", "1"), ("val", "2", "900")] {
        let out = d.join(name);
        assert!(tdm(&["synth", "--n", n, "--seed", seed, "--out", out.to_str().unwrap()]).status.success());
    }
    let stage = |k: usize| serde_json::json!({ "pair_index": k, "iterations": 3, "lr": 0.001 });
    let cfg = serde_json::json!({
        "arch": configs().join("toy4.json"),
        "variant": "tdm",
        "stages": [stage(0), stage(1)],
        "seed": 0,
        "train_data": "train",
        "val_data": "val",
        "output_dir": "run",
        "init": "scratch",
    });
    let cfg_path = d.join("cfg.json");
    std::fs::write(&cfg_path, cfg.to_string()).unwrap();
    let o = tdm(&["train", "--config", cfg_path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = d.join("run");
    for f in ["manifest.json", "loss.csv", "tdm_stage1.ckpt", "report_stage1.json"] {
        assert!(run.join(f).exists(), "{}", f);
    }
    let (dets, report) = (d.join("dets.json"), d.join("r.json"));
    let o = tdm(&[
        "eval",
        "--checkpoint",
        run.join("tdm_stage1.ckpt").to_str().unwrap(),
        "--data",
        d.join("val").to_str().unwrap(),
        "--dets",
        dets.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    let b: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("report_stage1.json")).unwrap()).unwrap();
    assert_eq!(a, b);
}
