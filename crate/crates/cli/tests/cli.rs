use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_handcontact"));
    c.env_remove("HANDCONTACT_LOG");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gradcheck_default_passes() {
    let o = run(&["gradcheck", "--trials", "2"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("0 above tolerance"));
}

#[test]
fn gradcheck_tiny_tolerance_fails() {
    let o = run(&["gradcheck", "--trials", "2", "--tolerance", "1e-14"]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("FAIL "));
}

#[test]
fn gradcheck_module_filter() {
    let o = run(&["gradcheck", "--module", "contact_loss", "--trials", "1"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.contains("contact_loss"));
    assert!(!out.contains("cross_attend"));
    let bad = run(&["gradcheck", "--module", "nonsense"]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn gen_train_infer_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let feats = dir.path().join("f.jsonl");
    let ann = dir.path().join("a.jsonl");
    let ckpt = dir.path().join("m.ckpt");
    let trace = dir.path().join("trace.jsonl");
    let dets = dir.path().join("d.jsonl");

    let o = run(&["gen", "--samples", "60", "--out", s(&feats), "--annotations", s(&ann)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("# effective config"));

    let o = run(&[
        "train", "--features", s(&feats), "--checkpoint", s(&ckpt), "--trace", s(&trace),
        "--max-steps", "30", "--eval-every", "10", "--fc-width", "16", "--maps", "2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(&trace).unwrap().lines().count(), 30);

    let o = run(&["infer", "--checkpoint", s(&ckpt), "--features", s(&feats), "--out", s(&dets)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(&dets).unwrap().lines().count(), 60);

    let fc_only = dir.path().join("fc_only.jsonl");
    let o = run(&["infer", "--checkpoint", s(&ckpt), "--features", s(&feats), "--out", s(&fc_only), "--ablate-spatial"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_ne!(std::fs::read_to_string(&fc_only).unwrap(), std::fs::read_to_string(&dets).unwrap());

    let o = run(&["eval", "--annotations", s(&ann), "--detections", s(&dets)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("mAP "));
}

#[test]
fn ablated_training_writes_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let o = run(&[
        "train", "--checkpoint", s(&ckpt), "--samples", "30", "--max-steps", "10",
        "--fc-width", "8", "--ablate-cross", "--ablate-spatial",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(ckpt.exists());
}

#[test]
fn empty_feature_file_gives_empty_output() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let o = run(&["train", "--checkpoint", s(&ckpt), "--samples", "10", "--max-steps", "2", "--fc-width", "8"]);
    assert_eq!(code(&o), 0);
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let out = dir.path().join("d.jsonl");
    let o = run(&["infer", "--checkpoint", s(&ckpt), "--features", s(&empty), "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read_to_string(&out).unwrap(), "");
}

#[test]
fn eval_reports_fixture_ap() {
    let dir = fixtures().join("ap/half");
    let o = run(&[
        "eval",
        "--annotations", s(&dir.join("annotations.jsonl")),
        "--detections", s(&dir.join("detections.jsonl")),
    ]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("AP  50.0000"), "{}", stdout(&o));
}

#[test]
fn stats_tallies_fixture() {
    let o = run(&["stats", "--annotations", s(&fixtures().join("stats/one_image.jsonl"))]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.contains("hands 3 (2 pass the size filter)"), "{out}");
    let row = |name: &str| -> Vec<String> {
        out.lines()
            .find(|l| l.starts_with(name))
            .unwrap()
            .split_whitespace()
            .skip(1)
            .map(str::to_string)
            .collect()
    };
    assert_eq!(row("no_contact"), ["1", "2", "0"]);
    assert_eq!(row("self"), ["1", "2", "0"]);
    assert_eq!(row("other"), ["1", "1", "1"]);
    assert_eq!(row("object"), ["1", "1", "1"]);
}

fn person(id: u64, wrist_joint: usize, wrist: (f64, f64), offset: f64) -> serde_json::Value {
    let joints: Vec<[f64; 3]> = (0..25)
        .map(|j| {
            if j == wrist_joint {
                [wrist.0, wrist.1, 0.9]
            } else {
                [offset + 3.0 * j as f64, 5.0 + 4.0 * j as f64, 0.8]
            }
        })
        .collect();
    serde_json::json!({ "person_id": id, "joints": joints })
}

#[test]
fn baseline_dump_has_all_columns() {
    let dir = tempfile::tempdir().unwrap();
    let kp = dir.path().join("kp.jsonl");
    let poses = serde_json::json!({
        "image_id": "s",
        "poses": [person(0, 4, (30.0, 35.0), 20.0), person(1, 7, (100.0, 45.0), 90.0)],
    });
    std::fs::write(&kp, format!("{poses}\n")).unwrap();
    let dump = dir.path().join("dump.csv");
    let dets = dir.path().join("dets.jsonl");
    let o = run(&[
        "baseline",
        "--annotations", s(&fixtures().join("stats/one_image.jsonl")),
        "--keypoints", s(&kp),
        "--dump", s(&dump),
        "--detections", s(&dets),
        "--epochs", "50",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&dump).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap().split(',').count(), 54);
    let rows: Vec<&str> = lines.collect();
    assert!(!rows.is_empty());
    for r in rows {
        assert_eq!(r.split(',').count(), 54);
    }
    assert!(!std::fs::read_to_string(&dets).unwrap().is_empty());
}

#[test]
fn malformed_input_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"image_id\": 3}\n").unwrap();
    let o = run(&["stats", "--annotations", s(&bad)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.jsonl:1"));

    let o = run(&["eval", "--annotations", s(&bad), "--detections", s(&bad)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn config_file_overrides_and_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[synth]\nsamples = 7\n").unwrap();
    let out = dir.path().join("f.jsonl");
    let o = run(&["--config", s(&cfg), "gen", "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("# samples = 7"));
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 7);

    std::fs::write(&cfg, "[synth]\nbogus = 1\n").unwrap();
    let o = run(&["--config", s(&cfg), "gen", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn divergent_training_exits_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let o = run(&["train", "--checkpoint", s(&ckpt), "--samples", "10", "--max-steps", "5", "--fc-width", "8", "--lr", "1e300"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged at step"));
}
