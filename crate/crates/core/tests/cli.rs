use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_anchorfree"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn anchorfree")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const TINY: &str = r#"{
  "pyramid": {"input_size": 32, "num_levels": 3, "strides": [4, 8, 16],
              "channels": [6, 6, 6], "cem_channels": 6, "head_channels": 6},
  "train": {"epochs": 2, "batch_size": 4, "train_samples": 8, "val_samples": 4},
  "synth": {"image_size": 32, "min_radius": 3.0, "max_radius": 8.0}
}"#;

fn setup(dir: &Path) -> (String, String) {
    let cfg = dir.join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    let data = dir.join("data");
    let ann = ok(&["synth", "--config", cfg.to_str().unwrap(), "--count", "6", "--out", data.to_str().unwrap()]);
    (cfg.display().to_string(), ann.trim().to_string())
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, ann) = setup(dir.path());
    assert!(Path::new(&ann).exists());
    assert_eq!(fs::read_to_string(&ann).unwrap().lines().count(), 6);

    let ckpt = dir.path().join("m.ckpt");
    ok(&["train", "--config", &cfg, "--out", ckpt.to_str().unwrap(), "--data", &ann]);
    let bytes = fs::read(&ckpt).unwrap();
    assert_eq!(&bytes[..8], b"ANCHFREE");

    let dump = ok(&["predict", "--checkpoint", ckpt.to_str().unwrap(), "--data", &ann, "--score-thresh", "0.05"]);
    let lines: Vec<serde_json::Value> = dump.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 6);
    for l in &lines {
        assert!(l["image"].is_string());
        for d in l["detections"].as_array().unwrap() {
            let b = d["box"].as_array().unwrap();
            assert_eq!(b.len(), 4);
            assert!(d["score"].as_f64().unwrap() >= 0.05);
        }
    }

    let none = ok(&["predict", "--checkpoint", ckpt.to_str().unwrap(), "--data", &ann, "--score-thresh", "1.0"]);
    for l in none.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert!(v["detections"].as_array().unwrap().is_empty());
    }

    let report: serde_json::Value =
        serde_json::from_str(&ok(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", &ann, "--score-thresh", "0.3"])).unwrap();
    let total_gt: usize = fs::read_to_string(&ann)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["boxes"].as_array().unwrap().len())
        .sum();
    let counts = &report["counts"];
    assert_eq!(counts["tp"].as_u64().unwrap() + counts["fn"].as_u64().unwrap(), total_gt as u64);

    let dump_path = dir.path().join("dets.jsonl");
    fs::write(&dump_path, &dump).unwrap();
    let from_dump: serde_json::Value = serde_json::from_str(&ok(&[
        "eval", "--detections", dump_path.to_str().unwrap(), "--data", &ann, "--score-thresh", "0.3",
    ]))
    .unwrap();
    assert_eq!(from_dump, report);

    let csv = ok(&["prcurve", "--checkpoint", ckpt.to_str().unwrap(), "--data", &ann]);
    let mut rows = csv.lines();
    assert_eq!(rows.next(), Some("threshold,precision,recall,f1,f2"));
    let first = rows.next().unwrap();
    assert_eq!(first.split(',').count(), 5);
    assert!(first.split(',').all(|f| f.split('.').nth(1).map_or(false, |d| d.len() == 6)));
}

#[test]
fn train_is_reproducible_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = setup(dir.path());
    let path = |n: &str| dir.path().join(n).display().to_string();
    ok(&["train", "--config", &cfg, "--seed", "5", "--out", &path("a.ckpt")]);
    ok(&["train", "--config", &cfg, "--seed", "5", "--out", &path("b.ckpt")]);
    assert_eq!(fs::read(path("a.ckpt")).unwrap(), fs::read(path("b.ckpt")).unwrap());

    ok(&["train", "--config", &cfg, "--seed", "5", "--epochs", "1", "--out", &path("half.ckpt")]);
    ok(&["train", "--resume", &path("half.ckpt"), "--epochs", "2", "--out", &path("resumed.ckpt")]);
    assert_eq!(fs::read(path("a.ckpt")).unwrap(), fs::read(path("resumed.ckpt")).unwrap());
}

#[test]
fn assign_dump_worked_example() {
    let out = ok(&["assign-dump", "--box", "16,16,48,48"]);
    let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    let levels = v["assignment"]["levels"].as_array().unwrap();
    let count = |l: usize, label: &str| levels[l]["labels"].as_array().unwrap().iter().filter(|x| *x == label).count();
    assert_eq!(count(1, "positive"), 9);
    assert_eq!(count(1, "ignored"), 16);
    assert_eq!(count(2, "ignored"), 1);
}

#[test]
fn gradcheck_passes_on_small_network() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = setup(dir.path());
    let v: serde_json::Value = serde_json::from_str(ok(&["gradcheck", "--config", &cfg]).trim()).unwrap();
    assert_eq!(v["pass"], true);
    assert_eq!(v["checked"], 20);
}

#[test]
fn failures_exit_nonzero_with_one_line() {
    for args in [
        vec!["eval", "--checkpoint", "/nonexistent.ckpt", "--data", "/nonexistent.jsonl"],
        vec!["assign-dump", "--box", "10,10,5,5"],
        vec!["train", "--config", "/nonexistent.json", "--out", "/tmp/x.ckpt"],
    ] {
        let out = run(&args);
        assert!(!out.status.success(), "{args:?}");
        let err = String::from_utf8(out.stderr).unwrap();
        let lines: Vec<&str> = err.lines().collect();
        assert_eq!(lines.len(), 1, "{err}");
        assert!(lines[0].starts_with("error["), "{err}");
    }

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, b"ANCHFREE\x01\x00").unwrap();
    let ann = dir.path().join("a.jsonl");
    fs::write(&ann, "").unwrap();
    let out = run(&["predict", "--checkpoint", bad.to_str().unwrap(), "--data", ann.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[checkpoint]"));
}

#[test]
fn predict_rejects_wrong_image_size() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = setup(dir.path());
    let ckpt = dir.path().join("m.ckpt").display().to_string();
    ok(&["train", "--config", &cfg, "--epochs", "1", "--out", &ckpt]);
    let img = dir.path().join("big.ppm");
    let mut bytes = b"P6\n40 40\n255\n".to_vec();
    bytes.resize(bytes.len() + 40 * 40 * 3, 128);
    fs::write(&img, bytes).unwrap();
    let out = run(&["predict", "--checkpoint", &ckpt, img.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[shape]"));
}
