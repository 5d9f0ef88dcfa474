mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use common::tiny_config;

fn intent(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_intent")).args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_train_adapt_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(&dir.path().join("data"));
    let cfg_path = dir.path().join("config.json");
    fs::write(&cfg_path, cfg.to_json()).unwrap();

    let (code, err) = intent(&["gen-data", "--config", p(&cfg_path)]);
    assert_eq!(code, 0, "{err}");
    assert!(dir.path().join("data/domains.json").exists());

    let ckpt = dir.path().join("ckpt");
    let (code, err) = intent(&["train", "--config", p(&cfg_path), "--out", p(&ckpt), "--epochs", "1"]);
    assert_eq!(code, 0, "{err}");
    let history = fs::read_to_string(ckpt.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 2, "--epochs overrides the file");

    let image = dir.path().join("data/bright/img_100.pgm");
    let mask = dir.path().join("data/bright/msk_100.pgm");
    let out = dir.path().join("adapted");
    let args = [
        "adapt", "--ckpt", p(&ckpt), "--image", p(&image), "--mask", p(&mask), "--strategy", "ent_norm", "--c",
        "0.25", "--rho", "0.1", "--out", p(&out),
    ];
    let (code, err) = intent(&args);
    assert_eq!(code, 0, "{err}");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["strategy"], "ENT_NORM");
    assert_eq!(report["lambdas"].as_array().unwrap().len(), 5);
    let w: f64 = report["weights"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
    assert!((w - 1.0).abs() < 1e-6);
    assert!(report["dice"].as_f64().is_some());
    assert!(out.join("prediction.pgm").exists() && out.join("segmentation.pgm").exists());
}

#[test]
fn sweep_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(&dir.path().join("data"));
    let cfg_path = dir.path().join("config.json");
    fs::write(&cfg_path, cfg.to_json()).unwrap();
    let out = dir.path().join("out");
    let args = [
        "sweep", "--config", p(&cfg_path), "--out", p(&out), "--trials", "1", "--target", "soft", "--strategy",
        "AVERAGE", "--c", "0.5", "--epochs", "1",
    ];
    let (code, err) = intent(&args);
    assert_eq!(code, 0, "{err}");
    let text = fs::read_to_string(out.join("results.csv")).unwrap();
    // header + 3 members + 1 strategy + Tent
    assert_eq!(text.lines().count(), 1 + 3 + 1 + 1);
    assert!(text.lines().skip(1).all(|l| l.contains(",src,soft,0,")));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"source": "a", "targets": ["a"]}"#).unwrap();
    let out = dir.path().join("out");
    assert_eq!(intent(&["sweep", "--config", p(&bad), "--out", p(&out)]).0, 2);
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(intent(&["sweep", "--config", p(&bad), "--out", p(&out)]).0, 2);
    let missing_cfg = dir.path().join("absent.json");
    assert_eq!(intent(&["train", "--config", p(&missing_cfg), "--out", p(&out)]).0, 2);
    assert_eq!(intent(&["bogus"]).0, 2);

    // A valid config whose dataset is absent.
    let mut cfg = tiny_config(&dir.path().join("no_data"));
    cfg.dataset = None;
    let cfg_path = dir.path().join("config.json");
    fs::write(&cfg_path, cfg.to_json()).unwrap();
    let (code, err) = intent(&["train", "--config", p(&cfg_path), "--out", p(&out)]);
    assert_eq!(code, 3);
    assert!(err.contains("no_data"), "{err}");

    let ckpt = dir.path().join("no_ckpt");
    let img = dir.path().join("img.pgm");
    let args = ["adapt", "--ckpt", p(&ckpt), "--image", p(&img), "--out", p(&out)];
    let (code, err) = intent(&args);
    assert_eq!(code, 3);
    assert!(err.contains("no_ckpt"), "{err}");
    let args = ["adapt", "--ckpt", p(&ckpt), "--image", p(&img), "--out", p(&out), "--strategy", "MEDIAN"];
    assert_eq!(intent(&args).0, 2);
    let args = ["adapt", "--ckpt", p(&ckpt), "--image", p(&img), "--out", p(&out), "--c", "0"];
    assert_eq!(intent(&args).0, 2);
}
