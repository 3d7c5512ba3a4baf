use std::fs;
use std::path::Path;

use assert_cmd::Command;
use ctxlate::networks::{DiscriminatorSpec, GeneratorSpec};
use ctxlate::preprocess::CropSpec;
use ctxlate::trainer::{read_log, TrainConfig};
use ctxlate::volume::load_volume;
use tempfile::TempDir;

fn ctxlate() -> Command {
    let mut cmd = Command::cargo_bin("ctxlate").unwrap();
    cmd.env_remove("CTXLATE_SEED").env("RUST_LOG", "warn");
    cmd
}

fn make_dataset(dir: &Path, seed: u64) {
    ctxlate()
        .args(["phantom", "--patients", "2", "--slices", "3", "--canvas", "72x88", "--seed"])
        .arg(seed.to_string())
        .arg("--out")
        .arg(dir)
        .assert()
        .success();
}

fn tiny_config(path: &Path, out: &Path) {
    let mut d = DiscriminatorSpec::default();
    for l in d.layers.iter_mut() {
        l.out_channels = l.out_channels.min(2);
    }
    let cfg = TrainConfig {
        epochs_constant: 2,
        epochs_decay: 2,
        crop: CropSpec::new(16, 16, 2).unwrap(),
        generator: GeneratorSpec {
            stem_channels: 2,
            down_channels: vec![2, 2, 2],
            residual_blocks: 1,
            noise_after_block: 0,
            ..GeneratorSpec::default()
        },
        discriminator: d,
        checkpoint_every: 1,
        out_dir: out.to_path_buf(),
        ..TrainConfig::default()
    };
    fs::write(path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn phantom_writes_volumes_and_manifest() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    make_dataset(&data, 7);
    let names: Vec<String> = dir_bytes(&data).into_iter().map(|(n, _)| n).collect();
    assert_eq!(names.iter().filter(|n| n.ends_with(".raw")).count(), 4);
    assert!(names.contains(&"manifest.json".to_string()));
}

#[test]
fn phantom_is_deterministic_and_reads_seed_from_env() {
    let tmp = TempDir::new().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    make_dataset(&a, 7);
    make_dataset(&b, 7);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    ctxlate()
        .env("CTXLATE_SEED", "7")
        .args(["phantom", "--patients", "2", "--slices", "3", "--canvas", "72x88", "--out"])
        .arg(&c)
        .assert()
        .success();
    assert_eq!(dir_bytes(&a), dir_bytes(&c));
}

#[test]
fn missing_out_is_a_usage_error() {
    ctxlate().args(["phantom", "--patients", "2"]).assert().code(2);
    ctxlate().args(["phantom", "--patients", "0", "--out", "x"]).assert().code(2);
}

#[test]
fn preprocess_crops_and_clips() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    make_dataset(&data, 1);
    let out = tmp.path().join("pre");
    ctxlate()
        .args(["preprocess", "--crop", "32x40", "--input"])
        .arg(data.join("P000_cbct"))
        .arg("--output")
        .arg(&out)
        .assert()
        .success();
    let vol = load_volume(&out).unwrap();
    assert_eq!(vol.dims(), [32, 40, 3]);
    assert!(vol.voxels().iter().all(|&v| (-500..=200).contains(&v)));
}

#[test]
fn train_resume_translate_evaluate() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    make_dataset(&data, 3);
    let run = tmp.path().join("run");
    let cfg = tmp.path().join("cfg.json");
    tiny_config(&cfg, &run);

    ctxlate()
        .args(["train", "--epochs", "1", "--config"])
        .arg(&cfg)
        .arg("--manifest")
        .arg(&data)
        .assert()
        .success();
    let ckpt1 = run.join("checkpoint_epoch001.ckpt");
    assert!(ckpt1.is_file());
    assert_eq!(read_log(run.join("train_log.csv")).unwrap().len(), 6);

    ctxlate()
        .args(["train", "--epochs", "2", "--config"])
        .arg(&cfg)
        .arg("--manifest")
        .arg(&data)
        .arg("--resume")
        .arg(&ckpt1)
        .assert()
        .success();
    let ckpt2 = run.join("checkpoint_epoch002.ckpt");
    assert!(ckpt2.is_file());
    let log = read_log(run.join("train_log.csv")).unwrap();
    assert_eq!(log.len(), 12);
    assert_eq!(log[11][0], 12.0);
    assert_eq!(log[11][1], 1.0);

    let syn = tmp.path().join("syn").join("P000_synplanct");
    ctxlate()
        .args(["translate", "--cycle", "--checkpoint"])
        .arg(&ckpt2)
        .arg("--input")
        .arg(data.join("P000_cbct"))
        .arg("--output")
        .arg(&syn)
        .assert()
        .success();
    let out = load_volume(&syn).unwrap();
    assert_eq!(out.dims(), [72, 88, 3]);
    assert_eq!(out.modality, ctxlate::volume::Modality::SynPlanCt);
    assert!(load_volume(tmp.path().join("syn/P000_synplanct_cycle")).is_ok());
    assert!(tmp.path().join("syn/P000_synplanct_cycle_difference.png").is_file());
    assert!(tmp.path().join("syn/P000_synplanct_cycle_difference.csv").is_file());

    let eval = tmp.path().join("eval");
    let assert = ctxlate()
        .args(["evaluate", "--format", "json", "--patients", "P000,P001", "--manifest"])
        .arg(&data)
        .arg("--checkpoint")
        .arg(&ckpt2)
        .arg("--out")
        .arg(&eval)
        .assert()
        .success();
    let stdout = String::from_utf8(assert.get_output().stdout.clone()).unwrap();
    for role in ["truth", "cbct", "synplanct"] {
        assert!(stdout.lines().any(|l| l.starts_with(&format!("{role}\tmuscle"))), "{stdout}");
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["cycle_difference"].as_array().unwrap().len(), 2);
    assert!(!eval.join("rois.csv").exists());

    let eval_csv = tmp.path().join("eval_csv");
    ctxlate()
        .args(["evaluate", "--format", "csv", "--no-plots", "--manifest"])
        .arg(&data)
        .arg("--synplanct")
        .arg(tmp.path().join("syn"))
        .arg("--patients")
        .arg("P000")
        .arg("--out")
        .arg(&eval_csv)
        .assert()
        .success();
    let rows = fs::read_to_string(eval_csv.join("rois.csv")).unwrap();
    assert!(rows.lines().any(|l| l.contains("synplanct")));
    assert!(!eval_csv.join("report.json").exists());
}

#[test]
fn negative_lambda_fails_before_training() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    make_dataset(&data, 2);
    let run = tmp.path().join("run");
    let cfg = tmp.path().join("cfg.json");
    tiny_config(&cfg, &run);
    ctxlate()
        .args(["train", "--set", "weights.lambda_air=-1", "--config"])
        .arg(&cfg)
        .arg("--manifest")
        .arg(&data)
        .assert()
        .code(2)
        .stderr(predicates::str::contains("lambda_air"));
    assert!(!run.exists());
}

#[test]
fn corrupt_checkpoint_names_the_file() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    make_dataset(&data, 2);
    let bad = tmp.path().join("broken.ckpt");
    fs::write(&bad, b"CTXLCKPT garbage").unwrap();
    ctxlate()
        .args(["translate", "--checkpoint"])
        .arg(&bad)
        .arg("--input")
        .arg(data.join("P000_cbct"))
        .arg("--output")
        .arg(tmp.path().join("o"))
        .assert()
        .code(1)
        .stderr(predicates::str::contains("broken.ckpt"));
}

#[test]
fn missing_manifest_lists_expected_path() {
    let tmp = TempDir::new().unwrap();
    ctxlate()
        .args(["evaluate", "--manifest"])
        .arg(tmp.path())
        .arg("--out")
        .arg(tmp.path().join("e"))
        .assert()
        .code(1)
        .stderr(predicates::str::contains(tmp.path().join("manifest.json").display().to_string()));
}
