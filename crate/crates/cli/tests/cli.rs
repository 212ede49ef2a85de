use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn grnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grnet")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = grnet(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: [&str; 8] = ["--profile", "tiny", "--set", "model.input_size=32", "--set", "synth.image_size=32", "--threads", "1"];

#[test]
fn preset_list_names_all_rows() {
    let out = ok(&["preset-list"]);
    assert_eq!(out.lines().count(), 9);
    assert!(out.lines().next().unwrap().starts_with("1 w/o_depth:"));
    assert!(out.contains("9 grnet_mlp:"));
}

#[test]
fn synth_train_eval_predict_gate_stats() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");

    let mut args = vec!["synth", "--out", p(&data), "--set", "synth.n_samples=4"];
    args.extend(SMALL);
    ok(&args);
    for sub in ["rgb", "depth", "gt"] {
        assert_eq!(fs::read_dir(data.join(sub)).unwrap().count(), 4);
    }

    let mut args = vec!["train", "--data", p(&data), "--eval-data", p(&data), "--run-dir", p(&run), "--steps", "3", "--preset", "grnet_mlp"];
    args.extend(SMALL);
    ok(&args);
    let loss = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 4);
    assert!(loss.starts_with("step,epoch,lr_backbone,lr_other"));
    assert!(run.join("metrics.csv").exists() && run.join("metrics.txt").exists());
    let manifest = fs::read_to_string(run.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"sha256\""));

    let ckpt = run.join("checkpoint.grnet");
    let eval_dir = tmp.path().join("eval");
    let out = ok(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--run-dir", p(&eval_dir), "--maps"]);
    assert!(out.contains("data,grnet,mae,"));
    assert_eq!(fs::read_dir(eval_dir.join("maps")).unwrap().count(), 4);

    let maps = tmp.path().join("maps");
    ok(&["predict", "--checkpoint", p(&ckpt), "--input", p(&data), "--output", p(&maps)]);
    let first = fs::read_dir(&maps).unwrap().next().unwrap().unwrap().path();
    let img = image::open(first).unwrap().to_luma8();
    assert_eq!(img.dimensions(), (32, 32));

    let gates = tmp.path().join("gates.csv");
    let named = format!("syn={}", p(&data));
    let out = ok(&["gate-stats", "--checkpoint", p(&ckpt), "--dataset", &named, "--out", p(&gates)]);
    assert!(out.starts_with("dataset,n,Ga1"));
    assert!(fs::read_to_string(&gates).unwrap().contains("\nsyn,4,"));
}

#[test]
fn manifest_replays_an_ablation_bit_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let mut args = vec!["ablate", "--rows", "1,2", "--run-dir", p(&a), "--steps", "2", "--set", "synth.n_samples=2"];
    args.extend(SMALL);
    ok(&args);
    let manifest = a.join("manifest.json");
    ok(&["ablate", "--rows", "1,2", "--run-dir", p(&b), "--config", p(&manifest)]);
    let (ca, cb) = (
        fs::read_to_string(a.join("ablation.csv")).unwrap(),
        fs::read_to_string(b.join("ablation.csv")).unwrap(),
    );
    assert_eq!(ca, cb);
    assert_eq!(ca.lines().count(), 3);
}

#[test]
fn configuration_errors_exit_with_2() {
    assert_eq!(grnet(&["ablate", "--rows", "nope", "--run-dir", "/tmp/x"]).status.code(), Some(2));
    assert_eq!(grnet(&["synth", "--out", "/tmp/x", "--profile", "huge"]).status.code(), Some(2));
    let out = grnet(&["train", "--run-dir", "/tmp/x", "--set", "train.batch_size=0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch_size"));
}

#[test]
fn data_errors_exit_with_3() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    fs::create_dir_all(data.join("rgb")).unwrap();
    image::RgbImage::new(32, 32).save(data.join("rgb").join("a.png")).unwrap();
    let mut args = vec!["train", "--data", p(&data), "--run-dir", p(tmp.path()), "--steps", "2"];
    args.extend(SMALL);
    let out = grnet(&args);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("\"a\""));

    let missing = tmp.path().join("missing.grnet");
    let out = grnet(&["predict", "--checkpoint", p(&missing), "--input", p(&data), "--output", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn ungated_checkpoint_has_no_gate_stats() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let mut args = vec!["train", "--run-dir", p(&run), "--steps", "2", "--preset", "en_fpn", "--set", "synth.n_samples=2"];
    args.extend(SMALL);
    ok(&args);
    let ckpt = run.join("checkpoint.grnet");
    let gates = tmp.path().join("g.csv");
    let mut args = vec!["gate-stats", "--checkpoint", p(&ckpt), "--out", p(&gates)];
    args.extend(SMALL);
    assert_eq!(grnet(&args).status.code(), Some(2));
}
