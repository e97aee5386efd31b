use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_plab");

fn plab(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("PLAB_OUT").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"
preset = "full"
seed = 3
batch_size = 4
eval_every = 2

[model]
d_model = 16
n_layers = 1
n_heads = 2
d_ff = 32
d_vision = 16
vision_ff = 32
vision_heads = 2
d_aux = 8

[data]
describe_pool = 12
spatial_pool = 12
held_out = 8

[stage1]
steps = 2

[stage2]
steps = 3

[stage3]
steps = 3
"#;

#[test]
fn bad_grid_size_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = plab(&["gen-data", "--grid-n", "5", "--count", "3", "--out", path(dir.path())]);
    assert_eq!(code(&o), 1);
    assert!(fs::read_dir(dir.path()).unwrap().next().is_none());
    assert_eq!(code(&plab(&["gen-data", "--count", "0", "--out", path(dir.path())])), 1);
    assert_eq!(code(&plab(&["frobnicate"])), 1);
    assert_eq!(code(&plab(&["--help"])), 0);
}

#[test]
fn gen_data_is_byte_identical_for_equal_flags() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for (dir, workers) in [(&a, "1"), (&b, "3")] {
        let o = plab(&[
            "gen-data", "--count", "20", "--seed", "7", "--split", "held-out", "--kinds", "describe,distance",
            "--workers", workers, "--out", path(dir.path()),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("distance: 10"));
    }
    let read = |d: &Path| fs::read(d.join("held-out.jsonl")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    assert_eq!(String::from_utf8(read(a.path())).unwrap().lines().count(), 20);
}

#[test]
fn missing_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = plab(&["eval", "--checkpoint", path(&dir.path().join("none.ckpt")), "--data", "nowhere.jsonl"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "preset = \"full\"\nlearning_rate = 3\n").unwrap();
    assert_eq!(code(&plab(&["train", "--config", path(&cfg), "--out", path(dir.path())])), 1);
    fs::write(&cfg, "[model]\nd_model = 15\nn_heads = 2\n").unwrap();
    assert_eq!(code(&plab(&["train", "--config", path(&cfg), "--out", path(dir.path())])), 1);
}

#[test]
fn train_resume_eval_and_probe() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("run.toml");
    fs::write(&cfg, TINY).unwrap();

    let whole = root.join("whole");
    let o = plab(&["train", "--config", path(&cfg), "--out", path(&whole)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.toml", "metrics.jsonl", "stage1.ckpt", "stage2.ckpt", "stage3.ckpt"] {
        assert!(whole.join(f).exists(), "{f}");
    }

    // Two short invocations land on the same weights as one long one.
    let split = root.join("split");
    let o = plab(&["train", "--config", path(&cfg), "--max-steps", "4", "--out", path(&split)]);
    assert_eq!(code(&o), 0);
    assert!(split.join("latest.ckpt").exists() && !split.join("stage3.ckpt").exists());
    let o = plab(&[
        "train", "--config", path(&cfg), "--resume", path(&split.join("latest.ckpt")), "--out", path(&split),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read(whole.join("stage3.ckpt")).unwrap(),
        fs::read(split.join("stage3.ckpt")).unwrap()
    );

    let other_seed = root.join("other.toml");
    fs::write(&other_seed, TINY.replace("seed = 3", "seed = 4")).unwrap();
    let o = plab(&[
        "train", "--config", path(&other_seed), "--resume", path(&split.join("latest.ckpt")), "--out", path(&split),
    ]);
    assert_ne!(code(&o), 0);

    let data = root.join("data");
    let o = plab(&["gen-data", "--count", "8", "--split", "held-out", "--seed", "2", "--out", path(&data)]);
    assert_eq!(code(&o), 0);
    let held = data.join("held-out.jsonl");
    let ck = whole.join("stage3.ckpt");
    let o = plab(&["eval", "--checkpoint", path(&ck), "--data", path(&held), "--out", path(root)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let eval: serde_json::Value = serde_json::from_slice(&fs::read(root.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["samples"], 8);
    assert!(eval["ntp"].as_f64().unwrap().is_finite());
    assert_eq!(eval["accuracy"].as_object().unwrap().len(), 4);

    let probe = root.join("probe");
    let o = plab(&[
        "probe", "--checkpoint", path(&ck), "--scene", "11", "--k", "3", "--data", path(&held), "--report",
        path(&whole.join("stage2.ckpt")), "--out", path(&probe),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stem = format!("probe_{:016x}", 11);
    let map: serde_json::Value = serde_json::from_slice(&fs::read(probe.join(format!("{stem}.json"))).unwrap()).unwrap();
    assert_eq!(map["patches"].as_array().unwrap().len(), 16);
    assert_eq!(map["patches"][0]["top"].as_array().unwrap().len(), 3);
    assert!(probe.join(format!("{stem}.ppm")).exists());
    assert!(probe.join("patch_accuracy.json").exists());
    let md = fs::read_to_string(probe.join("token_loss.md")).unwrap();
    assert!(md.contains("whole/stage3") && md.contains("whole/stage2"));

    let o = plab(&["probe", "--checkpoint", path(&ck), "--out", path(&probe)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn out_dir_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(BIN)
        .args(["gen-data", "--count", "2"])
        .env("PLAB_OUT", dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("train.jsonl").exists());
}
