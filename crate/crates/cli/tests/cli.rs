use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mapgan::data::synthetic::{synthetic_images, write_synthetic_corpus};
use mapgan::train::{read_manifest, TrainConfig};
use mapgan::gan::GanLoss;

fn mapgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mapgan"))
        .args(args)
        .env_remove("MAPGAN_SEED")
        .output()
        .expect("binary runs")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small-model flags for 32×32 pairs.
const TINY: &[&str] = &[
    "--resize-to",
    "32",
    "--generator-depth",
    "5",
    "--generator-channels",
    "4",
    "--discriminator-channels",
    "4",
];

fn corpus(root: &Path, count: usize) {
    write_synthetic_corpus(root.join("train"), count, 32, 100).unwrap();
}

fn train_tiny(root: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data-dir", s(root), "--out", s(out), "--epochs", "1", "--batch-size", "2"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    mapgan(&args)
}

fn trained_checkpoint(dir: &Path) -> PathBuf {
    let root = dir.join("data");
    let out = dir.join("run");
    corpus(&root, 4);
    let o = train_tiny(&root, &out, &[]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    out.join("checkpoints/ckpt_1.bin")
}

fn write_satellites(dir: &Path, names: &[&str], size: u32) {
    fs::create_dir_all(dir).unwrap();
    for (i, name) in names.iter().enumerate() {
        synthetic_images(size, i as u64).0.save(dir.join(name)).unwrap();
    }
}

#[test]
fn zero_batch_size_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path(), 2);
    let o = mapgan(&["train", "--data-dir", s(dir.path()), "--batch-size", "0"]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o.stderr));
    assert!(text(&o.stderr).contains("batch"));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["train"],
        vec!["train", "--data-dir", "x", "--no-such-flag"],
        vec!["train", "--data-dir", "x", "--gan-loss", "wasserstein"],
        vec!["train", "--data-dir", s(dir.path())],
        vec!["gradcheck", "--op", "softmax"],
        vec!["frobnicate"],
    ] {
        let o = mapgan(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", text(&o.stderr));
    }
}

#[test]
fn flag_defaults_match_train_config() {
    let o = mapgan(&["train", "--data-dir", "corpus", "--dump-config"]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let dumped: TrainConfig = serde_json::from_str(&text(&o.stdout)).unwrap();
    let expected = TrainConfig {
        data_root: "corpus".into(),
        ..TrainConfig::default()
    };
    assert_eq!(dumped, expected);
}

#[test]
fn seed_falls_back_to_environment() {
    let run = |env: Option<&str>, flag: Option<&str>| -> u64 {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_mapgan"));
        cmd.args(["train", "--data-dir", "corpus", "--dump-config"]).env_remove("MAPGAN_SEED");
        if let Some(v) = env {
            cmd.env("MAPGAN_SEED", v);
        }
        if let Some(v) = flag {
            cmd.args(["--seed", v]);
        }
        let o = cmd.output().unwrap();
        serde_json::from_slice::<TrainConfig>(&o.stdout).unwrap().seed
    };
    assert_eq!(run(None, None), 0);
    assert_eq!(run(Some("41"), None), 41);
    assert_eq!(run(Some("41"), Some("7")), 7);
}

#[test]
fn training_flags_reach_the_checkpoint_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let out = dir.path().join("run");
    corpus(&root, 5);
    let o = train_tiny(&root, &out, &["--gan-loss", "saturating", "--l1-weight", "100", "--seed", "7"]);
    assert!(o.status.success(), "{}", text(&o.stderr));

    let m = read_manifest(out.join("checkpoints/ckpt_1.bin")).unwrap();
    assert_eq!(m.config.gan_loss, GanLoss::Saturating);
    assert_eq!(m.config.l1_weight, 100.0);
    assert_eq!(m.config.seed, 7);
    // 5 pairs at batch 2
    assert_eq!(m.step, 3);
    assert_eq!(fs::read_to_string(out.join("metrics.log")).unwrap().lines().count(), 3);
}

#[test]
fn resumed_training_continues_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained_checkpoint(dir.path());
    let o = mapgan(&[
        "train",
        "--data-dir",
        s(&dir.path().join("data")),
        "--out",
        s(&dir.path().join("run")),
        "--checkpoint",
        s(&ckpt),
    ]);
    // the stored run had one epoch, so nothing remains to do
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert!(text(&o.stdout).contains("trained 2 steps"));
}

#[test]
fn inference_is_deterministic_and_mirrors_names() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained_checkpoint(dir.path());
    let inputs = dir.path().join("sat");
    write_satellites(&inputs, &["a.png", "b.png", "c.jpg"], 32);

    let out1 = dir.path().join("maps1");
    let out2 = dir.path().join("maps2");
    for out in [&out1, &out2] {
        let o = mapgan(&["infer", "--checkpoint", s(&ckpt), "--input", s(&inputs), "--out", s(out)]);
        assert!(o.status.success(), "{}", text(&o.stderr));
    }
    let mut names: Vec<String> = fs::read_dir(&out1)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["a.png", "b.png", "c.png"]);
    for n in &names {
        assert_eq!(fs::read(out1.join(n)).unwrap(), fs::read(out2.join(n)).unwrap());
        let img = image::open(out1.join(n)).unwrap();
        assert_eq!((img.width(), img.height()), (32, 32));
    }

    let single = dir.path().join("single");
    let o = mapgan(&["infer", "--checkpoint", s(&ckpt), "--input", s(&inputs.join("b.png")), "--out", s(&single)]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert_eq!(fs::read(single.join("b.png")).unwrap(), fs::read(out1.join("b.png")).unwrap());
}

#[test]
fn stochastic_inference_depends_on_seed() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained_checkpoint(dir.path());
    let inputs = dir.path().join("sat");
    write_satellites(&inputs, &["a.png"], 32);
    let run = |seed: &str, out: &str| {
        let out = dir.path().join(out);
        let o = mapgan(&[
            "infer",
            "--checkpoint",
            s(&ckpt),
            "--input",
            s(&inputs),
            "--out",
            s(&out),
            "--stochastic-infer",
            "--seed",
            seed,
        ]);
        assert!(o.status.success(), "{}", text(&o.stderr));
        fs::read(out.join("a.png")).unwrap()
    };
    assert_eq!(run("1", "x"), run("1", "y"));
    assert_ne!(run("1", "x"), run("2", "z"));
}

#[test]
fn wrong_resolution_names_expected_size() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained_checkpoint(dir.path());
    let inputs = dir.path().join("sat");
    write_satellites(&inputs, &["big.png"], 64);
    let o = mapgan(&["infer", "--checkpoint", s(&ckpt), "--input", s(&inputs), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("expects 32x32"), "{}", text(&o.stderr));
}

#[test]
fn inspect_lists_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained_checkpoint(dir.path());
    let o = mapgan(&["inspect", "--checkpoint", s(&ckpt)]);
    assert!(o.status.success());
    let out = text(&o.stdout);
    assert!(out.contains("step 2"));
    assert!(out.contains("G.enc3.conv.kernel"));
    assert!(out.contains("D_opt.v.head.bias"));

    let o = mapgan(&["inspect", "--checkpoint", s(&ckpt), "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["step"], 2);

    let o = mapgan(&["inspect", "--checkpoint", s(&dir.path().join("missing.bin"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_filters_by_op() {
    let o = mapgan(&["gradcheck", "--op", "conv2d"]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let out = text(&o.stdout);
    let rows: Vec<&str> = out.lines().skip(1).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("conv2d") && rows[0].ends_with("PASS"));
}

#[test]
fn gradcheck_default_run_passes() {
    let o = mapgan(&["gradcheck"]);
    assert!(o.status.success(), "{}", text(&o.stdout));
    let out = text(&o.stdout);
    let rows: Vec<&str> = out.lines().skip(1).collect();
    assert_eq!(rows.len(), 23);
    assert!(rows.iter().all(|r| r.ends_with("PASS")));
}
