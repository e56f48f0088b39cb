use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dvaegan_cli::write_recons;
use dvaegan_core::data::load_manifest;
use serde_json::Value;

const TOY: &str = r#"{
  "version": 1,
  "seed": 5,
  "synth": { "d_x": 48, "image_size": 16, "n_train": 12, "n_test": 4 },
  "arch": { "d_z": 6, "conv_channels": [4, 6, 6], "cog_hidden": 24, "vis_hidden": 24 },
  "train": { "epochs": [1, 1, 1], "batch_size": 4, "lr": 0.001 }
}"#;

fn dvaegan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dvaegan")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = dvaegan(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Toy {
    dir: tempfile::TempDir,
}

impl Toy {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("config.json"), TOY).unwrap();
        let t = Self { dir };
        ok(&["--config", s(&t.config()), "synth", "--out", s(&t.data())]);
        t
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn config(&self) -> PathBuf {
        self.path("config.json")
    }

    fn data(&self) -> PathBuf {
        self.path("data")
    }

    fn train(&self, out: &str, extra: &[&str]) -> String {
        let (c, d, o) = (self.config(), self.data(), self.path(out));
        let mut args = vec!["--config", s(&c), "train", "--data", s(&d), "--out", s(&o)];
        args.extend_from_slice(extra);
        ok(&args)
    }
}

/// Relative path and contents of every file under `dir`.
fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, v: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, v);
            } else {
                v.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    let mut v = Vec::new();
    walk(dir, dir, &mut v);
    v.sort();
    v
}

#[test]
fn default_synth_has_the_reference_split_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["synth", "--out", s(dir.path())]);
    assert!(out.contains("1200 train / 50 test"), "{out}");
    let ds = load_manifest(dir.path()).unwrap();
    assert_eq!((ds.train.len(), ds.test.len(), ds.d_x), (1200, 50, 2048));
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let args = |o: &str| vec!["--seed".to_string(), "3".into(), "synth".into(), "--out".into(), dir.path().join(o).display().to_string(), "--n-train".into(), "6".into(), "--n-test".into(), "2".into(), "--image-size".into(), "12".into(), "--d-x".into(), "20".into()];
    for o in ["a", "b"] {
        ok(&args(o).iter().map(|x| x.as_str()).collect::<Vec<_>>());
    }
    assert_eq!(files(&dir.path().join("a")), files(&dir.path().join("b")));
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dvaegan(&["synth", "--out", s(dir.path()), "--family", "fractals"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fractals"));

    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"version": 1, "train": {"epoch": [1, 1, 1]}}"#).unwrap();
    assert_eq!(dvaegan(&["--config", s(&cfg), "synth", "--out", s(dir.path())]).status.code(), Some(2));
    fs::write(&cfg, r#"{"version": 7}"#).unwrap();
    assert_eq!(dvaegan(&["--config", s(&cfg), "synth", "--out", s(dir.path())]).status.code(), Some(2));
    assert_eq!(dvaegan(&["train", "--data", "x"]).status.code(), Some(2), "usage errors");
    let threads = Command::new(env!("CARGO_BIN_EXE_dvaegan"))
        .args(["reconstruct", "--checkpoint", "c", "--data", "d", "--out", "o"])
        .env("DVAEGAN_THREADS", "none")
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dvaegan(&["train", "--data", s(&dir.path().join("missing")), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn full_pipeline_on_a_toy_config() {
    let t = Toy::new();
    let log = t.train("run", &[]);
    assert!(log.contains("stage 3"), "{log}");
    for n in 1..=3 {
        assert!(t.path(&format!("run/stage{n}.tar")).exists());
    }
    let jsonl = fs::read_to_string(t.path("run/train_log.jsonl")).unwrap();
    assert!(jsonl.lines().any(|l| serde_json::from_str::<Value>(l).unwrap()["stage"] == 2));

    let (ck, d) = (t.path("run/stage3.tar"), t.data());
    for out in ["rec1", "rec2"] {
        let o = t.path(out);
        let printed = ok(&["reconstruct", "--checkpoint", s(&ck), "--data", s(&d), "--out", s(&o)]);
        assert!(printed.contains("4 reconstructions"));
        assert!(!printed.contains("e_vis") && !printed.contains("disc"));
    }
    assert_eq!(files(&t.path("rec1/recons")), files(&t.path("rec2/recons")));
    assert_eq!(fs::read_dir(t.path("rec1/pgm")).unwrap().count(), 4);
    let fp: Value = serde_json::from_slice(&fs::read(t.path("rec1/footprint.json")).unwrap()).unwrap();
    let nets: Vec<&str> = fp.as_array().unwrap().iter().map(|n| n["net"].as_str().unwrap()).collect();
    assert_eq!(nets, ["e_cog", "gen"]);

    let (r, e) = (t.path("rec1"), t.path("eval"));
    let printed = ok(&["--config", s(&t.config()), "evaluate", "--data", s(&d), "--recons", s(&r), "--out", s(&e)]);
    assert!(printed.contains("pixcom"));
    for f in ["report.json", "metrics.csv"] {
        assert!(e.join(f).exists());
    }
}

#[test]
fn vae_gan_training_has_no_stage_two() {
    let t = Toy::new();
    t.train("run", &["--ablation", "vae-gan"]);
    assert!(!t.path("run/stage2.tar").exists());
    let jsonl = fs::read_to_string(t.path("run/train_log.jsonl")).unwrap();
    assert!(jsonl.lines().all(|l| serde_json::from_str::<Value>(l).unwrap()["stage"] != 2));
}

#[test]
fn stage_two_resume_continues_deterministically() {
    let t = Toy::new();
    t.train("straight", &[]);
    fs::create_dir_all(t.path("resumed")).unwrap();
    fs::copy(t.path("straight/stage1.tar"), t.path("resumed/stage1.tar")).unwrap();
    t.train("resumed", &["--stage", "2"]);
    for n in [2, 3] {
        let f = format!("stage{n}.tar");
        assert_eq!(fs::read(t.path("straight").join(&f)).unwrap(), fs::read(t.path("resumed").join(&f)).unwrap());
    }
    let (c, d, o) = (t.config(), t.data(), t.path("resumed"));
    let out = dvaegan(&["--config", s(&c), "--seed", "6", "train", "--data", s(&d), "--out", s(&o), "--stage", "2"]);
    assert_eq!(out.status.code(), Some(2), "a different seed cannot resume");
}

#[test]
fn evaluating_perfect_copies_scores_one_and_repeats_exactly() {
    let t = Toy::new();
    let ds = load_manifest(&t.data()).unwrap();
    let copies: Vec<_> = ds.test.iter().map(|&i| ds.records[i].image.clone()).collect();
    write_recons(&t.path("copies"), &copies, None).unwrap();
    let (d, r) = (t.data(), t.path("copies"));
    for out in ["e1", "e2"] {
        ok(&["--config", s(&t.config()), "evaluate", "--data", s(&d), "--recons", s(&r), "--out", s(&t.path(out))]);
    }
    let report: Value = serde_json::from_slice(&fs::read(t.path("e1/report.json")).unwrap()).unwrap();
    assert_eq!(report["aggregates"]["pcc"]["mean"].as_f64().unwrap(), 1.0);
    assert_eq!(report["aggregates"]["ssim"]["mean"].as_f64().unwrap(), 1.0);
    assert_eq!(report["pixcom"].as_f64().unwrap(), 1.0);
    assert_eq!(fs::read(t.path("e1/report.json")).unwrap(), fs::read(t.path("e2/report.json")).unwrap());

    let session = t.path("session.json");
    let result = t.path("hum.json");
    let printed = ok(&[
        "--config", s(&t.config()), "rate", "--session-file", s(&session), "--data", s(&d), "--recons", s(&r),
        "--simulate", "oracle", "--raters", "2", "--result-out", s(&result),
    ]);
    assert!(printed.contains("4 trials"));
    let hum: Value = serde_json::from_slice(&fs::read(&result).unwrap()).unwrap();
    assert_eq!((hum["pooled"].as_f64().unwrap(), hum["n_raters"].as_u64().unwrap()), (1.0, 2));
    // the saved session is reusable without rebuilding
    let again = ok(&["rate", "--session-file", s(&session), "--simulate", "random", "--result-out", s(&t.path("rand.json"))]);
    assert!(again.contains("over 4 choices"));
}
