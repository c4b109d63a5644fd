//! Command-level behaviour: artifacts, flag semantics and exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use consistent_point::cli::{cmd_ablate, cmd_eval, cmd_gen, cmd_match, cmd_train, Axis, RunManifest, TrainArgs};
use consistent_point::net::{ModelParams, NetHyper};
use consistent_point::synth::SPLIT_FILES;
use consistent_point::trainer::RunReport;
use serde_json::json;
use tempfile::TempDir;

fn write_json(dir: &Path, name: &str, value: serde_json::Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_vec_pretty(&value).unwrap()).unwrap();
    p
}

fn synth_config(dir: &Path) -> PathBuf {
    write_json(
        dir,
        "synth.json",
        json!({ "field_size": 36, "n_scenes": 12, "heads_per_scene": [2, 6], "labeled_ratio": 0.25 }),
    )
}

fn train_config(dir: &Path) -> PathBuf {
    write_json(
        dir,
        "train.json",
        json!({
            "crop_size": 32,
            "batch_labeled": 2,
            "batch_unlabeled": 2,
            "steps": 6,
            "eval_every": 3,
            "net": { "patch_size": 5, "hidden_width": 6, "stride": 4 }
        }),
    )
}

struct Fixture {
    dir: TempDir,
    data: PathBuf,
    config: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        cmd_gen(Some(&synth_config(dir.path())), &data, None).unwrap();
        let config = train_config(dir.path());
        Self { dir, data, config }
    }

    fn args(&self) -> TrainArgs {
        TrainArgs {
            config: Some(self.config.clone()),
            dataset: self.data.clone(),
            labeled_only: false,
            no_pa: false,
            no_iuc: false,
            steps: None,
            seed: None,
            lambda: None,
            k_aux: None,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn cpoint(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_cpoint")).args(args).output().unwrap()
}

#[test]
fn gen_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    cmd_gen(Some(&cfg), &a, None).unwrap();
    cmd_gen(Some(&cfg), &b, None).unwrap();
    for f in SPLIT_FILES {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let manifest: RunManifest = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.command, "gen");
    assert_eq!(manifest.seed, Some(42));
    cmd_gen(Some(&cfg), &b, Some(7)).unwrap();
    assert_ne!(fs::read(a.join(SPLIT_FILES[1])).unwrap(), fs::read(b.join(SPLIT_FILES[1])).unwrap());
}

#[test]
fn gen_rejects_zero_labeled_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(dir.path(), "bad.json", json!({ "labeled_ratio": 0.0 }));
    let err = cmd_gen(Some(&cfg), &dir.path().join("out"), None).unwrap_err();
    assert!(err.to_string().contains("labeled_ratio"), "{err}");
}

#[test]
fn train_flags_and_manifest() {
    let fx = Fixture::new();
    let out = cmd_train(&fx.args(), &fx.path("full"), None).unwrap();
    let m: RunManifest = serde_json::from_slice(&fs::read(fx.path("full/manifest.json")).unwrap()).unwrap();
    assert_eq!(m.config["pa"]["k_aux"], 4);
    assert_eq!(m.config["lambda"], 0.1);
    assert_eq!(m.config["use_iuc"], true);
    assert_eq!(m.config_file_contents.as_ref().unwrap()["steps"], 6);
    for f in ["report.json", "student.cpnp", "teacher.cpnp", "state.cpts"] {
        assert!(fx.path("full").join(f).exists(), "{f}");
    }
    assert!(out.report.steps.iter().all(|s| s.unlabeled.is_some()));

    let args = TrainArgs {
        labeled_only: true,
        ..fx.args()
    };
    let out = cmd_train(&args, &fx.path("labeled"), None).unwrap();
    assert_eq!(out.report.config.lambda, 0.0);
    assert!(out.report.steps.iter().all(|s| s.unlabeled.is_none()));

    let args = TrainArgs {
        no_pa: true,
        no_iuc: true,
        steps: Some(2),
        ..fx.args()
    };
    let out = cmd_train(&args, &fx.path("baseline"), None).unwrap();
    assert_eq!((out.report.config.pa.k_aux, out.report.config.use_iuc), (0, false));
    assert_eq!(out.report.steps.len(), 2);
}

#[test]
fn train_is_deterministic_and_resumable() {
    let fx = Fixture::new();
    cmd_train(&fx.args(), &fx.path("a"), None).unwrap();
    cmd_train(&fx.args(), &fx.path("b"), None).unwrap();
    let report = |d: &str| fs::read(fx.path(d).join("report.json")).unwrap();
    assert_eq!(report("a"), report("b"));

    let short = TrainArgs {
        steps: Some(2),
        ..fx.args()
    };
    cmd_train(&short, &fx.path("short"), None).unwrap();
    cmd_train(&fx.args(), &fx.path("resumed"), Some(&fx.path("short/state.cpts"))).unwrap();
    let state = |d: &str| fs::read(fx.path(d).join("state.cpts")).unwrap();
    assert_eq!(state("resumed"), state("a"));
    let r: RunReport = serde_json::from_slice(&report("resumed")).unwrap();
    assert_eq!(r.start_step, 2);
}

#[test]
fn eval_tables() {
    let fx = Fixture::new();
    cmd_train(&fx.args(), &fx.path("run"), None).unwrap();
    let ckpt = fx.path("run/student.cpnp");
    let a = cmd_eval(&ckpt, &fx.data, &[4.0, 8.0], &fx.path("e1")).unwrap();
    cmd_eval(&ckpt, &fx.data, &[4.0, 8.0], &fx.path("e2")).unwrap();
    assert_eq!(a.localization.len(), 2);
    assert_eq!(
        fs::read(fx.path("e1/eval.json")).unwrap(),
        fs::read(fx.path("e2/eval.json")).unwrap()
    );
    let csv = fs::read_to_string(fx.path("e1/eval.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.starts_with("localization")).count(), 2);
    assert_eq!(csv.lines().filter(|l| l.starts_with("counting")).count(), 1);

    // A zero-parameter model scores 0.5 everywhere and predicts every anchor.
    let zero = fx.path("zero.cpnp");
    ModelParams::zeros(NetHyper {
        patch_size: 5,
        hidden_width: 6,
        stride: 4,
    })
    .save(&zero)
    .unwrap();
    let z = cmd_eval(&zero, &fx.data, &[4.0], &fx.path("ez")).unwrap();
    assert!(z.localization[0].fp > 0);
    assert!(z.counting.mae > 0.0);
}

#[test]
fn match_dump_is_consistent() {
    let fx = Fixture::new();
    cmd_train(&fx.args(), &fx.path("run"), None).unwrap();
    let dump = cmd_match(&fx.path("run/student.cpnp"), &fx.data, "holdout-00000", 0.05).unwrap();
    assert!(!dump.pairs.is_empty());
    let sum: f64 = dump.pairs.iter().map(|p| p.cost).sum();
    assert!((sum - dump.total_cost).abs() < 1e-9);
    assert_eq!(dump.negative_count + dump.pairs.len(), 81);
    let mut used: Vec<usize> = dump.pairs.iter().map(|p| p.proposal).collect();
    used.sort();
    used.dedup();
    assert_eq!(used.len(), dump.pairs.len());
    assert!(cmd_match(&fx.path("run/student.cpnp"), &fx.data, "nope", 0.05).is_err());
}

#[test]
fn ablate_row_counts() {
    let fx = Fixture::new();
    let args = TrainArgs {
        steps: Some(2),
        ..fx.args()
    };
    let k = cmd_ablate(&args, Axis::KAux, &fx.path("k"), false).unwrap();
    assert_eq!(k.rows.len(), 3);
    assert!(k.rows.iter().all(|r| r.status == "ok" && r.seed == 0 && r.mae.is_some()));
    let l = cmd_ablate(&args, Axis::Lambda, &fx.path("l"), true).unwrap();
    assert_eq!(l.rows.len(), 5);
    let csv = fs::read_to_string(fx.path("l/sweep.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "value,MAE,MSE,F1@4,F1@8,seed,status");
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn exit_codes() {
    let fx = Fixture::new();
    let data = fx.data.to_str().unwrap();
    let ok = cpoint(&[
        "train",
        "--dataset",
        data,
        "--config",
        fx.config.to_str().unwrap(),
        "--steps",
        "1",
        "--out",
        fx.path("bin").to_str().unwrap(),
    ]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));

    let bad = write_json(fx.dir.path(), "bad.json", json!({ "labeled_ratio": 0.0 }));
    let out = cpoint(&["gen", "--config", bad.to_str().unwrap(), "--out", fx.path("g").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("labeled_ratio"));

    let out = cpoint(&["eval", "--checkpoint", fx.path("missing.cpnp").to_str().unwrap(), "--dataset", data]);
    assert_eq!(out.status.code(), Some(3));

    fs::write(fx.path("junk.cpnp"), b"not a checkpoint").unwrap();
    let out = cpoint(&[
        "eval",
        "--checkpoint",
        fx.path("junk.cpnp").to_str().unwrap(),
        "--dataset",
        data,
        "--out",
        fx.path("ej").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));

    let out = cpoint(&[
        "train",
        "--dataset",
        data,
        "--config",
        fx.config.to_str().unwrap(),
        "--k-aux",
        "5",
        "--out",
        fx.path("k5").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
