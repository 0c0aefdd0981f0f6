use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use zsdet::checkpoint::load_checkpoint;
use zsdet::head::AblationMode;
use zsdet::semantics::PrototypeTable;

fn zsdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zsdet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = zsdet(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    zsdet(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generates a small dataset and routes it with a high-energy split.
fn dataset(dir: &Path) -> PathBuf {
    let raw = dir.join("raw");
    ok(&["gen-data", "--out", s(&raw), "--scenes", "60", "--seed", "3"]);
    let split = dir.join("split").join("manifest.json");
    ok(&[
        "split",
        "--data",
        s(&raw.join("manifest.json")),
        "--out",
        s(&split),
        "--energy",
        "0.85",
    ]);
    split
}

fn quick_train(data: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--data", s(data), "--out", s(out), "--lr-schedule", "1:1e-4,1:1e-3"];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn gen_data_is_deterministic_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let stdout = ok(&["gen-data", "--out", s(d), "--classes", "16", "--scenes", "30", "--seed", "7"]);
        assert!(stdout.contains("angular"), "class table printed: {stdout}");
    }
    let ma = fs::read(a.join("manifest.json")).unwrap();
    assert_eq!(ma, fs::read(b.join("manifest.json")).unwrap());
    assert!(zsdet::scene::load_manifest(&a.join("manifest.json")).is_ok());
    assert_eq!(code(&["gen-data", "--out", s(&dir.path().join("c")), "--scenes", "0"]), 2);
}

#[test]
fn gen_data_rejects_unwritable_output() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    assert_eq!(code(&["gen-data", "--out", s(&blocker.join("sub")), "--scenes", "2"]), 2);
}

#[test]
fn prototype_modes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());

    let onehot = dir.path().join("onehot.json");
    ok(&["prototypes", "--data", s(&data), "--mode", "onehot", "--out", s(&onehot)]);
    let t: PrototypeTable = serde_json::from_str(&fs::read_to_string(&onehot).unwrap()).unwrap();
    assert_eq!((t.h, t.classes.len()), (16, 16));
    for (i, c) in t.classes.iter().enumerate() {
        assert_eq!(c.vector.iter().sum::<f64>(), 1.0);
        assert_eq!(c.vector[i], 1.0);
    }

    let (r1, r2) = (dir.path().join("r1.json"), dir.path().join("r2.json"));
    for r in [&r1, &r2] {
        ok(&["prototypes", "--data", s(&data), "--mode", "random", "--seed", "3", "--out", s(r)]);
    }
    assert_eq!(fs::read(&r1).unwrap(), fs::read(&r2).unwrap());

    let fit = |dim: &str| -> f64 {
        let out = dir.path().join(format!("w{dim}.json"));
        let stdout = ok(&[
            "prototypes",
            "--data",
            s(&data),
            "--mode",
            "w2vR",
            "--synthetic-embeddings",
            "32",
            "--target-dim",
            dim,
            "--out",
            s(&out),
        ]);
        let line = stdout.lines().find(|l| l.starts_with("fit_error")).expect("fit_error printed");
        line.split_whitespace().nth(1).unwrap().parse().unwrap()
    };
    assert!(fit("6") <= fit("4"));

    let missing = dir.path().join("w.json");
    assert_eq!(code(&["prototypes", "--data", s(&data), "--mode", "w2vR", "--out", s(&missing)]), 2);
}

#[test]
fn train_eval_predict_round() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let ckpt = dir.path().join("visual.zsy");
    let log = dir.path().join("loss.csv");
    quick_train(&data, &ckpt, &["--ablation", "visual", "--log", s(&log)]);
    let c = load_checkpoint(&ckpt).unwrap();
    assert_eq!(c.header.ablation_mode, AblationMode::Visual);
    assert_eq!(c.header.loss_history.len(), 2);
    assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), 3);

    let (e1, e2) = (dir.path().join("e1"), dir.path().join("e2"));
    for e in [&e1, &e2] {
        ok(&["eval", "--data", s(&data), "--checkpoint", s(&ckpt), "--out", s(e)]);
    }
    for split in ["test_seen", "test_unseen", "test_mix"] {
        for kind in ["metrics", "pr", "recall"] {
            let name = format!("{split}_{kind}.csv");
            let a = fs::read(e1.join(&name)).unwrap();
            assert_eq!(a, fs::read(e2.join(&name)).unwrap(), "{name} differs between runs");
        }
        let metrics = fs::read_to_string(e1.join(format!("{split}_metrics.csv"))).unwrap();
        assert!(metrics.starts_with("threshold,tp,pred,gt,precision,recall,fscore\n"));
    }

    let pred = dir.path().join("pred.json");
    let overlay = dir.path().join("overlay.ppm");
    ok(&[
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--split",
        "seen",
        "--conf-floor",
        "0",
        "--out",
        s(&pred),
        "--overlay",
        s(&overlay),
    ]);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&pred).unwrap()).unwrap();
    let first = &json[0]["objects"][0];
    assert!(first["confidence"].is_f64() && first["semantic"].is_array() && first["w"].is_f64());
    assert!(zsdet::scene::read_ppm(&overlay).is_ok());
}

#[test]
fn oracle_ground_truth_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let out = dir.path().join("oracle");
    ok(&["eval", "--data", s(&data), "--oracle-gt", "--out", s(&out)]);
    for split in ["test_seen", "test_unseen", "test_mix"] {
        let csv = fs::read_to_string(out.join(format!("{split}_metrics.csv"))).unwrap();
        let summary = csv.lines().last().unwrap();
        let ap: f64 = summary.split(',').next().unwrap().parse().unwrap();
        assert_eq!(ap, 1.0, "{split}");
    }
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let ckpt = dir.path().join("m.zsy");
    quick_train(&data, &ckpt, &[]);

    let bad_epochs = dir.path().join("x.zsy");
    assert_eq!(
        code(&["train", "--data", s(&data), "--out", s(&bad_epochs), "--epochs", "5"]),
        2
    );

    let out = zsdet(&["eval", "--data", s(&data), "--checkpoint", s(&ckpt), "--grid", "4", "--out", s(&dir.path().join("e"))]);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("S=7") && msg.contains("S=4"), "{msg}");

    let bytes = fs::read(&ckpt).unwrap();
    let cut = dir.path().join("cut.zsy");
    fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    assert_eq!(code(&["eval", "--data", s(&data), "--checkpoint", s(&cut), "--out", s(&dir.path().join("f"))]), 2);
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let out = zsdet(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&dir.path().join("d.zsy")),
        "--lr-schedule",
        "2:1e6",
        "--no-clip",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch 1"));
}
