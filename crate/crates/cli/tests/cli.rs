use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flowmamba_cli::files::{decode_checkpoint, read_scene, read_scene_dir};
use flowmamba_core::pipeline::{FlowMambaModel, NetworkConfig};

const SMALL: &[&str] = &[
    "--set",
    "points=32,8",
    "--set",
    "channels=8",
    "--set",
    "motion_channels=8",
    "--set",
    "k=4",
    "--set",
    "state=4",
];

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowmamba"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("scenes");
    let mut args = vec!["gen", "--out", s(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect()
}

#[test]
fn identity_scene_has_zero_flow() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = gen(dir.path(), &["--objects", "1", "--transform", "identity"]);
    let scene = read_scene(&scenes.join("scene_0000.txt")).unwrap();
    assert!(scene.flow.data().iter().all(|&v| v == 0.0));
    assert_eq!(scene.source, scene.target);
}

#[test]
fn same_seed_gives_identical_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["--seed", "17", "--count", "3", "--noise", "0.01", "--occlusion", "0.2"];
    let (da, db) = (gen(a.path(), &args), gen(b.path(), &args));
    for i in 0..3 {
        let name = format!("scene_{i:04}.txt");
        assert_eq!(fs::read(da.join(&name)).unwrap(), fs::read(db.join(&name)).unwrap());
    }
    let other = tempfile::tempdir().unwrap();
    let dc = gen(other.path(), &["--seed", "18"]);
    assert_ne!(
        fs::read(da.join("scene_0000.txt")).unwrap(),
        fs::read(dc.join("scene_0000.txt")).unwrap()
    );
}

#[test]
fn noisy_scene_keeps_separate_target() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = gen(
        dir.path(),
        &["--objects", "2", "--points-per-object", "20", "--occlusion", "0.25"],
    );
    let scene = read_scene(&scenes.join("scene_0000.txt")).unwrap();
    assert_eq!(scene.source.rows(), 40);
    assert_eq!(scene.target.rows(), 30);
}

#[test]
fn rotate30_flow_matches_rotation() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = gen(dir.path(), &["--transform", "rotate30", "--seed", "4"]);
    let scene = read_scene(&scenes.join("scene_0000.txt")).unwrap();
    let (c, sn) = (30f64.to_radians().cos(), 30f64.to_radians().sin());
    for i in 0..scene.source.rows() {
        let p = scene.source.row(i);
        let q = [c * p[0] - sn * p[1], sn * p[0] + c * p[1], p[2]];
        for j in 0..3 {
            assert!((scene.flow.at(i, j) - (q[j] - p[j])).abs() < 1e-12);
        }
    }
}

#[test]
fn gen_to_unwritable_path_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = run(&["gen", "--out", s(&blocker.join("sub"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn bad_transform_and_unknown_key_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["gen", "--out", s(dir.path()), "--transform", "spin"]);
    assert_eq!(out.status.code(), Some(1));
    let scenes = gen(dir.path(), &[]);
    let out = run(&[
        "train",
        "--scenes",
        s(&scenes),
        "--out",
        s(dir.path()),
        "--set",
        "chanels=8",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("chanels"));
}

#[test]
fn zero_steps_writes_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = gen(dir.path(), &["--points-per-object", "12"]);
    let run_dir = dir.path().join("run");
    let mut args = vec![
        "train",
        "--scenes",
        s(&scenes),
        "--out",
        s(&run_dir),
        "--steps",
        "0",
        "--seed",
        "5",
    ];
    args.extend_from_slice(SMALL);
    ok(&args);

    let bytes = fs::read(run_dir.join("checkpoint.bin")).unwrap();
    let entries = decode_checkpoint(&run_dir.join("checkpoint.bin"), &bytes).unwrap();
    let mut cfg = NetworkConfig::default();
    for pair in [
        "points=32,8",
        "channels=8",
        "motion_channels=8",
        "k=4",
        "state=4",
        "seed=5",
    ] {
        let (k, v) = pair.split_once('=').unwrap();
        cfg.set(k, v).unwrap();
    }
    let init = FlowMambaModel::new(cfg).unwrap();
    assert_eq!(entries.len(), init.params.len());
    for ((name, t), (n0, t0)) in entries.iter().zip(init.params.iter()) {
        assert_eq!(name, n0);
        assert_eq!(t, t0);
    }
    assert!(csv_rows(&run_dir.join("train_log.csv")).is_empty());
    let cfg_text = fs::read_to_string(run_dir.join("config.cfg")).unwrap();
    assert!(cfg_text.contains("seed = 5") && cfg_text.contains("steps = 0"));
}

#[test]
fn training_log_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = gen(
        dir.path(),
        &[
            "--objects",
            "1",
            "--points-per-object",
            "40",
            "--transform",
            "translate",
            "--seed",
            "3",
        ],
    );
    let train = |name: &str| {
        let out = dir.path().join(name);
        let mut args = vec![
            "train",
            "--scenes",
            s(&scenes),
            "--out",
            s(&out),
            "--steps",
            "50",
            "--seed",
            "1",
        ];
        args.extend_from_slice(SMALL);
        ok(&args);
        out
    };
    let (a, b) = (train("a"), train("b"));
    let log = csv_rows(&a.join("train_log.csv"));
    assert_eq!(log.len(), 50);
    for (i, row) in log.iter().enumerate() {
        assert_eq!(row[0], (i + 1).to_string());
    }
    let lrs: Vec<f64> = log.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    let losses: Vec<f64> = log.iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(losses[49] < losses[0], "{} !< {}", losses[49], losses[0]);

    for f in ["checkpoint.bin", "train_log.csv", "config.cfg"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = gen(dir.path(), &["--points-per-object", "12"]);
    let mut args = vec![
        "train",
        "--scenes",
        s(&scenes),
        "--out",
        s(dir.path()),
        "--steps",
        "5",
        "--set",
        "lr=1e300",
    ];
    args.extend_from_slice(SMALL);
    let out = run(&args);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}

#[test]
fn empty_scene_dir_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = run(&["train", "--scenes", s(&empty), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_rows_and_zero_motion_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = gen(
        dir.path(),
        &["--transform", "identity", "--count", "3", "--points-per-object", "12"],
    );
    let run_dir = dir.path().join("run");
    let mut args = vec!["train", "--scenes", s(&scenes), "--out", s(&run_dir), "--steps", "0"];
    args.extend_from_slice(SMALL);
    ok(&args);

    let eval_dir = dir.path().join("eval");
    let ckpt = run_dir.join("checkpoint.bin");
    let cfg = run_dir.join("config.cfg");
    ok(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--scenes",
        s(&scenes),
        "--out",
        s(&eval_dir),
        "--config",
        s(&cfg),
        "--iters",
        "3",
    ]);
    let rows = csv_rows(&eval_dir.join("metrics.csv"));
    assert_eq!(rows.len(), 3 * 3);
    let ids: Vec<String> = read_scene_dir(&scenes).unwrap().into_iter().map(|s| s.id).collect();
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row[0], ids[i / 3]);
        assert_eq!(row[1], (i % 3 + 1).to_string());
        let v: Vec<f64> = row[2..].iter().map(|x| x.parse().unwrap()).collect();
        assert_eq!(v, vec![0.0, 1.0, 1.0, 0.0]);
    }
}

#[test]
fn mismatched_checkpoint_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = gen(dir.path(), &["--points-per-object", "12"]);
    let run_dir = dir.path().join("run");
    let mut args = vec!["train", "--scenes", s(&scenes), "--out", s(&run_dir), "--steps", "0"];
    args.extend_from_slice(SMALL);
    ok(&args);
    let ckpt = run_dir.join("checkpoint.bin");
    let cfg = run_dir.join("config.cfg");
    let out = run(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--scenes",
        s(&scenes),
        "--out",
        s(dir.path()),
        "--config",
        s(&cfg),
        "--set",
        "channels=12",
    ]);
    assert_eq!(out.status.code(), Some(4));
    let err = String::from_utf8_lossy(&out.stderr);
    let first = NetworkConfig::default();
    let model = FlowMambaModel::new(first).unwrap();
    let first_name = model.params.iter().next().unwrap().0.to_string();
    assert!(err.contains(&format!("`{first_name}`")), "{err}");
}

#[test]
fn bench_writes_csv_and_rejects_few_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    ok(&[
        "bench",
        "--lengths",
        "16,64",
        "--states",
        "2",
        "--repeats",
        "3",
        "--out",
        s(&csv),
    ]);
    let rows = csv_rows(&csv);
    assert_eq!(rows.len(), 2 * 3);
    for row in &rows {
        assert!(row[4].parse::<f64>().unwrap() < 1e-9);
        assert!(row[3].parse::<f64>().unwrap() > 0.0);
    }
    let out = run(&["bench", "--repeats", "2"]);
    assert_eq!(out.status.code(), Some(1));
}
