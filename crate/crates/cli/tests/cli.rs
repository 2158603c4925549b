use std::path::Path;
use std::process::{Command, Output};

fn asars(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asars"))
        .args(args)
        .env("ASARS_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = asars(args);
    assert!(
        out.status.success(),
        "asars {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &[&str] = &[
    "--set",
    "epochs_max=2",
    "--set",
    "item_dim=8",
    "--set",
    "time_dim=4",
    "--set",
    "user_dim=4",
    "--set",
    "hidden_dim=8",
    "--set",
    "batch_size=16",
];

/// Synthesizes and preprocesses a small corpus; returns its path.
fn corpus(dir: &Path) -> std::path::PathBuf {
    let events = dir.join("events.csv");
    let corpus = dir.join("corpus.bin");
    ok(&[
        "synth",
        "--profile",
        "dwell-signal",
        "--seed",
        "3",
        "--items",
        "100",
        "--users",
        "20",
        "--events",
        "4000",
        "--output",
        s(&events),
    ]);
    let summary = ok(&["preprocess", "--input", s(&events), "--output", s(&corpus)]);
    let v: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert!(v["events"].as_u64().unwrap() > 0);
    corpus
}

#[test]
fn preprocess_summarizes_a_toy_log() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("toy.csv");
    std::fs::write(
        &csv,
        "user_id,item_id,timestamp\nu1,a,10\nu1,b,20\nu1,a,35\nu1,b,9000\n",
    )
    .unwrap();
    let out = dir.path().join("toy.bin");
    let args = [
        "preprocess",
        "--input",
        s(&csv),
        "--output",
        s(&out),
        "--set",
        "min_item_events=1",
        "--set",
        "min_user_sessions=1",
        "--set",
        "min_session_len=1",
        "--set",
        "boundary_ts=1000",
    ];
    let summary = ok(&args);
    let v: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert_eq!(v["events"], 4);
    assert_eq!(v["sessions"], 2);
    assert_eq!(
        (v["train_events"].as_u64(), v["test_events"].as_u64()),
        (Some(3), Some(1))
    );
    let first = std::fs::read(&out).unwrap();
    ok(&args);
    assert_eq!(std::fs::read(&out).unwrap(), first);
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for p in [&a, &b] {
        ok(&[
            "synth",
            "--seed",
            "7",
            "--items",
            "50",
            "--users",
            "5",
            "--events",
            "500",
            "--output",
            s(p),
        ]);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn train_then_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus(dir.path());
    let ckpt = dir.path().join("model.ckpt");
    let log = dir.path().join("train.jsonl");
    let mut args = vec![
        "train",
        "--corpus",
        s(&corpus),
        "--out",
        s(&ckpt),
        "--log",
        s(&log),
        "--set",
        "variant=time_user",
    ];
    args.extend_from_slice(SMALL);
    ok(&args);
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 2);

    let csv = dir.path().join("table.csv");
    let eval = |out: &Path| {
        ok(&[
            "evaluate",
            "--corpus",
            s(&corpus),
            "--ckpt",
            s(&ckpt),
            "--ks",
            "10,20,30,40",
            "--output",
            s(out),
            "--csv",
            s(&csv),
        ]);
        std::fs::read_to_string(out).unwrap()
    };
    let (r1, r2) = (
        eval(&dir.path().join("r1.json")),
        eval(&dir.path().join("r2.json")),
    );
    assert_eq!(r1, r2);
    let v: serde_json::Value = serde_json::from_str(&r1).unwrap();
    assert_eq!(v["variant"], "time_user");
    assert_eq!(v["ks"], serde_json::json!([10, 20, 30, 40]));
    for k in ["10", "20", "30", "40"] {
        let m = v["mrr"][k].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&m));
    }
    assert_eq!(v["checkpoint_hash"].as_str().unwrap().len(), 64);
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 3);

    let table = ok(&[
        "report",
        s(&dir.path().join("r1.json")),
        s(&dir.path().join("r2.json")),
    ]);
    assert_eq!(table.lines().count(), 3);
    assert!(table.starts_with("dataset,variant,mrr@10,recall@10"));
}

#[test]
fn evaluate_all_ranks_against_the_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus(dir.path());
    let out = ok(&["evaluate", "--corpus", s(&corpus), "--ks", "all"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["variant"], "popularity");
    let k = v["ks"][0].as_u64().unwrap().to_string();
    assert_eq!(v["recall"][k.as_str()], 1.0);
}

#[test]
fn grid_logs_every_point_and_keeps_the_best() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus(dir.path());
    let grid = dir.path().join("grid.toml");
    std::fs::write(
        &grid,
        "epochs_max = 2\nitem_dim = 8\ntime_dim = 4\nuser_dim = 4\nhidden_dim = 8\nbatch_size = 16\n[grid]\nlearning_rate = [0.05, 0.2]\n",
    )
    .unwrap();
    let log = dir.path().join("grid.jsonl");
    let best = dir.path().join("best.ckpt");
    let out = ok(&[
        "grid",
        "--corpus",
        s(&corpus),
        "--grid",
        s(&grid),
        "--log",
        s(&log),
        "--out",
        s(&best),
    ]);
    let runs: Vec<serde_json::Value> = serde_json::from_str(&out).unwrap();
    assert_eq!(runs.len(), 2);
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 2);
    assert!(best.is_file());
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = asars(&[
        "train",
        "--corpus",
        "/nonexistent/corpus.bin",
        "--out",
        s(&dir.path().join("m")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no such file"));

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "user_id,item_id,timestamp\nu1,a,10\nu1,b,x\n").unwrap();
    let out = asars(&[
        "preprocess",
        "--input",
        s(&bad),
        "--output",
        s(&dir.path().join("c")),
    ]);
    assert!(!out.status.success());
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("line 3"),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let corpus = corpus(dir.path());
    let out = asars(&["evaluate", "--corpus", s(&corpus), "--ckpt", s(&corpus)]);
    assert!(!out.status.success());
    let out = asars(&[
        "train",
        "--corpus",
        s(&corpus),
        "--out",
        s(&dir.path().join("m")),
        "--set",
        "bogus=1",
    ]);
    assert!(!out.status.success());
}
