use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--critic-hidden",
    "8,8",
    "--actor-hidden",
    "8,8",
    "--batch-size",
    "8",
    "--ensemble-size",
    "1",
    "--flow-steps",
    "4",
    "--log-interval",
    "5",
];

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_valueflows")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn train(dir: &Path, steps: &str, extra: &[&str]) {
    let mut args = vec!["train-offline", "--data", "data.txt", "--out", "ck.json", "--offline-steps", steps];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    ok(dir, &args);
}

fn gen(dir: &Path, env: &str) {
    ok(dir, &["gen-data", "--env", env, "--size", "200", "--seed", "3", "--out", "data.txt"]);
}

#[test]
fn pipeline_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d, "branching-tree");
    train(d, "10", &["--metrics", "m.jsonl"]);

    let metrics = std::fs::read_to_string(d.join("m.jsonl")).unwrap();
    let steps: Vec<u64> = metrics
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, [5, 10]);

    let report: serde_json::Value = serde_json::from_str(&ok(
        d,
        &["eval-policy", "--checkpoint", "ck.json", "--episodes", "4", "--horizon", "5"],
    ))
    .unwrap();
    assert_eq!(report["env"], "branching-tree");
    assert_eq!(report["policy"]["returns"].as_array().unwrap().len(), 4);

    let report: serde_json::Value = serde_json::from_str(&ok(
        d,
        &["eval-dist", "--checkpoint", "ck.json", "--state", "0", "--action=-1", "--samples", "50", "--bins", "10"],
    ))
    .unwrap();
    let w1 = report["w1"].as_array().unwrap();
    assert_eq!(w1.len(), 2);
    assert_eq!(w1[0]["reference"], "oracle-uniform");
    assert!(w1.iter().all(|e| e["w1"].as_f64().unwrap() >= 0.0));

    ok(d, &["dump-hist", "--checkpoint", "ck.json", "--state", "0", "--action", "1", "--bins", "6", "--out", "h.csv"]);
    let csv = std::fs::read_to_string(d.join("h.csv")).unwrap();
    let mass: f64 = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap()).sum();
    assert_eq!(csv.lines().count(), 7);
    assert!((mass - 1.0).abs() < 1e-9);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d, "stochastic-chain");
    train(d, "10", &[]);
    std::fs::rename(d.join("ck.json"), d.join("full.json")).unwrap();
    train(d, "4", &[]);
    train(d, "10", &["--resume", "ck.json"]);
    let out = run(d, &["train-offline", "--data", "data.txt", "--out", "x.json", "--resume", "ck.json", "--critic-hidden", "4"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(std::fs::read(d.join("ck.json")).unwrap(), std::fs::read(d.join("full.json")).unwrap());
}

#[test]
fn finetune_online_extends_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d, "continuous-bandit");
    train(d, "10", &[]);
    let mut args = vec![
        "finetune-online",
        "--checkpoint",
        "ck.json",
        "--data",
        "data.txt",
        "--out",
        "on.json",
        "--online-steps",
        "6",
        "--warmstart-steps",
        "2",
    ];
    args.extend_from_slice(TINY);
    ok(d, &args);
    ok(d, &["eval-policy", "--checkpoint", "on.json", "--mode", "online", "--episodes", "3", "--horizon", "1"]);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d, "branching-tree");

    let out = run(d, &["train-offline", "--data", "missing.txt", "--out", "x.json"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.txt"));

    let out = run(d, &["train-offline", "--data", "data.txt", "--out", "x.json", "--critic", "bogus"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(d, &["gen-data", "--env", "nowhere", "--out", "x.txt"]);
    assert_eq!(out.status.code(), Some(1));

    let text = std::fs::read_to_string(d.join("data.txt")).unwrap();
    let mut lines = text.lines();
    let mut poisoned = format!("{}\n", lines.next().unwrap());
    for line in lines {
        let mut f: Vec<&str> = line.split('|').collect();
        f[2] = "NaN";
        poisoned.push_str(&f.join("|"));
        poisoned.push('\n');
    }
    std::fs::write(d.join("nan.txt"), poisoned).unwrap();
    let mut args = vec!["train-offline", "--data", "nan.txt", "--out", "n.json", "--offline-steps", "3"];
    args.extend_from_slice(TINY);
    let out = run(d, &args);
    assert_eq!(out.status.code(), Some(2));
    assert!(d.join("n.json").exists());
}
