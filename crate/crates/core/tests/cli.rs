use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use evomerge::oracle::client::RemoteOracle;
use evomerge::oracle::{FitnessQuery, Oracle};

const SMALL: &str = r#"
seed = 4

[synth]
input_dim = 12
class_count = 4
n_adapters = 6
n_relevant = 2
n_val = 64

[stage1]
generations = 4
population = 8

[stage2]
generations = 4
population = 8
"#;

fn evomerge(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evomerge"))
        .args(args)
        .current_dir(cwd)
        .env("EVOMERGE_LOG", "quiet")
        .output()
        .unwrap()
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_is_byte_identical_for_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    for out in ["w1", "w2"] {
        stdout_json(&evomerge(&["gen", "--seed", "7", "--out", out], tmp.path()));
    }
    let (w1, w2) = (tmp.path().join("w1"), tmp.path().join("w2"));
    let files = files_under(&w1);
    assert_eq!(files, files_under(&w2));
    assert!(files.len() > 40);
    for f in files {
        assert_eq!(fs::read(w1.join(&f)).unwrap(), fs::read(w2.join(&f)).unwrap(), "{}", f.display());
    }
}

#[test]
fn eval_replays_merge_result() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("small.toml"), SMALL).unwrap();
    let merged = stdout_json(&evomerge(&["merge", "--config", "small.toml", "--out", "run"], tmp.path()));
    for f in ["solution.json", "run_log.jsonl", "evaluations.jsonl", "config.toml", "merged/manifest.json"] {
        assert!(tmp.path().join("run").join(f).is_file(), "{f} missing");
    }
    let log = fs::read_to_string(tmp.path().join("run/run_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 8);

    let report = stdout_json(&evomerge(&["eval", "--solution", "run"], tmp.path()));
    let replay = report["loss"].as_f64().unwrap();
    let recorded = merged["best_loss_stage2"].as_f64().unwrap();
    assert!((replay - recorded).abs() <= 1e-9, "{replay} vs {recorded}");
    // The stored container is f32, so it only agrees to storage precision.
    assert!((report["container_loss"].as_f64().unwrap() - recorded).abs() < 1e-4);
}

#[test]
fn merge_against_gen_world_matches_inline_world() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("small.toml"), SMALL).unwrap();
    stdout_json(&evomerge(&["gen", "--config", "small.toml", "--out", "world"], tmp.path()));
    let inline = stdout_json(&evomerge(&["merge", "--config", "small.toml", "--out", "a"], tmp.path()));
    let stored =
        stdout_json(&evomerge(&["merge", "--config", "small.toml", "--world", "world", "--out", "b"], tmp.path()));
    assert_eq!(inline["alphas_star"], stored["alphas_star"]);
    assert_eq!(inline["best_loss_stage2"], stored["best_loss_stage2"]);
}

#[test]
fn bound_check_reports_no_violations() {
    let tmp = tempfile::tempdir().unwrap();
    let report = stdout_json(&evomerge(&["bound-check", "--trials", "1000"], tmp.path()));
    assert_eq!(report["trials"], 1000);
    assert_eq!(report["violations"], 0);
    assert!(report["max_ratio"].as_f64().unwrap() <= 1.0 + 1e-9);
}

#[test]
fn analyze_writes_tables() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("small.toml"), SMALL).unwrap();
    stdout_json(&evomerge(&["analyze", "--config", "small.toml", "--grid", "0.1,0.5,1.0", "--out", "an"], tmp.path()));
    let study = fs::read_to_string(tmp.path().join("an/ab_study.csv")).unwrap();
    assert_eq!(study.lines().next().unwrap(), "alpha,loss_a,loss_b,gini_a,gini_b");
    assert_eq!(study.lines().count(), 4);
    let lorenz = fs::read_to_string(tmp.path().join("an/lorenz.csv")).unwrap();
    assert!(lorenz.lines().skip(1).all(|l| l.split(',').count() == 4));
}

#[test]
fn failures_exit_nonzero_with_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.toml"), "seed = 1\nbogus = 3\n").unwrap();
    let cases: [&[&str]; 4] = [
        &["merge", "--config", "bad.toml"],
        &["merge", "--config", "missing.toml"],
        &["eval"],
        &["gen", "--world", "nowhere", "--out", "x"],
    ];
    for args in cases {
        let out = evomerge(args, tmp.path());
        assert!(!out.status.success(), "{args:?}");
        let stderr = String::from_utf8(out.stderr).unwrap();
        assert_eq!(stderr.lines().count(), 1, "{args:?}: {stderr}");
        assert!(stderr.starts_with("evomerge: error:"));
    }
}

#[cfg(unix)]
#[test]
fn serve_answers_and_exits_cleanly_on_interrupt() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("small.toml"), SMALL).unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_evomerge"))
        .args(["serve", "--config", "small.toml", "--bind", "127.0.0.1:0"])
        .current_dir(tmp.path())
        .env("EVOMERGE_LOG", "quiet")
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let endpoint = line.trim().strip_prefix("listening on ").unwrap().to_string();

    let reply = RemoteOracle::new(&endpoint).evaluate(&FitnessQuery::stage1("ping", vec![1.0; 6])).unwrap();
    assert_eq!(reply.request_id, "ping");
    assert_eq!(reply.n_examples, 64);

    let status = Command::new("kill").args(["-INT", &child.id().to_string()]).status().unwrap();
    assert!(status.success());
    assert!(child.wait().unwrap().success());
}
