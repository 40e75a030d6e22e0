use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

use fedsparse_core::model::head_specs;
use fedsparse_core::pool_service::FilePool;
use fedsparse_core::{MlpWeights, PoolClient, PoolEntry};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fedsparse"));
    c.env_remove("FEDSPARSE_POOL");
    c
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn synth(dir: &Path) {
    ok(&bin()
        .args(["synth", "--patients", "4", "--events", "60", "--seed", "2", "-o"])
        .arg(dir)
        .output()
        .unwrap());
}

fn quick_run(cmd: &str, dir: &Path, extra: &[&str]) -> Command {
    let mut c = bin();
    c.arg(cmd)
        .arg("--target")
        .arg(dir.join("target.csv"))
        .arg("--source")
        .arg(dir.join("source.csv"))
        .args(["--epochs", "2", "--repeats", "1", "--label-index", "0"])
        .args(extra);
    c
}

#[test]
fn synth_train_report() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out_dir = dir.path().join("out");
    let out = quick_run("train", dir.path(), &["--mode", "hfl", "-o"]).arg(&out_dir).output().unwrap();
    ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("HFL") && stdout.contains("DNN"), "{stdout}");
    for f in ["metrics.csv", "audit.jsonl", "summary.json"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let rep = bin().arg("report").arg(&out_dir).output().unwrap();
    ok(&rep);
    assert!(String::from_utf8_lossy(&rep.stdout).contains("DNN"));
}

#[test]
fn ablate_runs_four_modes_with_a_config_file() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "period = 25\nalpha = 0.3\nnormalize = true\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = quick_run("ablate", dir.path(), &["-c", cfg.to_str().unwrap(), "-o", out_dir.to_str().unwrap()])
        .output()
        .unwrap();
    ok(&out);
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["alpha"], 0.3);
    assert_eq!(summary["ablation_fairness"]["identical_init_and_data"], true);
    let csv = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    for system in ["HFL-No", "HFL-Random", "HFL-Always", "HFL,"] {
        assert!(csv.contains(system), "{system}");
    }
}

#[test]
fn bad_inputs_fail_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let bad_mode = quick_run("train", dir.path(), &["--mode", "sometimes"]).output().unwrap();
    assert!(!bad_mode.status.success());
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "windw = 3\n").unwrap();
    let bad_cfg = quick_run("train", dir.path(), &["-c", cfg.to_str().unwrap()]).output().unwrap();
    assert_eq!(bad_cfg.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad_cfg.stderr).contains("windw"));
    let missing = bin().args(["train", "--target", "/nonexistent.csv"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn diverging_repeats_give_failure_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let cfg = dir.path().join("hot.toml");
    std::fs::write(&cfg, "lr = 1e200\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = quick_run(
        "train",
        dir.path(),
        &["-c", cfg.to_str().unwrap(), "--mode", "no", "--no-baseline", "-o", out_dir.to_str().unwrap()],
    )
    .output()
    .unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert!(csv.contains("true"));
}

#[test]
fn pool_endpoint_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let pool_dir = dir.path().join("pool");
    let endpoint = format!("file://{}", pool_dir.display());
    let out = quick_run("train", dir.path(), &["--mode", "always", "--no-baseline", "-o"])
        .arg(dir.path().join("out"))
        .env("FEDSPARSE_POOL", &endpoint)
        .output()
        .unwrap();
    ok(&out);
    let files = std::fs::read_dir(&pool_dir).unwrap().count();
    assert!(files >= 8, "{files} pool files");
    let list = bin().args(["pool", "list"]).env("FEDSPARSE_POOL", &endpoint).output().unwrap();
    ok(&list);
    assert!(String::from_utf8_lossy(&list.stdout).lines().count() >= 8);
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn start_server() -> (Server, String) {
    let mut child = bin()
        .args(["pool", "serve", "--listen", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().rsplit(' ').next().unwrap().to_owned();
    (Server(child), addr)
}

#[test]
fn training_against_a_separate_pool_process() {
    let (_server, addr) = start_server();
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let endpoint = format!("tcp://{addr}");
    let out = quick_run("train", dir.path(), &["--mode", "always", "--no-baseline", "--pool", &endpoint, "-o"])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    ok(&out);
    let list = bin().args(["pool", "list", "--endpoint", &endpoint]).output().unwrap();
    ok(&list);
    let text = String::from_utf8_lossy(&list.stdout);
    assert!(text.contains("/r0-t0-always/target") && text.contains("/r0-t0-always/source"), "{text}");
}

/// Entries written by this process are listed, intact, by another one.
#[test]
fn file_pool_across_processes() {
    let dir = tempfile::tempdir().unwrap();
    let pool = FilePool::open(dir.path()).unwrap();
    let weights = MlpWeights::init(&head_specs(3), 5).unwrap();
    pool.publish(&PoolEntry::new("writer", 2, 7, weights.clone())).unwrap();
    let endpoint = format!("file://{}", dir.path().display());
    let list = bin().args(["pool", "list", "--endpoint", &endpoint]).output().unwrap();
    ok(&list);
    let text = String::from_utf8_lossy(&list.stdout);
    assert_eq!(text.trim(), format!("writer\t2\tv7\t{} params", weights.param_count()));
}
