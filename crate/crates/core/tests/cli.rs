use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use nlsql::fixtures::{self, benchmark_tasks, EXCELLENCE_QUESTION};

fn nlsql(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nlsql"))
        .args(args)
        .env("NLSQL_CONFIG", config)
        .env_remove("NLSQL_FALLBACK_TOKEN")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn index_then_query() {
    let dir = tempfile::tempdir().unwrap();
    let ws = fixtures::write_workspace(dir.path()).unwrap();
    let o = nlsql(&ws.config_path, &["index", "schools"]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    assert!(stdout(&o).contains("indexed 8 segments and 2 evidence entries"));
    assert!(ws.databases_root.join("schools/schools.emb.bin").is_file());

    let o = nlsql(&ws.config_path, &["query", "schools", EXCELLENCE_QUESTION]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    let out = stdout(&o);
    assert!(out.contains("Alpha High") && out.contains("Delta Prep"));
    assert!(out.contains("route: local"));
}

#[test]
fn query_json_is_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let ws = fixtures::write_workspace(dir.path()).unwrap();
    let q = benchmark_tasks()[3].question;
    let o = nlsql(&ws.config_path, &["query", "schools", q, "--json"]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 1);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["route"], "fallback");
    assert_eq!(v["fallback_attempts"], 1);
    assert!(v["cost_usd"].as_f64().unwrap() > 0.0);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ws = fixtures::write_workspace(dir.path()).unwrap();

    let o = nlsql(&ws.config_path, &["query", "schools", benchmark_tasks()[4].question]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("generation failure after 3 attempts"));

    let o = nlsql(&ws.config_path, &["query", "no_such_db", "anything"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_db"));

    let o = nlsql(&dir.path().join("missing.toml"), &["index", "schools"]);
    assert_eq!(o.status.code(), Some(1));

    let o = nlsql(&ws.config_path, &["frobnicate"]);
    assert_ne!(o.status.code(), Some(0));

    std::fs::write(dir.path().join("bad.toml"), "databases_root = 3\n").unwrap();
    let o = nlsql(&dir.path().join("bad.toml"), &["index", "schools"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn eval_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let ws = fixtures::write_workspace(dir.path()).unwrap();
    let out_dir = dir.path().join("report");
    let o = nlsql(
        &ws.config_path,
        &["eval", ws.tasks_path.to_str().unwrap(), "--workers", "4", "--out", out_dir.to_str().unwrap()],
    );
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["n_tasks"], 5);
    assert!((report["ex"].as_f64().unwrap() - 0.8).abs() < 1e-12);
    assert!((report["local_fraction"].as_f64().unwrap() - 0.6).abs() < 1e-12);
    let csv = std::fs::read_to_string(out_dir.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn repl_session() {
    let dir = tempfile::tempdir().unwrap();
    let ws = fixtures::write_workspace(dir.path()).unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_nlsql"))
        .args(["repl", "schools"])
        .env("NLSQL_CONFIG", &ws.config_path)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let script = format!("\n{}\n\\cost\n\\q\n", benchmark_tasks()[1].question);
    child.stdin.take().unwrap().write_all(script.as_bytes()).unwrap();
    let o = child.wait_with_output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("SQL: SELECT COUNT(cdscode) FROM schools WHERE charter = 'Y'"));
    assert!(out.contains("session total: $0.0000 over 1 queries"));
}
