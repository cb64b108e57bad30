//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rusqlite::Connection;
use sha2::{Digest, Sha256};

use nlsql::decomposer::parse_plan;
use nlsql::extractor::{build_context, introspect_schema, DocKind, DocSegment, EvidenceEntry, EvidenceMap, VectorStore};
use nlsql::fixtures::{self, benchmark_backends, create_schools_db, schools_evidence, EXCELLENCE_PLAN};
use nlsql::gateway::{scripted_sequence_backend, CostLedger, GenerationParams, Pricing, Role, Route, ScriptedReply, TokenUsage};
use nlsql::generator::{run_ladder, DiagnosticBundle, FinalCandidate, Generators, Origin};
use nlsql::harness::{compare_results, compute_report, has_top_level_order_by, load_tasks, relative_efficiency, run_benchmark, BenchOptions, TaskResult};
use nlsql::model::{DatabaseRegistry, Outcome, Question, ScriptedClock};
use nlsql::pipeline::Pipeline;
use nlsql::prompts::PromptTemplates;
use nlsql::validator::{autocorrect_values, execute_sandboxed, ExecutionOutcome, SandboxLimits, ValidationReport, Value, Verdict};

fn task_result(id: usize, indicator: u8, r: Option<f64>) -> TaskResult {
    TaskResult {
        question_id: id.to_string(),
        db_id: "fixture".into(),
        predicted_sql: Some("SELECT 1".into()),
        indicator,
        e_gold: None,
        e_pred: None,
        r_value: r,
        route: Route::LocalOnly,
        fallback_attempts: 0,
        outcome: Some(Outcome::Success),
        cost: Default::default(),
        error: None,
    }
}

fn metric_oracle() {
    let indicators = [1, 1, 0, 1, 0, 1];
    let rs = [Some(1.0), Some(2.0), None, Some(0.5), None, Some(1.0)];
    let results: Vec<TaskResult> = (0..6).map(|i| task_result(i, indicators[i], rs[i])).collect();
    let report = compute_report(&results, &CostLedger::new()).unwrap();
    assert!((report.ex - 4.0 / 6.0).abs() < 1e-12, "EX = {}", report.ex);
    assert!((report.ves - 0.75).abs() < 1e-12, "VES = {}", report.ves);
}

fn efficiency() {
    let ms = Duration::from_millis;
    let a = relative_efficiency(ms(100), ms(25)).unwrap();
    let b = relative_efficiency(ms(50), ms(200)).unwrap();
    assert!((a - 2.0).abs() < 1e-12, "{a}");
    assert!((b - 0.5).abs() < 1e-12, "{b}");
}

struct Scene {
    _dir: tempfile::TempDir,
    db: std::path::PathBuf,
    context: nlsql::extractor::SchemaContext,
    plan: nlsql::decomposer::DecompositionPlan,
}

fn scene() -> Scene {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("schools.sqlite");
    create_schools_db(&db).unwrap();
    let context = build_context(introspect_schema(&db).unwrap(), Vec::new(), schools_evidence(), Duration::ZERO);
    Scene {
        _dir: dir,
        db,
        context,
        plan: parse_plan(EXCELLENCE_PLAN).unwrap(),
    }
}

fn accept(sql: &str) -> Verdict {
    Verdict::Accepted {
        sql: sql.to_string(),
        outcome: ExecutionOutcome {
            column_names: vec!["x".into()],
            rows: vec![vec![Value::Integer(1)]],
            runtime: Duration::from_millis(1),
            truncated: false,
        },
        report: ValidationReport::default(),
    }
}

fn reject(sql: &str) -> Verdict {
    Verdict::Rejected {
        bundle: DiagnosticBundle {
            execution_errors: vec![format!("rejected {sql}")],
            validation_warnings: Vec::new(),
            failed_sql: sql.to_string(),
        },
        report: ValidationReport::default(),
    }
}

fn fallback_bound() {
    let s = scene();
    let key = "forced rejection question";
    let primary = scripted_sequence_backend("p", Role::PrimaryGenerator, [(key, vec![ScriptedReply::from("SELECT 0")])]);
    let fallback = scripted_sequence_backend(
        "f",
        Role::FallbackGenerator,
        [(key, ["SELECT 1", "SELECT 2", "SELECT 3", "SELECT 4"].map(ScriptedReply::from).to_vec())],
    );
    let templates = PromptTemplates::default();
    let params = GenerationParams::default();
    let gens = Generators {
        primary: &primary,
        fallback: &fallback,
        templates: &templates,
        params: &params,
    };
    let mut validated = Vec::new();
    let q = Question::new(key, "schools");
    let outcome = run_ladder(&q, &s.plan, &s.context, &gens, |sql| {
        validated.push(sql.to_string());
        reject(sql)
    });
    let fallback_calls = outcome.calls.iter().filter(|c| matches!(c.origin, Origin::Fallback { .. })).count();
    assert_eq!(fallback_calls, 3);
    assert_eq!(validated, ["SELECT 0", "SELECT 1", "SELECT 2", "SELECT 3"]);
    assert_eq!(outcome.final_candidate, FinalCandidate::Failure);
    assert_eq!(outcome.attempts_used, 3);
    assert_eq!(outcome.bundle_history.len(), 4);
    let failed: Vec<&str> = outcome.bundle_history.iter().map(|b| b.failed_sql.as_str()).collect();
    assert_eq!(failed, validated);
}

fn dollars(p: Pricing, u: TokenUsage) -> f64 {
    (u.input_tokens as f64 * p.input_per_million + u.output_tokens as f64 * p.output_per_million) / 1e6
}

fn cost_routing() {
    let s = scene();
    let n = 100;
    let question = |i: usize| format!("cost fixture question number {i:03} ?");
    let needs_fallback = |i: usize| i % 3 == 2;
    let primary = scripted_sequence_backend(
        "local-slm",
        Role::PrimaryGenerator,
        (0..n).map(|i| (question(i), vec![ScriptedReply::from(if needs_fallback(i) { "SELECT 'bad'" } else { "SELECT 'ok'" })])),
    );
    let fallback = scripted_sequence_backend(
        "remote-llm",
        Role::FallbackGenerator,
        (0..n).filter(|i| needs_fallback(*i)).map(|i| (question(i), vec![ScriptedReply::from("SELECT 'ok'")])),
    )
    .with_pricing(Pricing::GPT_4O);
    let templates = PromptTemplates::default();
    let params = GenerationParams::default();
    let gens = Generators {
        primary: &primary,
        fallback: &fallback,
        templates: &templates,
        params: &params,
    };

    let mut ledger = CostLedger::new();
    let mut hand_hybrid = 0.0;
    let mut hand_baseline = 0.0;
    let mut local = 0;
    for i in 0..n {
        let id = question(i);
        let q = Question::new(&id, "schools");
        let outcome = run_ladder(&q, &s.plan, &s.context, &gens, |sql| if sql.contains("'ok'") { accept(sql) } else { reject(sql) });
        assert!(outcome.accepted().is_some());
        for call in &outcome.calls {
            let backend = if matches!(call.origin, Origin::Primary) { &primary } else { &fallback };
            ledger.record_usage(&id, backend, call.usage);
            hand_hybrid += dollars(backend.pricing, call.usage);
        }
        hand_baseline += dollars(Pricing::GPT_4, outcome.usage_for(true));
        let route = if outcome.attempts_used == 0 { Route::LocalOnly } else { Route::FallbackUsed };
        local += usize::from(route == Route::LocalOnly);
        ledger.close_query(&id, route);
    }
    assert_eq!(local, 67);
    let measured = ledger.total_cost().dollars();
    assert!((measured - hand_hybrid).abs() < 1e-9, "ledger {measured} vs hand {hand_hybrid}");
    let avg = measured / n as f64;
    let baseline_avg = hand_baseline / n as f64;
    println!("    hybrid ${avg:.6}/query vs baseline ${baseline_avg:.6}/query ({:.2}%)", 100.0 * avg / baseline_avg);
    assert!(avg < 0.10 * baseline_avg);
}

fn autocorrection() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("financial.sqlite");
    let conn = Connection::open(&db).unwrap();
    conn.execute_batch(
        "CREATE TABLE district (district_id INTEGER PRIMARY KEY, A2 TEXT, A3 TEXT);
         INSERT INTO district VALUES (1, 'Jicin', 'east Bohemia'), (2, 'Kolin', 'central Bohemia'), (3, 'Pisek', 'east Bohemia');",
    )
    .unwrap();
    drop(conn);
    let evidence = EvidenceMap {
        entries: vec![EvidenceEntry {
            nl_term: "East Bohemia".into(),
            table: "district".into(),
            column: "A3".into(),
            db_value: "east Bohemia".into(),
        }],
    };
    let sql = "SELECT COUNT(*) FROM district WHERE A3 = 'East Bohemia'";
    let (fixed, corrections) = autocorrect_values(sql, &evidence);
    assert_eq!(fixed, "SELECT COUNT(*) FROM district WHERE A3 = 'east Bohemia'");
    assert_eq!(corrections.len(), 1);
    let out = execute_sandboxed(&fixed, &db, &SandboxLimits::default()).unwrap();
    assert_eq!(out.rows, vec![vec![Value::Integer(2)]]);
    let (again, more) = autocorrect_values(&fixed, &evidence);
    assert_eq!(again, fixed);
    assert!(more.is_empty());
}

fn checksum(path: &Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}

fn sandbox_purity() {
    let s = scene();
    let adversarial = [
        "INSERT INTO schools VALUES ('99', 'Evil', 'Y')",
        "UPDATE schools SET charter = 'N'",
        "DELETE FROM satscores",
        "REPLACE INTO schools VALUES ('01', 'Evil', 'Y')",
        "INSERT INTO schools SELECT cds || 'x', 'dup', 'Y' FROM satscores",
        "WITH x AS (SELECT 1) DELETE FROM schools",
        "DROP TABLE schools",
        "CREATE TABLE evil (x INTEGER)",
        "ALTER TABLE schools ADD COLUMN evil TEXT",
        "CREATE INDEX evil_idx ON schools (sname)",
        "CREATE TRIGGER evil AFTER INSERT ON schools BEGIN DELETE FROM satscores; END",
        "ATTACH DATABASE 'evil.sqlite' AS evil",
        "PRAGMA journal_mode = DELETE",
        "PRAGMA writable_schema = ON",
        "VACUUM",
        "SELECT 1; DELETE FROM schools",
        "BEGIN; DROP TABLE satscores; COMMIT",
        "COMMIT",
        "WITH RECURSIVE r(x) AS (SELECT 1 UNION ALL SELECT x + 1 FROM r) SELECT count(*) FROM r",
        "SELECT count(*) FROM satscores a, satscores b, satscores c, satscores d, satscores e, satscores f, satscores g, satscores h, satscores i, satscores j",
    ];
    assert_eq!(adversarial.len(), 20);
    let limits = SandboxLimits {
        timeout_ms: 300,
        max_rows: 100,
    };
    let before = checksum(&s.db);
    for sql in adversarial {
        let result = execute_sandboxed(sql, &s.db, &limits);
        assert_eq!(checksum(&s.db), before, "checksum changed after {sql}");
        if !sql.starts_with("WITH RECURSIVE") && !sql.starts_with("SELECT count") {
            assert!(result.is_err(), "{sql} was allowed");
        }
    }
    assert_eq!(
        execute_sandboxed("SELECT COUNT(*) FROM schools", &s.db, &limits).unwrap().rows,
        vec![vec![Value::Integer(6)]]
    );
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        if v.iter().any(|x| *x != 0.0) {
            return v;
        }
    }
}

fn brute_force_top(store: &[DocSegment], q: &[f32], k: usize) -> Vec<String> {
    let cos = |a: &[f32], b: &[f32]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
        let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let mut all: Vec<(f64, &str)> = store.iter().map(|s| (cos(q, &s.embedding), s.id.as_str())).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    all.into_iter().take(k).map(|(_, id)| id.to_string()).collect()
}

fn retrieval_equivalence() {
    let dim = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut store = VectorStore::new(dim);
    for i in 0..500 {
        store
            .insert(DocSegment {
                id: format!("seg{i:03}"),
                kind: DocKind::ColumnDefinition,
                text: format!("segment {i}"),
                embedding: random_unit(&mut rng, dim),
            })
            .unwrap();
    }
    for _ in 0..50 {
        let q = random_unit(&mut rng, dim);
        let started = Instant::now();
        let got: Vec<String> = store.retrieve(&q, 10).into_iter().map(|r| r.segment.id).collect();
        assert!(started.elapsed() < Duration::from_secs(1));
        assert_eq!(got, brute_force_top(store.segments(), &q, 10));
    }
}

fn end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let ws = fixtures::write_workspace(dir.path()).unwrap();
    let tasks = load_tasks(&ws.tasks_path).unwrap();
    let run = |workers| {
        let pipeline = Pipeline::new(DatabaseRegistry::scan(&ws.databases_root).unwrap(), benchmark_backends());
        let opts = BenchOptions {
            workers,
            trials: 3,
            ..Default::default()
        };
        run_benchmark(&tasks, &pipeline, &opts, &ScriptedClock::fixed_step(Duration::from_millis(1))).unwrap()
    };
    let one = run(1);
    let four = run(4);
    assert!((one.ex - 0.8).abs() < 1e-12, "EX = {}", one.ex);
    assert!((one.local_fraction - 0.6).abs() < 1e-12, "local = {}", one.local_fraction);
    assert_eq!(one.per_task.iter().filter(|t| t.route == Route::Failed).count(), 1);
    assert_eq!(one, four);
}

fn equality_semantics() {
    let row = |a: i64, b: &str| vec![Value::Integer(a), Value::Text(b.into())];
    let gold = vec![row(1, "a"), row(2, "b"), row(2, "b")];
    let permuted = vec![row(2, "b"), row(1, "a"), row(2, "b")];
    assert_eq!(compare_results(&gold, &permuted, false), 1);
    assert_eq!(compare_results(&gold, &permuted, true), 0);
    assert_eq!(compare_results(&gold, &gold, true), 1);
    assert_eq!(compare_results(&gold, &[row(1, "a"), row(2, "b")], false), 0);
    assert_eq!(compare_results(&gold, &[row(1, "a"), row(1, "a"), row(2, "b")], false), 0);
    assert!(has_top_level_order_by("SELECT a FROM t ORDER BY a DESC LIMIT 3"));
    assert!(!has_top_level_order_by("SELECT a FROM (SELECT a FROM t ORDER BY a)"));
}

fn main() {
    let criteria: [(&str, fn(), Duration); 9] = [
        ("metric oracle: EX and VES", metric_oracle, Duration::from_secs(1)),
        ("relative efficiency", efficiency, Duration::from_secs(1)),
        ("fallback ladder bound", fallback_bound, Duration::from_secs(5)),
        ("cost routing below 10% of baseline", cost_routing, Duration::from_secs(30)),
        ("value autocorrection", autocorrection, Duration::from_secs(1)),
        ("sandbox purity", sandbox_purity, Duration::from_secs(60)),
        ("retrieval equals brute force", retrieval_equivalence, Duration::from_secs(60)),
        ("end-to-end fixture benchmark", end_to_end, Duration::from_secs(30)),
        ("result equality semantics", equality_semantics, Duration::from_secs(1)),
    ];
    let mut failures = BTreeMap::new();
    for (i, (name, check, budget)) in criteria.into_iter().enumerate() {
        let started = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check));
        let elapsed = started.elapsed();
        let verdict = match outcome {
            Ok(()) if elapsed <= budget => Ok(()),
            Ok(()) => Err(format!("took {elapsed:?}, budget {budget:?}")),
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        match verdict {
            Ok(()) => println!("PASS {}: {name} ({elapsed:.2?})", i + 1),
            Err(e) => {
                println!("FAIL {}: {name}: {e}", i + 1);
                failures.insert(i + 1, e);
            }
        }
    }
    if !failures.is_empty() {
        std::process::exit(1);
    }
}
