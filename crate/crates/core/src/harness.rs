//! Benchmark harness: execution accuracy (EX), valid efficiency score (VES),
//! routing fractions and cost per query over BIRD-format task files.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use sqlparser::ast::Statement;
use thiserror::Error;

use crate::gateway::{Cost, CostLedger, Route};
use crate::model::{Clock, Outcome, Question};
use crate::pipeline::Pipeline;
use crate::validator::{parse_sql, Row, Sandbox, SandboxLimits, Value};

pub const NUMERIC_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_TRIALS: usize = 5;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Load { path: PathBuf, message: String },
    #[error("{path}: record {index}: {message}")]
    Record { path: PathBuf, index: usize, message: String },
    #[error("measurement failed: {0}")]
    Measurement(String),
    #[error("runtimes must be positive (gold {gold:?}, predicted {pred:?})")]
    Domain { gold: Duration, pred: Duration },
    #[error("no results to report")]
    EmptyResults,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchTask {
    pub question_id: String,
    pub question: String,
    pub db_id: String,
    pub gold_sql: String,
    pub evidence_hint: Option<String>,
}

impl BenchTask {
    pub fn to_question(&self) -> Question {
        Question {
            text: self.question.clone(),
            db_id: self.db_id.clone(),
            evidence_hint: self.evidence_hint.clone(),
        }
    }
}

/// Read a BIRD-style JSON array of `{question_id, db_id, question, evidence, SQL}`.
///
/// `question_id` defaults to the record index and `evidence` is optional.
pub fn load_tasks(path: &Path) -> Result<Vec<BenchTask>, HarnessError> {
    let text = fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let records: Vec<Json> = serde_json::from_str(&text).map_err(|e| HarnessError::Load {
        path: path.to_path_buf(),
        message: format!("expected a JSON array of task records: {e}"),
    })?;
    records
        .iter()
        .enumerate()
        .map(|(index, rec)| {
            let err = |message: String| HarnessError::Record {
                path: path.to_path_buf(),
                index,
                message,
            };
            let text_field = |name: &str| -> Result<String, HarnessError> {
                match rec.get(name) {
                    Some(Json::String(s)) => Ok(s.clone()),
                    Some(other) => Err(err(format!("field {name:?} must be a string, got {other}"))),
                    None => Err(err(format!("missing field {name:?}"))),
                }
            };
            let question_id = match rec.get("question_id") {
                None => index.to_string(),
                Some(Json::String(s)) => s.clone(),
                Some(Json::Number(n)) => n.to_string(),
                Some(other) => return Err(err(format!("question_id must be a string or number, got {other}"))),
            };
            let evidence_hint = match rec.get("evidence") {
                None | Some(Json::Null) => None,
                Some(Json::String(s)) if s.trim().is_empty() => None,
                Some(Json::String(s)) => Some(s.clone()),
                Some(other) => return Err(err(format!("evidence must be a string, got {other}"))),
            };
            Ok(BenchTask {
                question_id,
                question: text_field("question")?,
                db_id: text_field("db_id")?,
                gold_sql: text_field("SQL")?,
                evidence_hint,
            })
        })
        .collect()
}

fn rank(v: &Value) -> u8 {
    match v {
        Value::Null => 0,
        Value::Integer(_) | Value::Real(_) => 1,
        Value::Text(_) => 2,
        Value::Blob(_) => 3,
    }
}

fn value_cmp(a: &Value, b: &Value) -> Ordering {
    match (a, b) {
        (Value::Text(x), Value::Text(y)) => x.cmp(y),
        (Value::Blob(x), Value::Blob(y)) => x.cmp(y),
        _ => match (a.as_f64(), b.as_f64()) {
            (Some(x), Some(y)) => x.total_cmp(&y),
            _ => rank(a).cmp(&rank(b)),
        },
    }
}

fn values_equal(a: &Value, b: &Value) -> bool {
    match (a.as_f64(), b.as_f64()) {
        (Some(x), Some(y)) => x == y || (x - y).abs() <= NUMERIC_TOLERANCE * x.abs().max(y.abs()),
        _ => a == b,
    }
}

fn row_cmp(a: &Row, b: &Row) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| value_cmp(x, y))
        .find(|o| o.is_ne())
        .unwrap_or_else(|| a.len().cmp(&b.len()))
}

fn rows_equal(a: &Row, b: &Row) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| values_equal(x, y))
}

/// Result-set equality: element-wise when the gold query orders its output,
/// multiset equality otherwise. Numbers match within a relative 1e-6.
pub fn compare_results(gold: &[Row], pred: &[Row], gold_has_order_by: bool) -> u8 {
    if gold.len() != pred.len() {
        return 0;
    }
    let equal = if gold_has_order_by {
        gold.iter().zip(pred).all(|(g, p)| rows_equal(g, p))
    } else {
        let mut g: Vec<&Row> = gold.iter().collect();
        let mut p: Vec<&Row> = pred.iter().collect();
        g.sort_by(|a, b| row_cmp(a, b));
        p.sort_by(|a, b| row_cmp(a, b));
        g.iter().zip(&p).all(|(a, b)| rows_equal(a, b))
    };
    u8::from(equal)
}

/// Whether the outermost query carries an ORDER BY.
pub fn has_top_level_order_by(sql: &str) -> bool {
    match parse_sql(sql).ok().as_deref() {
        Some([Statement::Query(q)]) => q.order_by.is_some(),
        _ => false,
    }
}

/// Median of `trials` timed runs after one discarded warm-up run.
pub fn measure_runtime(sql: &str, db: &Path, trials: usize, clock: &dyn Clock) -> Result<Duration, HarnessError> {
    let sandbox = Sandbox::open(db).map_err(HarnessError::Measurement)?;
    measure_on(&sandbox, sql, trials, clock, &SandboxLimits::default())
}

fn measure_on(sandbox: &Sandbox, sql: &str, trials: usize, clock: &dyn Clock, limits: &SandboxLimits) -> Result<Duration, HarnessError> {
    if trials == 0 {
        return Err(HarnessError::Measurement("trials must be at least 1".into()));
    }
    let timed = || -> Result<Duration, HarnessError> {
        let start = clock.now();
        sandbox.execute(sql, limits).map_err(HarnessError::Measurement)?;
        Ok(clock.now().saturating_sub(start))
    };
    timed()?;
    let mut samples = (0..trials).map(|_| timed()).collect::<Result<Vec<_>, _>>()?;
    samples.sort();
    let mid = samples.len() / 2;
    Ok(if samples.len() % 2 == 1 {
        samples[mid]
    } else {
        (samples[mid - 1] + samples[mid]) / 2
    })
}

/// √(e_gold / e_pred).
pub fn relative_efficiency(e_gold: Duration, e_pred: Duration) -> Result<f64, HarnessError> {
    if e_gold.is_zero() || e_pred.is_zero() {
        return Err(HarnessError::Domain {
            gold: e_gold,
            pred: e_pred,
        });
    }
    Ok((e_gold.as_nanos() as f64 / e_pred.as_nanos() as f64).sqrt())
}

mod opt_ms {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Option<Duration>, s: S) -> Result<S::Ok, S::Error> {
        match d {
            Some(d) => s.serialize_some(&(d.as_secs_f64() * 1e3)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Duration>, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.map(|ms| Duration::from_secs_f64(ms / 1e3)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub question_id: String,
    pub db_id: String,
    pub predicted_sql: Option<String>,
    pub indicator: u8,
    #[serde(rename = "e_gold_ms", with = "opt_ms")]
    pub e_gold: Option<Duration>,
    #[serde(rename = "e_pred_ms", with = "opt_ms")]
    pub e_pred: Option<Duration>,
    pub r_value: Option<f64>,
    pub route: Route,
    pub fallback_attempts: u8,
    pub outcome: Option<Outcome>,
    pub cost: Cost,
    pub error: Option<String>,
}

impl TaskResult {
    fn failed(task: &BenchTask, error: String) -> Self {
        TaskResult {
            question_id: task.question_id.clone(),
            db_id: task.db_id.clone(),
            predicted_sql: None,
            indicator: 0,
            e_gold: None,
            e_pred: None,
            r_value: None,
            route: Route::Failed,
            fallback_attempts: 0,
            outcome: None,
            cost: Cost::ZERO,
            error: Some(error),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub ex: f64,
    pub ves: f64,
    pub n_tasks: usize,
    pub local_fraction: f64,
    pub fallback_fraction: f64,
    pub failed_fraction: f64,
    pub total_cost: Cost,
    /// Dollars.
    pub avg_cost_per_query: f64,
    /// How result sets are compared: "multiset", or ordered when gold has ORDER BY.
    pub comparison: String,
    pub per_task: Vec<TaskResult>,
}

/// Sum in a canonical order so the result does not depend on input order.
fn stable_sum(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs.into_iter().sum()
}

/// Assemble EX, VES, routing fractions and average cost.
///
/// The cost of each task is read from `ledger` by question id.
pub fn compute_report(results: &[TaskResult], ledger: &CostLedger) -> Result<BenchReport, HarnessError> {
    if results.is_empty() {
        return Err(HarnessError::EmptyResults);
    }
    let n = results.len();
    let correct: usize = results.iter().map(|r| usize::from(r.indicator)).sum();
    let ves_sum = stable_sum(
        results
            .iter()
            .filter(|r| r.indicator == 1)
            .map(|r| r.r_value.unwrap_or(0.0))
            .collect(),
    );
    let count = |route: Route| results.iter().filter(|r| r.route == route).count() as f64 / n as f64;
    let per_task: Vec<TaskResult> = results
        .iter()
        .map(|r| TaskResult {
            cost: ledger.query_cost(&r.question_id),
            ..r.clone()
        })
        .collect();
    let total_cost: Cost = per_task.iter().map(|r| r.cost).sum();
    Ok(BenchReport {
        ex: correct as f64 / n as f64,
        ves: ves_sum / n as f64,
        n_tasks: n,
        local_fraction: count(Route::LocalOnly),
        fallback_fraction: count(Route::FallbackUsed),
        failed_fraction: count(Route::Failed),
        total_cost,
        avg_cost_per_query: total_cost.dollars() / n as f64,
        comparison: "multiset".into(),
        per_task,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchOptions {
    pub workers: usize,
    pub trials: usize,
    pub limits: SandboxLimits,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            workers: 1,
            trials: DEFAULT_TRIALS,
            limits: SandboxLimits::default(),
        }
    }
}

fn run_task(task: &BenchTask, pipeline: &Pipeline, opts: &BenchOptions, clock: &dyn Clock, db_lock: &Mutex<()>) -> TaskResult {
    let run = match pipeline.run(&task.question_id, &task.to_question()) {
        Ok(run) => run,
        Err(e) => return TaskResult::failed(task, e.to_string()),
    };
    let r = &run.result;
    let mut out = TaskResult {
        predicted_sql: r.sql.clone(),
        route: r.route,
        fallback_attempts: r.fallback_attempts,
        outcome: Some(r.outcome),
        cost: r.cost,
        error: r.error.clone(),
        ..TaskResult::failed(task, String::new())
    };

    let db = match pipeline.registry().resolve(&task.db_id) {
        Ok(p) => p,
        Err(e) => {
            out.error = Some(e.to_string());
            return out;
        }
    };
    let _guard = db_lock.lock().unwrap_or_else(|p| p.into_inner());
    let sandbox = match Sandbox::open(db) {
        Ok(s) => s,
        Err(e) => {
            out.error = Some(format!("cannot open database: {e}"));
            return out;
        }
    };
    let gold = match sandbox.execute(&task.gold_sql, &opts.limits) {
        Ok(g) => g,
        Err(e) => {
            out.error = Some(format!("gold SQL failed: {e}"));
            return out;
        }
    };
    match measure_on(&sandbox, &task.gold_sql, opts.trials, clock, &opts.limits) {
        Ok(d) => out.e_gold = Some(d),
        Err(e) => {
            out.error = Some(format!("gold SQL timing failed: {e}"));
            return out;
        }
    }
    let (Some(sql), Some(rows)) = (r.sql.as_deref(), r.rows.as_deref()) else {
        return out;
    };
    if r.truncated || gold.truncated {
        out.error = Some("result truncated by the sandbox row cap; not compared".into());
        return out;
    }
    if compare_results(&gold.rows, rows, has_top_level_order_by(&task.gold_sql)) == 0 {
        return out;
    }
    let scored = measure_on(&sandbox, sql, opts.trials, clock, &opts.limits)
        .and_then(|e_pred| Ok((e_pred, relative_efficiency(out.e_gold.unwrap_or_default(), e_pred)?)));
    match scored {
        Ok((e_pred, rv)) => {
            out.indicator = 1;
            out.e_pred = Some(e_pred);
            out.r_value = Some(rv);
        }
        Err(e) => out.error = Some(format!("predicted SQL timing failed: {e}")),
    }
    out
}

/// Run every task through a fresh-ledger copy of `pipeline` on a pool of
/// `opts.workers` threads. Timing runs are serialized per database.
pub fn run_benchmark(tasks: &[BenchTask], pipeline: &Pipeline, opts: &BenchOptions, clock: &dyn Clock) -> Result<BenchReport, HarnessError> {
    let pipeline = pipeline.fresh_ledger();
    let locks: HashMap<&str, Mutex<()>> = tasks.iter().map(|t| (t.db_id.as_str(), Mutex::new(()))).collect();
    let slots: Mutex<Vec<Option<TaskResult>>> = Mutex::new(vec![None; tasks.len()]);
    let next = AtomicUsize::new(0);
    let workers = opts.workers.clamp(1, tasks.len().max(1));
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, AtomicOrdering::Relaxed);
                let Some(task) = tasks.get(i) else { break };
                let result = run_task(task, &pipeline, opts, clock, &locks[task.db_id.as_str()]);
                slots.lock().unwrap_or_else(|p| p.into_inner())[i] = Some(result);
            });
        }
    });
    let results: Vec<TaskResult> = slots
        .into_inner()
        .unwrap_or_else(|p| p.into_inner())
        .into_iter()
        .map(|r| r.expect("every task slot is filled"))
        .collect();
    let ledger = pipeline.ledger();
    let ledger = ledger.lock().unwrap_or_else(|p| p.into_inner());
    compute_report(&results, &ledger)
}

/// Write `report.json` and `report.csv` into `dir`.
pub fn write_report(report: &BenchReport, dir: &Path) -> Result<(PathBuf, PathBuf), HarnessError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| HarnessError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let json_path = dir.join("report.json");
    let json = serde_json::to_string_pretty(report).map_err(|e| HarnessError::Load {
        path: json_path.clone(),
        message: e.to_string(),
    })?;
    fs::write(&json_path, json).map_err(io_err(&json_path))?;

    let csv_path = dir.join("report.csv");
    let csv_err = |e: csv::Error| HarnessError::Load {
        path: csv_path.clone(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(&csv_path).map_err(csv_err)?;
    w.write_record(["question_id", "indicator", "r_value", "route", "cost", "e_gold_ms", "e_pred_ms"])
        .map_err(csv_err)?;
    let ms = |d: Option<Duration>| d.map(|d| format!("{:.3}", d.as_secs_f64() * 1e3)).unwrap_or_default();
    for t in &report.per_task {
        w.write_record([
            t.question_id.clone(),
            t.indicator.to_string(),
            t.r_value.map(|r| format!("{r:.6}")).unwrap_or_default(),
            t.route.to_string(),
            format!("{:.6}", t.cost.dollars()),
            ms(t.e_gold),
            ms(t.e_pred),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(io_err(&csv_path))?;
    Ok((json_path, csv_path))
}

/// Terminal summary: EX %, VES %, routing and cost per query.
pub fn summary_table(report: &BenchReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<8} {:>8} {:>8} {:>8} {:>10} {:>8} {:>14}", "Tasks", "EX %", "VES %", "Local %", "Fallback %", "Failed %", "Cost/query $");
    let _ = writeln!(
        s,
        "{:<8} {:>8.2} {:>8.2} {:>8.2} {:>10.2} {:>8.2} {:>14.6}",
        report.n_tasks,
        report.ex * 100.0,
        report.ves * 100.0,
        report.local_fraction * 100.0,
        report.fallback_fraction * 100.0,
        report.failed_fraction * 100.0,
        report.avg_cost_per_query
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::model::ScriptedClock;
    use proptest::prelude::*;

    fn ms(n: u64) -> Duration {
        Duration::from_millis(n)
    }

    fn t(s: &str) -> Value {
        Value::Text(s.into())
    }

    fn i(n: i64) -> Value {
        Value::Integer(n)
    }

    fn result(id: &str, indicator: u8, r: Option<f64>, route: Route) -> TaskResult {
        TaskResult {
            question_id: id.into(),
            db_id: "db".into(),
            predicted_sql: (indicator == 1).then(|| "SELECT 1".into()),
            indicator,
            e_gold: Some(ms(10)),
            e_pred: r.map(|_| ms(10)),
            r_value: r,
            route,
            fallback_attempts: 0,
            outcome: None,
            cost: Cost::ZERO,
            error: None,
        }
    }

    #[test]
    fn load_tasks_contract() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.json");
        fs::write(
            &p,
            r#"[{"question_id": 7, "db_id": "a", "question": "q1", "evidence": "", "SQL": "SELECT 1"},
                {"question_id": "x", "db_id": "a", "question": "q2", "evidence": "hint", "SQL": "SELECT 2"},
                {"db_id": "b", "question": "q3", "SQL": "SELECT 3"}]"#,
        )
        .unwrap();
        let tasks = load_tasks(&p).unwrap();
        assert_eq!(tasks.len(), 3);
        assert_eq!(tasks[0].question_id, "7");
        assert_eq!(tasks[0].evidence_hint, None);
        assert_eq!(tasks[1].evidence_hint.as_deref(), Some("hint"));
        assert_eq!(tasks[2].question_id, "2");

        fs::write(&p, r#"[{"db_id": "a", "question": "q", "SQL": "S"}, {"db_id": "a", "question": "q"}]"#).unwrap();
        match load_tasks(&p).unwrap_err() {
            HarnessError::Record { index, message, .. } => {
                assert_eq!(index, 1);
                assert!(message.contains("SQL"));
            }
            e => panic!("{e}"),
        }
        fs::write(&p, "[]").unwrap();
        assert!(load_tasks(&p).unwrap().is_empty());
    }

    #[test]
    fn comparison_examples() {
        let gold = vec![vec![t("A"), i(1)], vec![t("B"), i(2)]];
        let pred = vec![vec![t("B"), i(2)], vec![t("A"), i(1)]];
        assert_eq!(compare_results(&gold, &pred, false), 1);
        assert_eq!(compare_results(&gold, &pred, true), 0);
        assert_eq!(compare_results(&[vec![i(1)]], &[vec![i(1)], vec![i(1)]], false), 0);
        assert_eq!(compare_results(&[vec![i(1)], vec![i(1)], vec![i(2)]], &[vec![i(1)], vec![i(2)], vec![i(2)]], false), 0);
        assert_eq!(compare_results(&[vec![Value::Real(0.1 + 0.2)]], &[vec![Value::Real(0.3)]], false), 1);
        assert_eq!(compare_results(&[vec![Value::Real(1.0)]], &[vec![i(1)]], false), 1);
        assert_eq!(compare_results(&[vec![Value::Real(1.0)]], &[vec![Value::Real(1.00001)]], false), 0);
        assert_eq!(compare_results(&[vec![Value::Null]], &[vec![Value::Null]], false), 1);
        assert_eq!(compare_results(&[vec![Value::Null]], &[vec![i(0)]], false), 0);
        assert_eq!(compare_results(&[vec![t("1")]], &[vec![i(1)]], false), 0);
    }

    #[test]
    fn equivalent_queries_on_fixture_compare_equal() {
        let dir = tempfile::tempdir().unwrap();
        let db = dir.path().join("s.sqlite");
        fixtures::create_schools_db(&db).unwrap();
        let limits = SandboxLimits::default();
        let run = |sql: &str| crate::validator::execute_sandboxed(sql, &db, &limits).unwrap().rows;
        let gold = run(fixtures::EXCELLENCE_SQL);
        let pred = run(
            "SELECT s.sname FROM schools s, satscores t WHERE s.cdscode = t.cds AND s.charter = 'Y' \
             AND t.numge1500 * 1.0 / t.numtsttakr > (SELECT AVG(numge1500 * 1.0 / numtsttakr) FROM satscores) ORDER BY s.sname DESC",
        );
        assert_eq!(gold.len(), 2);
        assert_eq!(compare_results(&gold, &pred, has_top_level_order_by(fixtures::EXCELLENCE_SQL)), 1);
    }

    #[test]
    fn order_by_detection() {
        assert!(has_top_level_order_by("SELECT a FROM t ORDER BY a"));
        assert!(!has_top_level_order_by("SELECT a FROM t WHERE a IN (SELECT b FROM u ORDER BY b LIMIT 1)"));
        assert!(!has_top_level_order_by("SELECT a FROM t"));
    }

    #[test]
    fn runtime_median_with_fake_clock() {
        let dir = tempfile::tempdir().unwrap();
        let db = dir.path().join("s.sqlite");
        fixtures::create_schools_db(&db).unwrap();
        let clock = ScriptedClock::spans([ms(10), ms(20), ms(30), ms(40)]);
        assert_eq!(measure_runtime("SELECT 1", &db, 3, &clock).unwrap(), ms(30));
        let clock = ScriptedClock::spans([ms(10), ms(25)]);
        assert_eq!(measure_runtime("SELECT 1", &db, 1, &clock).unwrap(), ms(25));
        let real = crate::model::SystemClock::default();
        assert!(measure_runtime("SELECT 1", &db, 1, &real).unwrap() > Duration::ZERO);
        assert!(measure_runtime("SELECT nope FROM schools", &db, 1, &real).is_err());
    }

    #[test]
    fn relative_efficiency_examples() {
        assert_eq!(relative_efficiency(ms(40), ms(40)).unwrap(), 1.0);
        assert_eq!(relative_efficiency(ms(100), ms(25)).unwrap(), 2.0);
        assert_eq!(relative_efficiency(ms(50), ms(200)).unwrap(), 0.5);
        assert!(matches!(relative_efficiency(Duration::ZERO, ms(1)), Err(HarnessError::Domain { .. })));
    }

    #[test]
    fn report_examples() {
        let ledger = CostLedger::new();
        let rs = [
            result("a", 1, Some(1.0), Route::LocalOnly),
            result("b", 0, None, Route::Failed),
            result("c", 1, Some(1.0), Route::FallbackUsed),
        ];
        let r = compute_report(&rs, &ledger).unwrap();
        assert_eq!(r.ex, 2.0 / 3.0);
        assert_eq!(r.ves, 2.0 / 3.0);
        assert_eq!(r.local_fraction, 1.0 / 3.0);
        let rs = [result("a", 1, Some(2.0), Route::LocalOnly), result("b", 0, None, Route::Failed)];
        let r = compute_report(&rs, &ledger).unwrap();
        assert_eq!((r.ex, r.ves), (0.5, 1.0));
        assert!(matches!(compute_report(&[], &ledger), Err(HarnessError::EmptyResults)));
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        let r = compute_report(&[result("a,1", 1, Some(1.0), Route::LocalOnly)], &CostLedger::new()).unwrap();
        let (j, c) = write_report(&r, dir.path()).unwrap();
        let back: BenchReport = serde_json::from_str(&fs::read_to_string(j).unwrap()).unwrap();
        assert_eq!(back.ex, 1.0);
        let csv = fs::read_to_string(c).unwrap();
        assert!(csv.starts_with("question_id,indicator,r_value,route,cost,e_gold_ms,e_pred_ms\n"));
        assert!(csv.contains("\"a,1\",1,1.000000,local,"));
        assert!(summary_table(&r).contains("100.00"));
    }

    fn arb_value() -> impl Strategy<Value = Value> {
        prop_oneof![
            Just(Value::Null),
            (-5i64..5).prop_map(Value::Integer),
            (-5i64..5).prop_map(|x| Value::Real(x as f64 / 2.0)),
            "[ab]{0,2}".prop_map(Value::Text),
        ]
    }

    proptest! {
        #[test]
        fn permuted_rows_compare_equal(rows in proptest::collection::vec(proptest::collection::vec(arb_value(), 2), 0..12), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = rows.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(compare_results(&rows, &shuffled, false), 1);
            prop_assert_eq!(compare_results(&rows, &rows, true), 1);
            if !rows.is_empty() {
                prop_assert_eq!(compare_results(&rows, &rows[1..], false), 0);
            }
        }

        #[test]
        fn report_is_permutation_invariant(
            entries in proptest::collection::vec((0u8..2, 0.1f64..4.0, 0usize..3), 1..30),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let routes = [Route::LocalOnly, Route::FallbackUsed, Route::Failed];
            let rs: Vec<TaskResult> = entries
                .iter()
                .enumerate()
                .map(|(k, &(ind, r, route))| result(&k.to_string(), ind, (ind == 1).then_some(r), routes[route]))
                .collect();
            let mut shuffled = rs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let ledger = CostLedger::new();
            let a = compute_report(&rs, &ledger).unwrap();
            let b = compute_report(&shuffled, &ledger).unwrap();
            prop_assert_eq!(a.ex.to_bits(), b.ex.to_bits());
            prop_assert_eq!(a.ves.to_bits(), b.ves.to_bits());
            prop_assert!((0.0..=1.0).contains(&a.ex));
            prop_assert!(a.ves >= 0.0);
            let all_one: Vec<TaskResult> = rs.iter().map(|r| TaskResult { r_value: r.r_value.map(|_| 1.0), ..r.clone() }).collect();
            let c = compute_report(&all_one, &ledger).unwrap();
            prop_assert_eq!(c.ves, c.ex);
        }
    }
}
