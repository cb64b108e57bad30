//! Command implementations behind the `nlsql` binary.
//!
//! Configuration comes from a TOML file, then `NLSQL_*` environment
//! variables, then command-line flags. The fallback token is only ever read
//! from `NLSQL_FALLBACK_TOKEN`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extractor::{build_index_cache, RetrievalConfig};
use crate::gateway::{scripted_sequence_backend, BackendSpec, Cost, Endpoint, Pricing, Role, ScriptedReply, TokenUsage, DEFAULT_EMBEDDING_DIM};
use crate::generator::DiagnosticBundle;
use crate::harness::{load_tasks, run_benchmark, summary_table, write_report, BenchOptions, DEFAULT_TRIALS};
use crate::model::{DatabaseRegistry, Outcome, Question, SystemClock};
use crate::pipeline::{Backends, Pipeline, PipelineConfig, QueryRun};
use crate::prompts::PromptTemplates;
use crate::validator::{Row, SandboxLimits, ValidationPolicy};

pub const FALLBACK_TOKEN_ENV: &str = "NLSQL_FALLBACK_TOKEN";
pub const CONFIG_ENV: &str = "NLSQL_CONFIG";
pub const DEFAULT_CONFIG_PATH: &str = "nlsql.toml";
pub const DISPLAY_ROW_CAP: usize = 50;

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Success = 0,
    Usage = 1,
    GenerationFailure = 2,
    Setup = 3,
}

#[derive(Debug, Error)]
pub enum AppError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Setup(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl AppError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            AppError::Config(_) => ExitCode::Usage,
            AppError::Setup(_) | AppError::Io(_) => ExitCode::Setup,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Chat-completion / embeddings server.
    Http,
    /// Replies read from a JSON fixture file.
    Scripted,
    /// Deterministic hash embedder.
    Hash,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub name: String,
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixtures: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_ms: Option<u64>,
    #[serde(default)]
    pub pricing: Pricing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub trials: usize,
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            trials: DEFAULT_TRIALS,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppConfig {
    pub databases_root: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompts_dir: Option<PathBuf>,
    #[serde(default)]
    pub strict_semantic: bool,
    #[serde(default)]
    pub backends: BTreeMap<Role, BackendConfig>,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub sandbox: SandboxLimits,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn parse_env<T: std::str::FromStr>(name: &str, raw: &str) -> Result<T, AppError> {
    raw.trim()
        .parse()
        .map_err(|_| AppError::Config(format!("{name}={raw:?} is not a valid value")))
}

impl AppConfig {
    pub fn from_toml(text: &str) -> Result<Self, AppError> {
        toml::from_str(text).map_err(|e| AppError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String, AppError> {
        toml::to_string(self).map_err(|e| AppError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, AppError> {
        let text = fs::read_to_string(path)
            .map_err(|e| AppError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| AppError::Config(format!("{}: {e}", path.display())))?;
        if let Some(base) = path.parent() {
            cfg.resolve_relative(base);
        }
        Ok(cfg)
    }

    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.databases_root);
        if let Some(p) = self.prompts_dir.as_mut() {
            fix(p);
        }
        for b in self.backends.values_mut() {
            if let Some(p) = b.fixtures.as_mut() {
                fix(p);
            }
        }
    }

    /// Apply `NLSQL_*` overrides read through `var`.
    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<(), AppError> {
        if let Some(v) = var("NLSQL_DATABASES_ROOT") {
            self.databases_root = PathBuf::from(v);
        }
        if let Some(v) = var("NLSQL_PROMPTS_DIR") {
            self.prompts_dir = Some(PathBuf::from(v));
        }
        if let Some(v) = var("NLSQL_STRICT_SEMANTIC") {
            self.strict_semantic = parse_env("NLSQL_STRICT_SEMANTIC", &v)?;
        }
        if let Some(v) = var("NLSQL_EVAL_WORKERS") {
            self.eval.workers = parse_env("NLSQL_EVAL_WORKERS", &v)?;
        }
        if let Some(v) = var("NLSQL_EVAL_TRIALS") {
            self.eval.trials = parse_env("NLSQL_EVAL_TRIALS", &v)?;
        }
        if let Some(v) = var("NLSQL_SANDBOX_TIMEOUT_MS") {
            self.sandbox.timeout_ms = parse_env("NLSQL_SANDBOX_TIMEOUT_MS", &v)?;
        }
        if let Some(v) = var("NLSQL_SANDBOX_MAX_ROWS") {
            self.sandbox.max_rows = parse_env("NLSQL_SANDBOX_MAX_ROWS", &v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), AppError> {
        let bad = |m: String| Err(AppError::Config(m));
        for role in Role::ALL {
            let Some(b) = self.backends.get(&role) else {
                return bad(format!("no backend bound to role {}", role_key(role)));
            };
            if let Err(e) = b.pricing.validate() {
                return bad(format!("backend {}: {e}", b.name));
            }
            match (b.kind, role) {
                (BackendKind::Hash, r) if r != Role::Embedder => {
                    return bad(format!("backend {}: hash backends can only embed", b.name));
                }
                (BackendKind::Scripted, Role::Embedder) => {
                    return bad(format!("backend {}: scripted backends cannot embed", b.name));
                }
                (BackendKind::Http, _) if b.url.is_none() || b.model.is_none() => {
                    return bad(format!("backend {}: http backends need url and model", b.name));
                }
                (BackendKind::Scripted, _) if b.fixtures.is_none() => {
                    return bad(format!("backend {}: scripted backends need a fixtures file", b.name));
                }
                _ => {}
            }
        }
        let (a, b) = self.retrieval.blend_weights;
        if !(a >= 0.0 && b >= 0.0 && (a + b - 1.0).abs() < 1e-9) {
            return bad(format!("retrieval.blend_weights must be non-negative and sum to 1, got ({a}, {b})"));
        }
        if self.retrieval.keep == 0 || self.retrieval.k == 0 {
            return bad("retrieval.k and retrieval.keep must be positive".into());
        }
        if self.eval.trials == 0 || self.eval.workers == 0 {
            return bad("eval.trials and eval.workers must be positive".into());
        }
        if self.sandbox.max_rows == 0 || self.sandbox.timeout_ms == 0 {
            return bad("sandbox.timeout_ms and sandbox.max_rows must be positive".into());
        }
        Ok(())
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            retrieval: self.retrieval.clone(),
            validation: ValidationPolicy {
                limits: self.sandbox,
                strict_semantic: self.strict_semantic,
            },
            generation: Default::default(),
        }
    }
}

fn role_key(role: Role) -> &'static str {
    match role {
        Role::Decomposer => "decomposer",
        Role::PrimaryGenerator => "primary_generator",
        Role::FallbackGenerator => "fallback_generator",
        Role::Embedder => "embedder",
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    Many(Vec<ScriptedReply>),
    One(ScriptedReply),
}

fn load_scripted(path: &Path) -> Result<BTreeMap<String, Vec<ScriptedReply>>, AppError> {
    let text = fs::read_to_string(path)
        .map_err(|e| AppError::Setup(format!("cannot read fixtures {}: {e}", path.display())))?;
    let raw: BTreeMap<String, OneOrMany> =
        serde_json::from_str(&text).map_err(|e| AppError::Config(format!("{}: {e}", path.display())))?;
    let map: BTreeMap<String, Vec<ScriptedReply>> = raw
        .into_iter()
        .map(|(k, v)| {
            let replies = match v {
                OneOrMany::Many(v) => v,
                OneOrMany::One(r) => vec![r],
            };
            (k, replies)
        })
        .filter(|(_, v)| !v.is_empty())
        .collect();
    if map.is_empty() {
        return Err(AppError::Config(format!("{}: no fixtures", path.display())));
    }
    Ok(map)
}

/// Turn one configured backend into a [`BackendSpec`].
pub fn build_backend(role: Role, cfg: &BackendConfig, token: Option<&str>) -> Result<BackendSpec, AppError> {
    let mut spec = match cfg.kind {
        BackendKind::Http => BackendSpec::http(
            &cfg.name,
            role,
            cfg.url.as_deref().unwrap_or_default(),
            cfg.model.as_deref().unwrap_or_default(),
            cfg.pricing,
        ),
        BackendKind::Scripted => {
            let path = cfg
                .fixtures
                .as_deref()
                .ok_or_else(|| AppError::Config(format!("backend {}: missing fixtures", cfg.name)))?;
            scripted_sequence_backend(&cfg.name, role, load_scripted(path)?).with_pricing(cfg.pricing)
        }
        BackendKind::Hash => BackendSpec::hash_embedder(&cfg.name, cfg.dim.unwrap_or(DEFAULT_EMBEDDING_DIM)),
    };
    if let Some(ms) = cfg.timeout_ms {
        spec = spec.with_timeout(Duration::from_millis(ms));
    }
    if role == Role::FallbackGenerator && matches!(spec.endpoint, Endpoint::Http { .. }) {
        spec = spec.with_api_key(token.map(str::to_string));
    }
    Ok(spec)
}

/// A configured pipeline plus the settings the commands need.
#[derive(Debug, Clone)]
pub struct App {
    pub config: AppConfig,
    pub pipeline: Pipeline,
}

impl App {
    pub fn new(config: AppConfig, fallback_token: Option<&str>) -> Result<Self, AppError> {
        config.validate()?;
        let backend = |role: Role| build_backend(role, &config.backends[&role], fallback_token);
        let backends = Backends {
            decomposer: backend(Role::Decomposer)?,
            primary: backend(Role::PrimaryGenerator)?,
            fallback: backend(Role::FallbackGenerator)?,
            embedder: backend(Role::Embedder)?,
        };
        let registry = if config.databases_root.is_dir() {
            DatabaseRegistry::scan(&config.databases_root).map_err(|e| AppError::Setup(e.to_string()))?
        } else {
            DatabaseRegistry::new()
        };
        let templates = match &config.prompts_dir {
            Some(dir) => PromptTemplates::load_dir(dir)?,
            None => PromptTemplates::default(),
        };
        let pipeline = Pipeline::new(registry, backends)
            .with_templates(templates)
            .with_config(config.pipeline_config());
        Ok(App { config, pipeline })
    }

    /// Error naming `db_id` unless `<root>/<db_id>/<db_id>.sqlite` exists.
    fn require_db(&self, db_id: &str) -> Result<(), AppError> {
        self.pipeline.registry().resolve(db_id).map(|_| ()).map_err(|_| {
            AppError::Setup(format!(
                "database {db_id:?} not found (expected {})",
                self.config.databases_root.join(db_id).join(format!("{db_id}.sqlite")).display()
            ))
        })
    }
}

/// Render rows as an aligned text table, showing at most `cap` rows.
pub fn format_table(columns: &[String], rows: &[Row], cap: usize) -> String {
    let shown = &rows[..rows.len().min(cap)];
    let cells: Vec<Vec<String>> = shown.iter().map(|r| r.iter().map(|v| v.to_string()).collect()).collect();
    let mut widths: Vec<usize> = columns.iter().map(|c| c.chars().count()).collect();
    for row in &cells {
        for (i, c) in row.iter().enumerate() {
            if i < widths.len() {
                widths[i] = widths[i].max(c.chars().count());
            }
        }
    }
    let line = |vals: &[String]| -> String {
        vals.iter()
            .enumerate()
            .map(|(i, v)| format!("{:<w$}", v, w = widths.get(i).copied().unwrap_or(0)))
            .collect::<Vec<_>>()
            .join(" | ")
            .trim_end()
            .to_string()
    };
    let mut out = String::new();
    let _ = writeln!(out, "{}", line(columns));
    let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
    for row in &cells {
        let _ = writeln!(out, "{}", line(row));
    }
    if rows.len() > cap {
        let _ = writeln!(out, "… {} more rows", rows.len() - cap);
    }
    let _ = writeln!(out, "({} row{})", rows.len(), if rows.len() == 1 { "" } else { "s" });
    out
}

fn format_bundle(b: &DiagnosticBundle) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "last rejected SQL: {}", b.failed_sql);
    for e in &b.execution_errors {
        let _ = writeln!(s, "  error: {e}");
    }
    for w in &b.validation_warnings {
        let _ = writeln!(s, "  warning: {w}");
    }
    s
}

#[derive(Serialize)]
struct QueryJson<'a> {
    query_id: &'a str,
    db_id: &'a str,
    question: &'a str,
    outcome: Outcome,
    sql: Option<&'a str>,
    columns: &'a [String],
    rows: Option<&'a [Row]>,
    route: String,
    fallback_attempts: u8,
    cost_usd: f64,
    usage: &'a BTreeMap<String, TokenUsage>,
    error: Option<&'a str>,
    last_bundle: Option<&'a DiagnosticBundle>,
}

fn exit_for(outcome: Outcome) -> ExitCode {
    match outcome {
        Outcome::Success => ExitCode::Success,
        Outcome::GenerationFailure | Outcome::DecompositionFailure => ExitCode::GenerationFailure,
        Outcome::ExtractionFailure => ExitCode::Setup,
    }
}

fn print_run(run: &QueryRun, question: &Question, json: bool, out: &mut dyn Write) -> std::io::Result<()> {
    let r = &run.result;
    if json {
        let obj = QueryJson {
            query_id: &run.query_id,
            db_id: &question.db_id,
            question: &question.text,
            outcome: r.outcome,
            sql: r.sql.as_deref(),
            columns: &r.column_names,
            rows: r.rows.as_deref(),
            route: r.route.to_string(),
            fallback_attempts: r.fallback_attempts,
            cost_usd: r.cost.dollars(),
            usage: &r.usage,
            error: r.error.as_deref(),
            last_bundle: run.last_bundle(),
        };
        let line = serde_json::to_string(&obj).map_err(std::io::Error::other)?;
        return writeln!(out, "{line}");
    }
    match r.outcome {
        Outcome::Success => {
            writeln!(out, "SQL: {}", r.sql.as_deref().unwrap_or_default())?;
            write!(out, "{}", format_table(&r.column_names, r.rows.as_deref().unwrap_or_default(), DISPLAY_ROW_CAP))?;
            if r.truncated {
                writeln!(out, "(result truncated by the sandbox row cap)")?;
            }
        }
        Outcome::GenerationFailure => {
            writeln!(out, "generation failure after {} attempts", r.fallback_attempts)?;
            if let Some(b) = run.last_bundle() {
                write!(out, "{}", format_bundle(b))?;
            }
        }
        _ => writeln!(out, "{}", r.error.as_deref().unwrap_or("failed"))?,
    }
    writeln!(out, "route: {} ({} fallback attempts)", r.route, r.fallback_attempts)?;
    writeln!(out, "cost: {}", r.cost)
}

/// Embed the docs of `db_id` and write `<db_id>.emb.bin`.
pub fn cmd_index(app: &App, db_id: &str, out: &mut dyn Write) -> Result<ExitCode, AppError> {
    app.require_db(db_id)?;
    let files = app.pipeline.files(db_id).map_err(|e| AppError::Setup(e.to_string()))?;
    let summary = build_index_cache(&files, &app.pipeline.backends().embedder).map_err(|e| AppError::Setup(e.to_string()))?;
    for w in &summary.warnings {
        writeln!(out, "warning: {w}")?;
    }
    writeln!(
        out,
        "indexed {} segments and {} evidence entries into {}",
        summary.segments,
        summary.evidence_entries,
        summary.cache_path.display()
    )?;
    Ok(ExitCode::Success)
}

/// Answer one question and print SQL, rows, route and cost.
pub fn cmd_query(app: &App, db_id: &str, question: &str, json: bool, out: &mut dyn Write) -> Result<ExitCode, AppError> {
    app.require_db(db_id)?;
    let q = Question::new(question, db_id);
    let run = app.pipeline.run("query-1", &q).map_err(|e| AppError::Config(e.to_string()))?;
    print_run(&run, &q, json, out)?;
    Ok(exit_for(run.result.outcome))
}

/// Run a benchmark file and write `report.json` / `report.csv` into `out_dir`.
pub fn cmd_eval(app: &App, tasks_file: &Path, workers: Option<usize>, out_dir: &Path, out: &mut dyn Write) -> Result<ExitCode, AppError> {
    let tasks = load_tasks(tasks_file).map_err(|e| AppError::Setup(e.to_string()))?;
    for t in &tasks {
        app.require_db(&t.db_id)?;
    }
    let opts = BenchOptions {
        workers: workers.unwrap_or(app.config.eval.workers).max(1),
        trials: app.config.eval.trials,
        limits: app.config.sandbox,
    };
    if tasks.is_empty() {
        writeln!(out, "no tasks in {}", tasks_file.display())?;
        return Ok(ExitCode::Success);
    }
    let report = run_benchmark(&tasks, &app.pipeline, &opts, &SystemClock::default()).map_err(|e| AppError::Setup(e.to_string()))?;
    let (json, csv) = write_report(&report, out_dir).map_err(|e| AppError::Setup(e.to_string()))?;
    write!(out, "{}", summary_table(&report))?;
    writeln!(out, "wrote {} and {}", json.display(), csv.display())?;
    Ok(ExitCode::Success)
}

/// Interactive loop: one question per line, `\cost` for the session ledger, `\q` to quit.
pub fn cmd_repl(app: &App, db_id: &str, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<ExitCode, AppError> {
    app.require_db(db_id)?;
    let pipeline = app.pipeline.fresh_ledger();
    let mut n = 0usize;
    let mut line = String::new();
    loop {
        write!(out, "nlsql> ")?;
        out.flush()?;
        line.clear();
        if input.read_line(&mut line)? == 0 {
            writeln!(out)?;
            break;
        }
        let text = line.trim();
        match text {
            "" => continue,
            "\\q" => break,
            "\\cost" => {
                let ledger = pipeline.ledger();
                let ledger = ledger.lock().unwrap_or_else(|p| p.into_inner());
                for q in ledger.per_query() {
                    writeln!(out, "{}  {:<8}  {}", q.query_id, q.route.to_string(), q.cost)?;
                }
                let total: Cost = ledger.total_cost();
                writeln!(out, "session total: {total} over {} queries", ledger.per_query().len())?;
            }
            question => {
                n += 1;
                let q = Question::new(question, db_id);
                match pipeline.run(&format!("repl-{n}"), &q) {
                    Ok(run) => print_run(&run, &q, false, out)?,
                    Err(e) => writeln!(out, "error: {e}")?,
                }
            }
        }
    }
    Ok(ExitCode::Success)
}

/// Locate and load the configuration: explicit path, then `NLSQL_CONFIG`, then `./nlsql.toml`.
pub fn load_config(explicit: Option<&Path>, var: impl Fn(&str) -> Option<String>) -> Result<AppConfig, AppError> {
    let path = explicit
        .map(Path::to_path_buf)
        .or_else(|| var(CONFIG_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_CONFIG_PATH));
    let mut cfg = AppConfig::load(&path)?;
    cfg.apply_env(var)?;
    Ok(cfg)
}
