//! End-to-end runner: extract, decompose, generate and validate one question.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use log::{debug, info};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decomposer::{decompose, DecomposeError};
use crate::extractor::{DatabaseIndex, DbFiles, ExtractionError, RetrievalConfig};
use crate::gateway::{BackendSpec, CostLedger, GenerationParams, Role, Route, SharedLedger, TokenUsage};
use crate::generator::{run_ladder, DiagnosticBundle, Generators, Origin, SqlCandidate};
use crate::model::{new_pipeline, Clock, DatabaseRegistry, ModelError, Outcome, PipelineResult, PipelineState, StageEvent, SystemClock};
use crate::prompts::PromptTemplates;
use crate::validator::{validate_full, ValidationPolicy, ValidationReport};

/// One backend per pipeline role.
#[derive(Debug, Clone)]
pub struct Backends {
    pub decomposer: BackendSpec,
    pub primary: BackendSpec,
    pub fallback: BackendSpec,
    pub embedder: BackendSpec,
}

impl Backends {
    pub fn get(&self, role: Role) -> &BackendSpec {
        match role {
            Role::Decomposer => &self.decomposer,
            Role::PrimaryGenerator => &self.primary,
            Role::FallbackGenerator => &self.fallback,
            Role::Embedder => &self.embedder,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub retrieval: RetrievalConfig,
    pub validation: ValidationPolicy,
    pub generation: GenerationParams,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Everything produced while answering one question.
#[derive(Debug, Clone)]
pub struct QueryRun {
    pub query_id: String,
    pub result: PipelineResult,
    pub state: PipelineState,
    pub bundle_history: Vec<DiagnosticBundle>,
    pub report: Option<ValidationReport>,
}

impl QueryRun {
    pub fn last_bundle(&self) -> Option<&DiagnosticBundle> {
        self.bundle_history.last()
    }
}

type IndexCache = Arc<Mutex<HashMap<String, Arc<DatabaseIndex>>>>;

/// Shared, thread-safe pipeline. Clones share the index cache and ledger.
#[derive(Clone)]
pub struct Pipeline {
    registry: DatabaseRegistry,
    backends: Backends,
    templates: PromptTemplates,
    config: PipelineConfig,
    ledger: SharedLedger,
    clock: Arc<dyn Clock>,
    indexes: IndexCache,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("registry", &self.registry)
            .field("backends", &self.backends)
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl Pipeline {
    pub fn new(registry: DatabaseRegistry, backends: Backends) -> Self {
        Pipeline {
            registry,
            backends,
            templates: PromptTemplates::default(),
            config: PipelineConfig::default(),
            ledger: Arc::new(Mutex::new(CostLedger::new())),
            clock: Arc::new(SystemClock::default()),
            indexes: Arc::default(),
        }
    }

    pub fn with_templates(mut self, templates: PromptTemplates) -> Self {
        self.templates = templates;
        self
    }

    pub fn with_config(mut self, config: PipelineConfig) -> Self {
        self.config = config;
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_ledger(mut self, ledger: SharedLedger) -> Self {
        self.ledger = ledger;
        self
    }

    /// Same backends and index cache, empty ledger.
    pub fn fresh_ledger(&self) -> Self {
        self.clone().with_ledger(Arc::new(Mutex::new(CostLedger::new())))
    }

    pub fn registry(&self) -> &DatabaseRegistry {
        &self.registry
    }

    pub fn backends(&self) -> &Backends {
        &self.backends
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn ledger(&self) -> SharedLedger {
        Arc::clone(&self.ledger)
    }

    pub fn files(&self, db_id: &str) -> Result<DbFiles, ModelError> {
        Ok(DbFiles::new(db_id, self.registry.resolve(db_id)?))
    }

    /// Load (once) and return the retrieval index for `db_id`.
    pub fn index(&self, db_id: &str) -> Result<Arc<DatabaseIndex>, ExtractionError> {
        if let Some(ix) = self.lock_indexes().get(db_id) {
            return Ok(Arc::clone(ix));
        }
        let files = self.files(db_id).map_err(|e| ExtractionError::Database {
            path: db_id.into(),
            message: e.to_string(),
        })?;
        let (ix, _warnings) = DatabaseIndex::open(&files, &self.backends.embedder)?;
        let ix = Arc::new(ix);
        Ok(Arc::clone(self.lock_indexes().entry(db_id.to_string()).or_insert(ix)))
    }

    fn lock_indexes(&self) -> std::sync::MutexGuard<'_, HashMap<String, Arc<DatabaseIndex>>> {
        self.indexes.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn record(&self, query_id: &str, backend: &BackendSpec, usage: TokenUsage) {
        self.ledger
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .record_usage(query_id, backend, usage);
    }

    /// Answer `question`. Stage failures become a [`PipelineResult`]; only
    /// invalid input or an unknown database is an error.
    pub fn run(&self, query_id: &str, question: &crate::model::Question) -> Result<QueryRun, PipelineError> {
        let clock = self.clock.as_ref();
        let mut state = new_pipeline(question.clone(), &self.registry, clock)?;
        let finish = |state: PipelineState,
                      outcome: Outcome,
                      bundle_history: Vec<DiagnosticBundle>,
                      report: Option<ValidationReport>,
                      error: Option<String>|
         -> QueryRun {
            let route = match (outcome, state.attempts) {
                (Outcome::Success, 0) => Route::LocalOnly,
                (Outcome::Success, _) => Route::FallbackUsed,
                _ => Route::Failed,
            };
            let mut ledger = self.ledger.lock().unwrap_or_else(|p| p.into_inner());
            let cost = ledger.close_query(query_id, route);
            let usage: BTreeMap<String, TokenUsage> = ledger.query_usage(query_id);
            drop(ledger);
            let outcome_rows = state.outcome.as_ref().filter(|_| outcome == Outcome::Success);
            let result = PipelineResult {
                outcome,
                sql: None,
                column_names: outcome_rows.map(|o| o.column_names.clone()).unwrap_or_default(),
                rows: outcome_rows.map(|o| o.rows.clone()),
                truncated: outcome_rows.is_some_and(|o| o.truncated),
                route,
                fallback_attempts: state.attempts,
                usage,
                cost,
                error,
            };
            info!("{query_id}: {outcome} via {route} ({cost})");
            QueryRun {
                query_id: query_id.to_string(),
                result,
                state,
                bundle_history,
                report,
            }
        };
        let fail = |state: PipelineState, msg: String| -> Result<PipelineState, PipelineError> {
            Ok(state.advance(StageEvent::Failed(msg), clock)?)
        };

        let context = match self
            .index(&question.db_id)
            .and_then(|ix| ix.extract(&question.text, &self.backends.embedder, &self.config.retrieval))
        {
            Ok(c) => c,
            Err(e) => {
                let msg = format!("schema extraction failed: {e}");
                let state = fail(state, msg.clone())?;
                return Ok(finish(state, Outcome::ExtractionFailure, vec![], None, Some(msg)));
            }
        };
        debug!("{query_id}: {} segments retrieved", context.segments.len());
        state = state.advance(StageEvent::Extracted(Box::new(context.clone())), clock)?;

        let decomposition = decompose(question, &context, &self.backends.decomposer, &self.templates, &self.config.generation);
        let plan = match decomposition {
            Ok(d) => {
                self.record(query_id, &self.backends.decomposer, d.usage);
                d.plan
            }
            Err(e) => {
                let msg = match &e {
                    DecomposeError::Parse(p) => format!("decomposition failed: {p}"),
                    other => format!("decomposition failed: {other}"),
                };
                let state = fail(state, msg.clone())?;
                return Ok(finish(state, Outcome::DecompositionFailure, vec![], None, Some(msg)));
            }
        };
        state = state.advance(StageEvent::Decomposed(Box::new(plan.clone())), clock)?;

        let db = self.registry.resolve(&question.db_id)?.to_path_buf();
        let gens = Generators {
            primary: &self.backends.primary,
            fallback: &self.backends.fallback,
            templates: &self.templates,
            params: &self.config.generation,
        };
        let policy = self.config.validation;
        let ladder = run_ladder(question, &plan, &context, &gens, |sql| {
            validate_full(sql, &context, &plan, &db, &policy)
        });

        for (i, call) in ladder.calls.iter().enumerate() {
            let backend = match call.origin {
                Origin::Primary => &self.backends.primary,
                Origin::Fallback { .. } => &self.backends.fallback,
            };
            self.record(query_id, backend, call.usage);
            let candidate = call.candidate.clone().unwrap_or(SqlCandidate {
                sql: String::new(),
                origin: call.origin,
                usage: call.usage,
            });
            let event = if i == 0 {
                StageEvent::Generated(candidate)
            } else {
                StageEvent::FallbackRetry(candidate)
            };
            state = state.advance(event, clock)?;
        }

        match ladder.accepted() {
            Some(accepted) => {
                state = state.advance(StageEvent::Validated(Box::new(accepted.outcome.clone())), clock)?;
                state = state.advance(StageEvent::Done, clock)?;
                let sql = accepted.sql.clone();
                let report = accepted.report.clone();
                let mut run = finish(state, Outcome::Success, ladder.bundle_history.clone(), Some(report), None);
                run.result.sql = Some(sql);
                Ok(run)
            }
            None => {
                let msg = format!("generation failure after {} attempts", ladder.attempts_used);
                let state = fail(state, msg.clone())?;
                Ok(finish(state, Outcome::GenerationFailure, ladder.bundle_history, None, Some(msg)))
            }
        }
    }
}
