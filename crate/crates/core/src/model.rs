//! Domain types shared by every stage, and the pipeline state machine.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decomposer::DecompositionPlan;
use crate::extractor::SchemaContext;
use crate::gateway::{Cost, Route, TokenUsage};
use crate::generator::{SqlCandidate, MAX_FALLBACK_ATTEMPTS};
use crate::validator::{ExecutionOutcome, Row};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("illegal transition from {from} on {event}")]
    StateMachine { from: Stage, event: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub text: String,
    pub db_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence_hint: Option<String>,
}

impl Question {
    pub fn new(text: &str, db_id: &str) -> Self {
        Question {
            text: text.to_string(),
            db_id: db_id.to_string(),
            evidence_hint: None,
        }
    }

    pub fn with_hint(mut self, hint: &str) -> Self {
        self.evidence_hint = Some(hint.to_string());
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.text.trim().is_empty() {
            return Err(ModelError::Validation("question text is empty".into()));
        }
        if self.db_id.trim().is_empty() {
            return Err(ModelError::Validation("db_id is empty".into()));
        }
        Ok(())
    }
}

/// Maps database ids to SQLite files.
///
/// A scanned root follows the `<root>/<db_id>/<db_id>.sqlite` layout.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatabaseRegistry {
    dbs: BTreeMap<String, PathBuf>,
}

impl DatabaseRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn scan(root: &Path) -> Result<Self, ModelError> {
        let entries = std::fs::read_dir(root)
            .map_err(|e| ModelError::Configuration(format!("cannot read database root {}: {e}", root.display())))?;
        let mut reg = Self::new();
        for entry in entries.flatten() {
            let dir = entry.path();
            let Some(id) = dir.file_name().and_then(|n| n.to_str()).map(str::to_string) else {
                continue;
            };
            let file = dir.join(format!("{id}.sqlite"));
            if file.is_file() {
                reg.register(&id, file);
            }
        }
        Ok(reg)
    }

    pub fn register(&mut self, db_id: &str, path: impl Into<PathBuf>) {
        self.dbs.insert(db_id.to_string(), path.into());
    }

    pub fn resolve(&self, db_id: &str) -> Result<&Path, ModelError> {
        self.dbs
            .get(db_id)
            .map(PathBuf::as_path)
            .ok_or_else(|| ModelError::Configuration(format!("unknown db_id {db_id:?}")))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.dbs.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.dbs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dbs.is_empty()
    }
}

/// Source of timestamps. Readings are offsets from an arbitrary origin.
pub trait Clock: Send + Sync {
    fn now(&self) -> Duration;
}

#[derive(Debug, Clone, Copy)]
pub struct SystemClock {
    origin: Instant,
    epoch: Duration,
}

impl Default for SystemClock {
    fn default() -> Self {
        SystemClock {
            origin: Instant::now(),
            epoch: SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default(),
        }
    }
}

impl Clock for SystemClock {
    /// Wall-clock time since the Unix epoch, advanced monotonically.
    fn now(&self) -> Duration {
        self.epoch + self.origin.elapsed()
    }
}

/// Deterministic clock: each reading advances time by the next step, cycling.
#[derive(Debug)]
pub struct ScriptedClock {
    state: Mutex<(Duration, VecDeque<Duration>)>,
}

impl ScriptedClock {
    pub fn new(steps: impl IntoIterator<Item = Duration>) -> Self {
        let steps: VecDeque<Duration> = steps.into_iter().collect();
        ScriptedClock {
            state: Mutex::new((Duration::ZERO, steps)),
        }
    }

    pub fn fixed_step(step: Duration) -> Self {
        Self::new([step])
    }

    /// Consecutive (start, end) reading pairs measure the given spans in order.
    pub fn spans(spans: impl IntoIterator<Item = Duration>) -> Self {
        Self::new(spans.into_iter().flat_map(|s| [s, Duration::ZERO]))
    }
}

impl Clock for ScriptedClock {
    fn now(&self) -> Duration {
        let mut guard = self.state.lock().unwrap_or_else(|p| p.into_inner());
        let (now, steps) = &mut *guard;
        let reading = *now;
        if let Some(step) = steps.pop_front() {
            *now += step;
            steps.push_back(step);
        }
        reading
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    Created,
    Extracted,
    Decomposed,
    Generated,
    Validated,
    Done,
    Failed,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StageEvent {
    Created(Question),
    Extracted(Box<SchemaContext>),
    Decomposed(Box<DecompositionPlan>),
    Generated(SqlCandidate),
    /// A rejected candidate was replaced by a fallback one.
    FallbackRetry(SqlCandidate),
    Validated(Box<ExecutionOutcome>),
    Done,
    Failed(String),
}

impl StageEvent {
    pub fn name(&self) -> &'static str {
        match self {
            StageEvent::Created(_) => "Created",
            StageEvent::Extracted(_) => "Extracted",
            StageEvent::Decomposed(_) => "Decomposed",
            StageEvent::Generated(_) => "Generated",
            StageEvent::FallbackRetry(_) => "FallbackRetry",
            StageEvent::Validated(_) => "Validated",
            StageEvent::Done => "Done",
            StageEvent::Failed(_) => "Failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub at: Duration,
    pub event: StageEvent,
}

/// Immutable snapshot of one question's progress; [`PipelineState::advance`] returns a new value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub question: Question,
    pub stage: Stage,
    pub schema_context: Option<SchemaContext>,
    pub plan: Option<DecompositionPlan>,
    pub candidate: Option<SqlCandidate>,
    pub outcome: Option<ExecutionOutcome>,
    pub attempts: u8,
    pub failure: Option<String>,
    pub trace: Vec<TraceEntry>,
}

/// Start a pipeline for `question`, checking that its database is registered.
pub fn new_pipeline(question: Question, registry: &DatabaseRegistry, clock: &dyn Clock) -> Result<PipelineState, ModelError> {
    question.validate()?;
    registry.resolve(&question.db_id)?;
    Ok(PipelineState::created(question, clock.now()))
}

impl PipelineState {
    fn created(question: Question, at: Duration) -> Self {
        PipelineState {
            trace: vec![TraceEntry {
                at,
                event: StageEvent::Created(question.clone()),
            }],
            question,
            stage: Stage::Created,
            schema_context: None,
            plan: None,
            candidate: None,
            outcome: None,
            attempts: 0,
            failure: None,
        }
    }

    pub fn advance(&self, event: StageEvent, clock: &dyn Clock) -> Result<Self, ModelError> {
        self.apply(event, clock.now())
    }

    fn apply(&self, event: StageEvent, at: Duration) -> Result<Self, ModelError> {
        let illegal = |e: &StageEvent| ModelError::StateMachine {
            from: self.stage,
            event: e.name().to_string(),
        };
        let mut next = self.clone();
        match (&event, self.stage) {
            (StageEvent::Failed(reason), s) if !matches!(s, Stage::Done | Stage::Failed) => {
                next.stage = Stage::Failed;
                next.failure = Some(reason.clone());
            }
            (StageEvent::Extracted(ctx), Stage::Created) => {
                next.stage = Stage::Extracted;
                next.schema_context = Some((**ctx).clone());
            }
            (StageEvent::Decomposed(plan), Stage::Extracted) => {
                next.stage = Stage::Decomposed;
                next.plan = Some((**plan).clone());
            }
            (StageEvent::Generated(c), Stage::Decomposed) => {
                next.stage = Stage::Generated;
                next.candidate = Some(c.clone());
            }
            (StageEvent::FallbackRetry(c), Stage::Generated) => {
                if self.attempts >= MAX_FALLBACK_ATTEMPTS {
                    return Err(illegal(&event));
                }
                next.attempts += 1;
                next.candidate = Some(c.clone());
            }
            (StageEvent::Validated(o), Stage::Generated) => {
                next.stage = Stage::Validated;
                next.outcome = Some((**o).clone());
            }
            (StageEvent::Done, Stage::Validated) => next.stage = Stage::Done,
            _ => return Err(illegal(&event)),
        }
        next.trace.push(TraceEntry { at, event });
        Ok(next)
    }

    /// Rebuild a state from its trace.
    pub fn replay(trace: &[TraceEntry]) -> Result<Self, ModelError> {
        let (first, rest) = trace
            .split_first()
            .ok_or_else(|| ModelError::Validation("empty trace".into()))?;
        let StageEvent::Created(q) = &first.event else {
            return Err(ModelError::StateMachine {
                from: Stage::Created,
                event: first.event.name().to_string(),
            });
        };
        let mut state = PipelineState::created(q.clone(), first.at);
        for entry in rest {
            state = state.apply(entry.event.clone(), entry.at)?;
        }
        Ok(state)
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self.stage, Stage::Done | Stage::Failed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    GenerationFailure,
    ExtractionFailure,
    /// The decomposer produced no usable plan, so generation never started.
    DecompositionFailure,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Success => "success",
            Outcome::GenerationFailure => "generation_failure",
            Outcome::ExtractionFailure => "extraction_failure",
            Outcome::DecompositionFailure => "decomposition_failure",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub outcome: Outcome,
    pub sql: Option<String>,
    pub column_names: Vec<String>,
    pub rows: Option<Vec<Row>>,
    /// The sandbox row cap cut the result short.
    #[serde(default)]
    pub truncated: bool,
    pub route: Route,
    pub fallback_attempts: u8,
    /// Token usage per backend name.
    pub usage: BTreeMap<String, TokenUsage>,
    pub cost: Cost,
    pub error: Option<String>,
}

impl PipelineResult {
    pub fn check(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Validation(m.to_string()));
        if self.fallback_attempts > MAX_FALLBACK_ATTEMPTS {
            return bad("fallback_attempts above limit");
        }
        match self.outcome {
            Outcome::Success => {
                if self.sql.is_none() || self.rows.is_none() {
                    return bad("success without sql or rows");
                }
                if (self.route == Route::LocalOnly) != (self.fallback_attempts == 0) {
                    return bad("route disagrees with fallback_attempts");
                }
            }
            Outcome::GenerationFailure if self.fallback_attempts != MAX_FALLBACK_ATTEMPTS => {
                return bad("generation failure before the ladder was exhausted");
            }
            _ => {}
        }
        Ok(())
    }

    pub fn total_usage(&self) -> TokenUsage {
        self.usage.values().copied().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::Origin;
    use proptest::prelude::*;

    fn registry() -> DatabaseRegistry {
        let mut r = DatabaseRegistry::new();
        r.register("schools_db", "/tmp/schools_db.sqlite");
        r
    }

    fn candidate(sql: &str) -> SqlCandidate {
        SqlCandidate {
            sql: sql.into(),
            origin: Origin::Primary,
            usage: TokenUsage::default(),
        }
    }

    fn ctx() -> SchemaContext {
        crate::extractor::build_context(Default::default(), vec![], Default::default(), Duration::ZERO)
    }

    fn plan() -> DecompositionPlan {
        crate::decomposer::parse_plan("ENTITIES\nCONDITIONS\nSTEPS\ns1\tcount\nOUTPUT\ncolumn\tCOUNT(*)\n").unwrap()
    }

    #[test]
    fn constructor_contract() {
        let clock = ScriptedClock::fixed_step(Duration::from_millis(1));
        let s = new_pipeline(Question::new("how many schools?", "schools_db"), &registry(), &clock).unwrap();
        assert_eq!(s.stage, Stage::Created);
        assert_eq!(s.attempts, 0);
        assert!(s.schema_context.is_none() && s.plan.is_none() && s.candidate.is_none());
        assert_eq!(s.trace.len(), 1);
        assert!(matches!(
            new_pipeline(Question::new("", "schools_db"), &registry(), &clock),
            Err(ModelError::Validation(_))
        ));
        assert!(matches!(
            new_pipeline(Question::new("q", "no_such_db"), &registry(), &clock),
            Err(ModelError::Configuration(_))
        ));
    }

    #[test]
    fn transitions() {
        let clock = ScriptedClock::fixed_step(Duration::from_millis(1));
        let s = new_pipeline(Question::new("q", "schools_db"), &registry(), &clock).unwrap();
        let s = s.advance(StageEvent::Extracted(Box::new(ctx())), &clock).unwrap();
        assert_eq!(s.stage, Stage::Extracted);
        assert!(s.schema_context.is_some());
        let err = s.advance(StageEvent::Generated(candidate("SELECT 1")), &clock).unwrap_err();
        assert!(matches!(err, ModelError::StateMachine { from: Stage::Extracted, .. }));
        let s = s.advance(StageEvent::Decomposed(Box::new(plan())), &clock).unwrap();
        let s = s.advance(StageEvent::Generated(candidate("SELECT 1")), &clock).unwrap();
        let s = s.advance(StageEvent::FallbackRetry(candidate("SELECT 2")), &clock).unwrap();
        assert_eq!(s.stage, Stage::Generated);
        assert_eq!(s.attempts, 1);
        assert_eq!(s.candidate.as_ref().unwrap().sql, "SELECT 2");
    }

    #[test]
    fn attempts_capped() {
        let clock = ScriptedClock::fixed_step(Duration::ZERO);
        let mut s = new_pipeline(Question::new("q", "schools_db"), &registry(), &clock).unwrap();
        s = s.advance(StageEvent::Extracted(Box::new(ctx())), &clock).unwrap();
        s = s.advance(StageEvent::Decomposed(Box::new(plan())), &clock).unwrap();
        s = s.advance(StageEvent::Generated(candidate("a")), &clock).unwrap();
        for _ in 0..3 {
            s = s.advance(StageEvent::FallbackRetry(candidate("b")), &clock).unwrap();
        }
        assert!(s.advance(StageEvent::FallbackRetry(candidate("c")), &clock).is_err());
        assert_eq!(s.attempts, 3);
    }

    #[test]
    fn scripted_clock_spans() {
        let c = ScriptedClock::spans([Duration::from_millis(2), Duration::from_millis(5)]);
        let (a, b) = (c.now(), c.now());
        assert_eq!(b - a, Duration::from_millis(2));
        let (a, b) = (c.now(), c.now());
        assert_eq!(b - a, Duration::from_millis(5));
    }

    #[test]
    fn registry_scan_layout() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("schools")).unwrap();
        std::fs::write(dir.path().join("schools/schools.sqlite"), b"").unwrap();
        std::fs::create_dir(dir.path().join("empty")).unwrap();
        let r = DatabaseRegistry::scan(dir.path()).unwrap();
        assert_eq!(r.ids().collect::<Vec<_>>(), ["schools"]);
        assert!(r.resolve("empty").is_err());
    }

    #[test]
    fn result_invariants() {
        let ok = PipelineResult {
            outcome: Outcome::Success,
            sql: Some("SELECT 1".into()),
            column_names: vec!["1".into()],
            rows: Some(vec![]),
            truncated: false,
            route: Route::LocalOnly,
            fallback_attempts: 0,
            usage: BTreeMap::new(),
            cost: Cost::ZERO,
            error: None,
        };
        assert!(ok.check().is_ok());
        let bad = PipelineResult {
            fallback_attempts: 1,
            ..ok.clone()
        };
        assert!(bad.check().is_err());
        let fail = PipelineResult {
            outcome: Outcome::GenerationFailure,
            fallback_attempts: 2,
            route: Route::Failed,
            ..ok
        };
        assert!(fail.check().is_err());
    }

    fn arb_event() -> impl Strategy<Value = StageEvent> {
        prop_oneof![
            Just(StageEvent::Extracted(Box::new(ctx()))),
            Just(StageEvent::Decomposed(Box::new(plan()))),
            Just(StageEvent::Generated(candidate("g"))),
            Just(StageEvent::FallbackRetry(candidate("f"))),
            Just(StageEvent::Validated(Box::new(ExecutionOutcome {
                column_names: vec![],
                rows: vec![],
                runtime: Duration::ZERO,
                truncated: false,
            }))),
            Just(StageEvent::Done),
            Just(StageEvent::Failed("x".into())),
        ]
    }

    proptest! {
        #[test]
        fn event_sequences_keep_invariants(events in proptest::collection::vec(arb_event(), 0..40)) {
            let clock = ScriptedClock::fixed_step(Duration::from_micros(7));
            let mut s = new_pipeline(Question::new("q", "schools_db"), &registry(), &clock).unwrap();
            let mut accepted = 0;
            for e in events {
                let before = (s.stage, s.attempts);
                if let Ok(next) = s.advance(e, &clock) {
                    prop_assert!(next.attempts >= before.1);
                    prop_assert!(next.stage >= before.0);
                    s = next;
                    accepted += 1;
                }
                prop_assert!(s.attempts <= MAX_FALLBACK_ATTEMPTS);
                if s.stage != Stage::Failed {
                    prop_assert_eq!(s.schema_context.is_some(), s.stage >= Stage::Extracted);
                    prop_assert_eq!(s.plan.is_some(), s.stage >= Stage::Decomposed);
                    prop_assert_eq!(s.candidate.is_some(), s.stage >= Stage::Generated);
                }
            }
            prop_assert_eq!(s.trace.len(), accepted + 1);
            prop_assert_eq!(PipelineState::replay(&s.trace).unwrap(), s);
        }
    }
}
