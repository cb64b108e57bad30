//! SQL generation with a bounded fallback ladder.
//!
//! The primary (local) backend writes the first candidate. Each rejected
//! candidate produces a [`DiagnosticBundle`] that is handed to the fallback
//! backend, which gets at most [`MAX_FALLBACK_ATTEMPTS`] tries.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decomposer::{serialize_plan, DecompositionPlan};
use crate::extractor::SchemaContext;
use crate::gateway::{self, BackendSpec, GatewayError, GenerationParams, Role, TokenUsage};
use crate::model::Question;
use crate::prompts::{render, PromptTemplates};
use crate::validator::{ExecutionOutcome, ValidationReport, Verdict};

pub const MAX_FALLBACK_ATTEMPTS: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    Primary,
    Fallback { attempt: u8 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqlCandidate {
    pub sql: String,
    pub origin: Origin,
    pub usage: TokenUsage,
}

/// Why a candidate was rejected, as shown to the fallback backend.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosticBundle {
    pub execution_errors: Vec<String>,
    pub validation_warnings: Vec<String>,
    pub failed_sql: String,
}

impl DiagnosticBundle {
    pub fn is_empty(&self) -> bool {
        self.execution_errors.is_empty() && self.validation_warnings.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("backend returned an empty completion")]
    EmptyCompletion,
    #[error("fallback attempt {0} is outside 1..={MAX_FALLBACK_ATTEMPTS}")]
    AttemptOutOfRange(u8),
    #[error("diagnostic bundle has neither errors nor warnings")]
    EmptyBundle,
}

/// SQL inside the first fenced code block, or the whole text trimmed.
pub fn extract_sql(completion: &str) -> Option<String> {
    let text = match completion.find("```") {
        Some(open) => {
            let after = &completion[open + 3..];
            let body = match after.find('\n') {
                Some(nl) if !after[..nl].trim().contains(' ') => &after[nl + 1..],
                _ => after,
            };
            match body.find("```") {
                Some(close) => &body[..close],
                None => body,
            }
        }
        None => completion,
    };
    let sql = text.trim();
    (!sql.is_empty()).then(|| sql.to_string())
}

fn complete_with_retry(backend: &BackendSpec, prompt: &str, params: &GenerationParams) -> Result<(String, TokenUsage), GatewayError> {
    let c = match gateway::complete(backend, prompt, params) {
        Err(e) if e.is_transport() => gateway::complete(backend, prompt, params)?,
        other => other?,
    };
    Ok((c.text, c.usage))
}

fn vars_prompt(template: &str, question: &Question, plan: &DecompositionPlan, context: &SchemaContext, bundle: Option<&DiagnosticBundle>) -> String {
    let bullets = |v: &[String]| {
        if v.is_empty() {
            "(none)".to_string()
        } else {
            v.iter().map(|s| format!("- {s}")).collect::<Vec<_>>().join("\n")
        }
    };
    let mut q = question.text.clone();
    if let Some(hint) = question.evidence_hint.as_deref().filter(|h| !h.trim().is_empty()) {
        q.push_str(&format!("\nHint: {hint}"));
    }
    let (failed, errors, warnings) = match bundle {
        Some(b) => (b.failed_sql.clone(), bullets(&b.execution_errors), bullets(&b.validation_warnings)),
        None => (String::new(), String::new(), String::new()),
    };
    render(
        template,
        &[
            ("plan", &serialize_plan(plan)),
            ("catalog", &context.catalog.summary()),
            ("evidence", &context.evidence_text()),
            ("segments", &context.segments_text()),
            ("question", &q),
            ("failed_sql", &failed),
            ("errors", &errors),
            ("warnings", &warnings),
        ],
    )
}

pub fn primary_prompt(question: &Question, plan: &DecompositionPlan, context: &SchemaContext, templates: &PromptTemplates) -> String {
    vars_prompt(&templates.generator_primary, question, plan, context, None)
}

pub fn fallback_prompt(
    question: &Question,
    plan: &DecompositionPlan,
    context: &SchemaContext,
    bundle: &DiagnosticBundle,
    templates: &PromptTemplates,
) -> String {
    vars_prompt(&templates.generator_fallback, question, plan, context, Some(bundle))
}

/// First candidate from the primary backend.
pub fn generate_primary(
    question: &Question,
    plan: &DecompositionPlan,
    context: &SchemaContext,
    backend: &BackendSpec,
    templates: &PromptTemplates,
    params: &GenerationParams,
) -> Result<SqlCandidate, GenerationError> {
    backend.expect_role(Role::PrimaryGenerator)?;
    let (text, usage) = complete_with_retry(backend, &primary_prompt(question, plan, context, templates), params)?;
    let sql = extract_sql(&text).ok_or(GenerationError::EmptyCompletion)?;
    Ok(SqlCandidate {
        sql,
        origin: Origin::Primary,
        usage,
    })
}

/// Regenerate from the diagnostics of a rejected candidate.
#[allow(clippy::too_many_arguments)]
pub fn generate_fallback(
    question: &Question,
    plan: &DecompositionPlan,
    context: &SchemaContext,
    bundle: &DiagnosticBundle,
    backend: &BackendSpec,
    attempt: u8,
    templates: &PromptTemplates,
    params: &GenerationParams,
) -> Result<SqlCandidate, GenerationError> {
    if !(1..=MAX_FALLBACK_ATTEMPTS).contains(&attempt) {
        return Err(GenerationError::AttemptOutOfRange(attempt));
    }
    if bundle.is_empty() {
        return Err(GenerationError::EmptyBundle);
    }
    backend.expect_role(Role::FallbackGenerator)?;
    let prompt = fallback_prompt(question, plan, context, bundle, templates);
    let (text, usage) = complete_with_retry(backend, &prompt, params)?;
    let sql = extract_sql(&text).ok_or(GenerationError::EmptyCompletion)?;
    Ok(SqlCandidate {
        sql,
        origin: Origin::Fallback { attempt },
        usage,
    })
}

/// The candidate that passed validation.
#[derive(Debug, Clone, PartialEq)]
pub struct AcceptedSql {
    pub candidate: SqlCandidate,
    /// SQL after value correction; this is what executed.
    pub sql: String,
    pub outcome: ExecutionOutcome,
    pub report: ValidationReport,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FinalCandidate {
    Accepted(Box<AcceptedSql>),
    Failure,
}

/// One generator call, successful or not, with the tokens it cost.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationCall {
    pub origin: Origin,
    pub usage: TokenUsage,
    pub candidate: Option<SqlCandidate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationOutcome {
    pub final_candidate: FinalCandidate,
    pub attempts_used: u8,
    /// One bundle per rejection, in order.
    pub bundle_history: Vec<DiagnosticBundle>,
    pub calls: Vec<GenerationCall>,
}

impl GenerationOutcome {
    pub fn accepted(&self) -> Option<&AcceptedSql> {
        match &self.final_candidate {
            FinalCandidate::Accepted(a) => Some(a),
            FinalCandidate::Failure => None,
        }
    }

    pub fn usage_for(&self, primary: bool) -> TokenUsage {
        self.calls
            .iter()
            .filter(|c| matches!(c.origin, Origin::Primary) == primary)
            .fold(TokenUsage::default(), |acc, c| acc + c.usage)
    }
}

/// Backends, templates and parameters for one ladder run.
#[derive(Debug, Clone)]
pub struct Generators<'a> {
    pub primary: &'a BackendSpec,
    pub fallback: &'a BackendSpec,
    pub templates: &'a PromptTemplates,
    pub params: &'a GenerationParams,
}

fn transport_bundle(err: &GenerationError, previous: Option<&DiagnosticBundle>) -> DiagnosticBundle {
    DiagnosticBundle {
        execution_errors: vec![format!("generation failed: {err}")],
        validation_warnings: previous.map(|b| b.validation_warnings.clone()).unwrap_or_default(),
        failed_sql: previous.map(|b| b.failed_sql.clone()).unwrap_or_default(),
    }
}

/// Validate the primary candidate, then climb the fallback ladder on rejection.
///
/// Each fallback prompt sees only the most recent bundle. A backend failure
/// counts as a rejection and consumes an attempt.
pub fn run_ladder(
    question: &Question,
    plan: &DecompositionPlan,
    context: &SchemaContext,
    gens: &Generators<'_>,
    mut validate: impl FnMut(&str) -> Verdict,
) -> GenerationOutcome {
    let mut bundle_history = Vec::new();
    let mut calls = Vec::new();

    let mut judge = |result: Result<SqlCandidate, GenerationError>,
                     origin: Origin,
                     history: &mut Vec<DiagnosticBundle>,
                     calls: &mut Vec<GenerationCall>|
     -> Option<AcceptedSql> {
        match result {
            Ok(candidate) => {
                calls.push(GenerationCall {
                    origin,
                    usage: candidate.usage,
                    candidate: Some(candidate.clone()),
                });
                match validate(&candidate.sql) {
                    Verdict::Accepted { sql, outcome, report } => Some(AcceptedSql {
                        candidate,
                        sql,
                        outcome,
                        report,
                    }),
                    Verdict::Rejected { bundle, .. } => {
                        history.push(bundle);
                        None
                    }
                }
            }
            Err(e) => {
                calls.push(GenerationCall {
                    origin,
                    usage: TokenUsage::default(),
                    candidate: None,
                });
                let b = transport_bundle(&e, history.last());
                history.push(b);
                None
            }
        }
    };

    let first = generate_primary(question, plan, context, gens.primary, gens.templates, gens.params);
    if let Some(a) = judge(first, Origin::Primary, &mut bundle_history, &mut calls) {
        return GenerationOutcome {
            final_candidate: FinalCandidate::Accepted(Box::new(a)),
            attempts_used: 0,
            bundle_history,
            calls,
        };
    }
    for attempt in 1..=MAX_FALLBACK_ATTEMPTS {
        let bundle = bundle_history.last().cloned().expect("a rejection precedes every fallback");
        let next = generate_fallback(question, plan, context, &bundle, gens.fallback, attempt, gens.templates, gens.params);
        if let Some(a) = judge(next, Origin::Fallback { attempt }, &mut bundle_history, &mut calls) {
            return GenerationOutcome {
                final_candidate: FinalCandidate::Accepted(Box::new(a)),
                attempts_used: attempt,
                bundle_history,
                calls,
            };
        }
    }
    GenerationOutcome {
        final_candidate: FinalCandidate::Failure,
        attempts_used: MAX_FALLBACK_ATTEMPTS,
        bundle_history,
        calls,
    }
}
