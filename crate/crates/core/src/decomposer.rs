//! Question decomposition into a structured plan.
//!
//! The decomposition backend answers with a fenced, line-oriented block:
//!
//! ```text
//! ENTITIES
//! <phrase>\t<table.column | expr:<expression>>\t<note>
//! CONDITIONS
//! <id>\t<phrase>\t<predicate sketch>\t<subquery | plain>
//! STEPS
//! <id>\t<description>\t<depends on ids or ->\t<condition ids or ->
//! OUTPUT
//! column\t<column or expression>
//! order\t<ordering>
//! limit\t<n>
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};
use sqlparser::ast::{visit_expressions, Expr};
use sqlparser::dialect::SQLiteDialect;
use sqlparser::parser::Parser;
use thiserror::Error;

use crate::extractor::{SchemaCatalog, SchemaContext};
use crate::gateway::{self, BackendSpec, GatewayError, GenerationParams, Role, TokenUsage};
use crate::model::Question;
use crate::prompts::{render, PromptTemplates};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Binding {
    Column { table: String, column: String },
    Expression(String),
}

impl fmt::Display for Binding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Binding::Column { table, column } => write!(f, "{table}.{column}"),
            Binding::Expression(e) => write!(f, "expr:{e}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub nl_phrase: String,
    pub binding: Binding,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub id: String,
    pub nl_phrase: String,
    pub predicate: String,
    pub requires_subquery: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub id: String,
    pub description: String,
    pub depends_on: Vec<String>,
    /// Conditions this step applies.
    pub conditions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputSpec {
    pub columns: Vec<String>,
    pub ordering: Option<String>,
    pub limit: Option<u64>,
}

const AGGREGATES: [&str; 5] = ["COUNT", "SUM", "AVG", "MIN", "MAX"];

impl OutputSpec {
    /// Whether any requested output is an aggregate expression.
    pub fn expects_aggregate(&self) -> bool {
        self.columns.iter().any(|c| {
            let upper = c.to_ascii_uppercase();
            AGGREGATES.iter().any(|a| {
                upper.match_indices(a).any(|(i, _)| {
                    let tail = upper[i + a.len()..].trim_start();
                    let boundary = i == 0 || !upper.as_bytes()[i - 1].is_ascii_alphanumeric();
                    boundary && tail.starts_with('(')
                })
            })
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecompositionPlan {
    pub entities: Vec<Entity>,
    pub conditions: Vec<Condition>,
    pub steps: Vec<Step>,
    pub output: OutputSpec,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("plan parse error at {path}: {message}")]
pub struct PlanParseError {
    pub path: String,
    pub message: String,
    pub raw: String,
}

#[derive(Debug, Error)]
pub enum DecomposeError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Parse(#[from] PlanParseError),
}

const SECTIONS: [&str; 4] = ["ENTITIES", "CONDITIONS", "STEPS", "OUTPUT"];

fn section_header(line: &str) -> Option<&'static str> {
    if line.contains('\t') {
        return None;
    }
    let t = line.trim().trim_end_matches(':').trim();
    SECTIONS.iter().copied().find(|s| t.eq_ignore_ascii_case(s))
}

/// Body of the first fenced block, or the whole text when there is none.
fn plan_body(raw: &str) -> &str {
    let Some(open) = raw.find("```") else {
        return raw;
    };
    let after = &raw[open + 3..];
    let body_start = after.find('\n').map_or(after.len(), |i| i + 1);
    let body = &after[body_start..];
    match body.find("```") {
        Some(close) => &body[..close],
        None => body,
    }
}

fn id_list(field: Option<&str>) -> Vec<String> {
    match field.map(str::trim) {
        None | Some("") | Some("-") => Vec::new(),
        Some(s) => s.split(',').map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect(),
    }
}

/// Strictly parse plan text and check its structural invariants.
pub fn parse_plan(raw: &str) -> Result<DecompositionPlan, PlanParseError> {
    let err = |path: String, message: String| PlanParseError {
        path,
        message,
        raw: raw.to_string(),
    };

    let mut sections: BTreeMap<&'static str, Vec<&str>> = BTreeMap::new();
    let mut current: Option<&'static str> = None;
    for line in plan_body(raw).lines() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if let Some(h) = section_header(line) {
            if sections.insert(h, Vec::new()).is_some() {
                return Err(err(h.to_ascii_lowercase(), "section appears twice".into()));
            }
            current = Some(h);
            continue;
        }
        match current {
            Some(h) => sections.get_mut(h).expect("section registered").push(line),
            None => return Err(err("plan".into(), format!("record before any section header: {line:?}"))),
        }
    }
    let take = |name: &'static str, path: &str| {
        sections
            .get(name)
            .cloned()
            .ok_or_else(|| err(path.to_string(), format!("missing {name} section")))
    };

    let mut entities = Vec::new();
    for (i, line) in take("ENTITIES", "entities")?.into_iter().enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        if !(2..=3).contains(&f.len()) {
            return Err(err(format!("entities[{i}]"), format!("expected 2 or 3 fields, got {}", f.len())));
        }
        let b = f[1].trim();
        let binding = if let Some(e) = b.strip_prefix("expr:") {
            if e.trim().is_empty() {
                return Err(err(format!("entities[{i}].binding"), "empty expression".into()));
            }
            Binding::Expression(e.trim().to_string())
        } else {
            match b.split_once('.') {
                Some((t, c)) if !t.is_empty() && !c.is_empty() && !c.contains('.') => Binding::Column {
                    table: t.to_string(),
                    column: c.to_string(),
                },
                _ => {
                    return Err(err(
                        format!("entities[{i}].binding"),
                        format!("expected table.column or expr:<expression>, got {b:?}"),
                    ))
                }
            }
        };
        entities.push(Entity {
            nl_phrase: f[0].trim().to_string(),
            binding,
            note: f.get(2).map(|s| s.trim().to_string()).unwrap_or_default(),
        });
    }

    let mut conditions = Vec::new();
    for (i, line) in take("CONDITIONS", "conditions")?.into_iter().enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(err(format!("conditions[{i}]"), format!("expected 4 fields, got {}", f.len())));
        }
        let requires_subquery = match f[3].trim().to_ascii_lowercase().as_str() {
            "subquery" | "true" | "yes" => true,
            "plain" | "false" | "no" => false,
            other => {
                return Err(err(
                    format!("conditions[{i}].requires_subquery"),
                    format!("expected subquery or plain, got {other:?}"),
                ))
            }
        };
        let id = f[0].trim().to_string();
        if id.is_empty() || conditions.iter().any(|c: &Condition| c.id == id) {
            return Err(err(format!("conditions[{i}].id"), format!("empty or duplicate id {id:?}")));
        }
        conditions.push(Condition {
            id,
            nl_phrase: f[1].trim().to_string(),
            predicate: f[2].trim().to_string(),
            requires_subquery,
        });
    }

    let mut steps = Vec::new();
    for (i, line) in take("STEPS", "steps")?.into_iter().enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        if !(2..=4).contains(&f.len()) {
            return Err(err(format!("steps[{i}]"), format!("expected 2 to 4 fields, got {}", f.len())));
        }
        let id = f[0].trim().to_string();
        if id.is_empty() || steps.iter().any(|s: &Step| s.id == id) {
            return Err(err(format!("steps[{i}].step_id"), format!("empty or duplicate id {id:?}")));
        }
        steps.push(Step {
            id,
            description: f[1].trim().to_string(),
            depends_on: id_list(f.get(2).copied()),
            conditions: id_list(f.get(3).copied()),
        });
    }
    if steps.is_empty() {
        return Err(err("steps".into(), "plan has no steps".into()));
    }

    let mut output = OutputSpec {
        columns: Vec::new(),
        ordering: None,
        limit: None,
    };
    for (i, line) in take("OUTPUT", "output_spec")?.into_iter().enumerate() {
        let Some((key, value)) = line.split_once('\t') else {
            return Err(err(format!("output_spec[{i}]"), format!("expected key<TAB>value, got {line:?}")));
        };
        let value = value.trim();
        match key.trim().to_ascii_lowercase().as_str() {
            "column" if !value.is_empty() => output.columns.push(value.to_string()),
            "order" => output.ordering = Some(value.to_string()),
            "limit" => {
                output.limit = Some(
                    value
                        .parse()
                        .map_err(|_| err("output_spec.limit".into(), format!("not a count: {value:?}")))?,
                )
            }
            other => return Err(err(format!("output_spec[{i}]"), format!("unknown output key {other:?}"))),
        }
    }
    if output.columns.is_empty() {
        return Err(err("output_spec.columns".into(), "no output columns".into()));
    }

    let plan = DecompositionPlan {
        entities,
        conditions,
        steps,
        output,
    };
    check_structure(&plan).map_err(|(path, message)| err(path, message))?;
    Ok(plan)
}

fn check_structure(plan: &DecompositionPlan) -> Result<(), (String, String)> {
    let step_ids: BTreeSet<&str> = plan.steps.iter().map(|s| s.id.as_str()).collect();
    let cond_ids: BTreeSet<&str> = plan.conditions.iter().map(|c| c.id.as_str()).collect();
    for (i, s) in plan.steps.iter().enumerate() {
        if let Some(d) = s.depends_on.iter().find(|d| !step_ids.contains(d.as_str())) {
            return Err((format!("steps[{i}].depends_on"), format!("unknown step {d:?}")));
        }
        if let Some(c) = s.conditions.iter().find(|c| !cond_ids.contains(c.as_str())) {
            return Err((format!("steps[{i}].conditions"), format!("unknown condition {c:?}")));
        }
    }
    if let Some(cycle) = find_cycle(&plan.steps) {
        return Err(("steps.depends_on".into(), format!("cyclic depends_on: {}", cycle.join(" -> "))));
    }
    for (i, c) in plan.conditions.iter().enumerate() {
        if c.requires_subquery && !plan.steps.iter().any(|s| s.conditions.contains(&c.id)) {
            return Err((
                format!("conditions[{i}]"),
                format!("subquery condition {:?} is not used by any step", c.id),
            ));
        }
    }
    Ok(())
}

fn find_cycle(steps: &[Step]) -> Option<Vec<String>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    let index: BTreeMap<&str, usize> = steps.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let mut marks = vec![Mark::New; steps.len()];
    let mut stack: Vec<usize> = Vec::new();

    fn visit(
        i: usize,
        steps: &[Step],
        index: &BTreeMap<&str, usize>,
        marks: &mut [Mark],
        stack: &mut Vec<usize>,
    ) -> Option<Vec<String>> {
        marks[i] = Mark::Active;
        stack.push(i);
        for d in &steps[i].depends_on {
            let j = index[d.as_str()];
            match marks[j] {
                Mark::Active => {
                    let from = stack.iter().position(|&k| k == j).expect("active node on stack");
                    let mut cycle: Vec<String> = stack[from..].iter().map(|&k| steps[k].id.clone()).collect();
                    cycle.push(steps[j].id.clone());
                    return Some(cycle);
                }
                Mark::New => {
                    if let Some(c) = visit(j, steps, index, marks, stack) {
                        return Some(c);
                    }
                }
                Mark::Done => {}
            }
        }
        stack.pop();
        marks[i] = Mark::Done;
        None
    }

    (0..steps.len()).find_map(|i| {
        if marks[i] == Mark::New {
            visit(i, steps, &index, &mut marks, &mut stack)
        } else {
            None
        }
    })
}

/// Render a plan in the wire format accepted by [`parse_plan`].
pub fn serialize_plan(plan: &DecompositionPlan) -> String {
    let list = |v: &[String]| if v.is_empty() { "-".to_string() } else { v.join(",") };
    let mut out = String::from("```plan\nENTITIES\n");
    for e in &plan.entities {
        out.push_str(&format!("{}\t{}\t{}\n", e.nl_phrase, e.binding, e.note));
    }
    out.push_str("CONDITIONS\n");
    for c in &plan.conditions {
        let kind = if c.requires_subquery { "subquery" } else { "plain" };
        out.push_str(&format!("{}\t{}\t{}\t{kind}\n", c.id, c.nl_phrase, c.predicate));
    }
    out.push_str("STEPS\n");
    for s in &plan.steps {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            s.id,
            s.description,
            list(&s.depends_on),
            list(&s.conditions)
        ));
    }
    out.push_str("OUTPUT\n");
    for c in &plan.output.columns {
        out.push_str(&format!("column\t{c}\n"));
    }
    if let Some(o) = &plan.output.ordering {
        out.push_str(&format!("order\t{o}\n"));
    }
    if let Some(l) = plan.output.limit {
        out.push_str(&format!("limit\t{l}\n"));
    }
    out.push_str("```\n");
    out
}

/// Column references of an expression as (qualifier, column) pairs.
pub(crate) fn expression_columns(expr: &str) -> Result<Vec<(Option<String>, String)>, String> {
    let dialect = SQLiteDialect {};
    let parsed: Expr = Parser::new(&dialect)
        .try_with_sql(expr)
        .and_then(|mut p| p.parse_expr())
        .map_err(|e| e.to_string())?;
    let mut refs = Vec::new();
    let _ = visit_expressions(&parsed, |e| {
        match e {
            Expr::Identifier(id) if id.quote_style != Some('\'') => refs.push((None, id.value.clone())),
            Expr::CompoundIdentifier(parts) if parts.len() >= 2 => {
                let n = parts.len();
                refs.push((Some(parts[n - 2].value.clone()), parts[n - 1].value.clone()));
            }
            _ => {}
        }
        ControlFlow::<()>::Continue(())
    });
    Ok(refs)
}

/// Verify that every entity binding points at catalog columns.
pub fn check_bindings(plan: &DecompositionPlan, catalog: &SchemaCatalog, raw: &str) -> Result<(), PlanParseError> {
    let err = |i: usize, message: String| PlanParseError {
        path: format!("entities[{i}].binding"),
        message,
        raw: raw.to_string(),
    };
    for (i, e) in plan.entities.iter().enumerate() {
        match &e.binding {
            Binding::Column { table, column } => {
                if !catalog.has_column(table, column) {
                    return Err(err(i, format!("unknown column {table}.{column}")));
                }
            }
            Binding::Expression(expr) => {
                for (table, column) in expression_columns(expr).map_err(|m| err(i, format!("bad expression: {m}")))? {
                    let known = match &table {
                        Some(t) => catalog.has_column(t, &column),
                        None => !catalog.tables_with_column(&column).is_empty(),
                    };
                    if !known {
                        let name = table.map_or(column.clone(), |t| format!("{t}.{column}"));
                        return Err(err(i, format!("expression references unknown column {name}")));
                    }
                }
            }
        }
    }
    Ok(())
}

/// A parsed plan plus the tokens spent producing it.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub plan: DecompositionPlan,
    pub raw: String,
    pub usage: TokenUsage,
    pub calls: u32,
}

pub fn decomposer_prompt(question: &Question, context: &SchemaContext, templates: &PromptTemplates) -> String {
    let mut q = question.text.clone();
    if let Some(hint) = question.evidence_hint.as_deref().filter(|h| !h.trim().is_empty()) {
        q.push_str(&format!("\nHint: {hint}"));
    }
    render(
        &templates.decomposer,
        &[
            ("catalog", &context.catalog.summary()),
            ("segments", &context.segments_text()),
            ("evidence", &context.evidence_text()),
            ("question", &q),
        ],
    )
}

/// Produce a checked [`DecompositionPlan`] for `question`.
///
/// A transport failure is retried once. A plan that fails to parse is
/// re-requested once with the parse error appended to the prompt.
pub fn decompose(
    question: &Question,
    context: &SchemaContext,
    backend: &BackendSpec,
    templates: &PromptTemplates,
    params: &GenerationParams,
) -> Result<Decomposition, DecomposeError> {
    backend.expect_role(Role::Decomposer)?;
    let base_prompt = decomposer_prompt(question, context, templates);
    let mut usage = TokenUsage::default();
    let mut calls = 0;

    let mut call = |prompt: &str, usage: &mut TokenUsage| -> Result<String, GatewayError> {
        let mut attempt = || {
            calls += 1;
            gateway::complete(backend, prompt, params)
        };
        let c = match attempt() {
            Err(e) if e.is_transport() => attempt()?,
            other => other?,
        };
        *usage += c.usage;
        Ok(c.text)
    };

    let raw = call(&base_prompt, &mut usage)?;
    let first = parse_plan(&raw).and_then(|p| check_bindings(&p, &context.catalog, &raw).map(|_| p));
    let (plan, raw) = match first {
        Ok(p) => (p, raw),
        Err(e) => {
            let retry = format!(
                "{base_prompt}\n\nYour previous answer could not be used ({e}).\nPrevious answer:\n{raw}\nReturn a corrected plan."
            );
            let raw = call(&retry, &mut usage)?;
            let plan = parse_plan(&raw)?;
            check_bindings(&plan, &context.catalog, &raw)?;
            (plan, raw)
        }
    };
    Ok(Decomposition {
        plan,
        raw,
        usage,
        calls,
    })
}
