//! Four-stage validation of candidate SQL.
//!
//! Stages run in a fixed order: evidence-based value correction, syntax and
//! reference checks against the catalog, sandboxed execution, and semantic
//! checks of the result against the plan. A `Fail` stops the pipeline; the
//! value check never fails.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::ControlFlow;
use std::path::Path;
use std::time::{Duration, Instant};

use rusqlite::limits::Limit;
use rusqlite::types::ValueRef;
use rusqlite::{Connection, ErrorCode};
use serde::{Deserialize, Serialize};
use sqlparser::ast::{
    Expr, GroupByExpr, JoinConstraint, JoinOperator, ObjectName, ObjectNamePart, OrderBy, OrderByKind, Query,
    SelectItem, SelectItemQualifiedWildcardKind, SetExpr, Statement, TableFactor, Visit, Visitor,
};
use sqlparser::dialect::SQLiteDialect;
use sqlparser::parser::Parser;

use crate::decomposer::DecompositionPlan;
use crate::extractor::{open_read_only, EvidenceMap, SchemaCatalog, SchemaContext};
use crate::generator::DiagnosticBundle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageKind {
    ValueCheck,
    Syntax,
    Execution,
    Semantic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageStatus {
    Pass,
    Warn,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageResult {
    pub stage: StageKind,
    pub status: StageStatus,
    pub messages: Vec<String>,
}

impl StageResult {
    fn new(stage: StageKind, errors: Vec<String>, warnings: Vec<String>) -> Self {
        if !errors.is_empty() {
            StageResult {
                stage,
                status: StageStatus::Fail,
                messages: errors,
            }
        } else if !warnings.is_empty() {
            StageResult {
                stage,
                status: StageStatus::Warn,
                messages: warnings,
            }
        } else {
            StageResult {
                stage,
                status: StageStatus::Pass,
                messages: Vec::new(),
            }
        }
    }

    fn fail(stage: StageKind, message: impl Into<String>) -> Self {
        Self::new(stage, vec![message.into()], Vec::new())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Correction {
    pub original_literal: String,
    pub corrected_literal: String,
    pub table: String,
    pub column: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub stage_results: Vec<StageResult>,
    pub corrections: Vec<Correction>,
}

impl ValidationReport {
    pub fn failed(&self) -> bool {
        self.stage_results.iter().any(|s| s.status == StageStatus::Fail)
    }

    fn messages(&self, status: StageStatus) -> Vec<String> {
        self.stage_results
            .iter()
            .filter(|s| s.status == status)
            .flat_map(|s| s.messages.iter().cloned())
            .collect()
    }
}

/// A scalar as returned by the database.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
    Blob(Vec<u8>),
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Integer(i) => Some(*i as f64),
            Value::Real(r) => Some(*r),
            _ => None,
        }
    }
}

impl From<ValueRef<'_>> for Value {
    fn from(v: ValueRef<'_>) -> Self {
        match v {
            ValueRef::Null => Value::Null,
            ValueRef::Integer(i) => Value::Integer(i),
            ValueRef::Real(r) => Value::Real(r),
            ValueRef::Text(t) => Value::Text(String::from_utf8_lossy(t).into_owned()),
            ValueRef::Blob(b) => Value::Blob(b.to_vec()),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Null => f.write_str("NULL"),
            Value::Integer(i) => write!(f, "{i}"),
            Value::Real(r) => write!(f, "{r}"),
            Value::Text(t) => f.write_str(t),
            Value::Blob(b) => write!(f, "<{} bytes>", b.len()),
        }
    }
}

pub type Row = Vec<Value>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub column_names: Vec<String>,
    pub rows: Vec<Row>,
    pub runtime: Duration,
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SandboxLimits {
    pub timeout_ms: u64,
    pub max_rows: usize,
}

impl Default for SandboxLimits {
    fn default() -> Self {
        SandboxLimits {
            timeout_ms: 30_000,
            max_rows: 10_000,
        }
    }
}

impl SandboxLimits {
    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }
}

// ---------------------------------------------------------------------------
// Stage 1: evidence-based value correction
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Quoted(String),
    Str { value: String, start: usize, end: usize },
    Sym(String),
    Other,
}

fn lex(sql: &str) -> Vec<Tok> {
    let b = sql.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        let c = b[i];
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c == b'-' && b.get(i + 1) == Some(&b'-') {
            while i < b.len() && b[i] != b'\n' {
                i += 1;
            }
        } else if c == b'/' && b.get(i + 1) == Some(&b'*') {
            i += 2;
            while i < b.len() && !(b[i] == b'*' && b.get(i + 1) == Some(&b'/')) {
                i += 1;
            }
            i = (i + 2).min(b.len());
        } else if c == b'\'' {
            let start = i;
            let mut value = Vec::new();
            i += 1;
            loop {
                match b.get(i) {
                    None => break,
                    Some(b'\'') if b.get(i + 1) == Some(&b'\'') => {
                        value.push(b'\'');
                        i += 2;
                    }
                    Some(b'\'') => {
                        i += 1;
                        break;
                    }
                    Some(&x) => {
                        value.push(x);
                        i += 1;
                    }
                }
            }
            out.push(Tok::Str {
                value: String::from_utf8_lossy(&value).into_owned(),
                start,
                end: i,
            });
        } else if c == b'"' || c == b'`' || c == b'[' {
            let close = if c == b'[' { b']' } else { c };
            let s = i + 1;
            i += 1;
            while i < b.len() && b[i] != close {
                i += 1;
            }
            out.push(Tok::Quoted(String::from_utf8_lossy(&b[s..i.min(b.len())]).into_owned()));
            i = (i + 1).min(b.len());
        } else if c.is_ascii_alphabetic() || c == b'_' || c >= 0x80 {
            let s = i;
            while i < b.len() && (b[i].is_ascii_alphanumeric() || b[i] == b'_' || b[i] == b'$' || b[i] >= 0x80) {
                i += 1;
            }
            out.push(Tok::Word(sql[s..i].to_string()));
        } else if c.is_ascii_digit() {
            while i < b.len() && (b[i].is_ascii_alphanumeric() || b[i] == b'.') {
                i += 1;
            }
            out.push(Tok::Other);
        } else {
            let two = sql.get(i..i + 2).unwrap_or("");
            if ["==", "!=", "<>", "<=", ">=", "||"].contains(&two) {
                out.push(Tok::Sym(two.to_string()));
                i += 2;
            } else {
                out.push(Tok::Sym((c as char).to_string()));
                i += 1;
            }
        }
    }
    out
}

const KEYWORDS: &[&str] = &[
    "SELECT", "FROM", "WHERE", "AND", "OR", "NOT", "IN", "ON", "JOIN", "INNER", "LEFT", "RIGHT", "OUTER", "CROSS",
    "FULL", "NATURAL", "AS", "IS", "NULL", "LIKE", "GLOB", "BETWEEN", "CASE", "WHEN", "THEN", "ELSE", "END", "GROUP",
    "ORDER", "BY", "HAVING", "LIMIT", "OFFSET", "UNION", "ALL", "INTERSECT", "EXCEPT", "DISTINCT", "WITH", "USING",
    "EXISTS", "ASC", "DESC", "CAST", "VALUES",
];

fn is_keyword(w: &str) -> bool {
    KEYWORDS.iter().any(|k| k.eq_ignore_ascii_case(w))
}

fn ident(t: &Tok) -> Option<&str> {
    match t {
        Tok::Word(w) if !is_keyword(w) => Some(w),
        Tok::Quoted(q) => Some(q),
        _ => None,
    }
}

fn is_sym(t: Option<&Tok>, s: &str) -> bool {
    matches!(t, Some(Tok::Sym(x)) if x == s)
}

fn is_word(t: Option<&Tok>, w: &str) -> bool {
    matches!(t, Some(Tok::Word(x)) if x.eq_ignore_ascii_case(w))
}

/// Column reference ending at token `end` (inclusive): `col` or `qual.col`.
fn colref_ending_at(toks: &[Tok], end: usize) -> Option<(Option<String>, String)> {
    let col = ident(toks.get(end)?)?.to_string();
    if end >= 2 && is_sym(toks.get(end - 1), ".") {
        if let Some(q) = toks.get(end - 2).and_then(ident) {
            return Some((Some(q.to_string()), col));
        }
    }
    Some((None, col))
}

fn colref_starting_at(toks: &[Tok], start: usize) -> Option<(Option<String>, String)> {
    let first = ident(toks.get(start)?)?.to_string();
    if is_sym(toks.get(start + 1), ".") {
        if let Some(c) = toks.get(start + 2).and_then(ident) {
            return Some((Some(first), c.to_string()));
        }
    }
    Some((None, first))
}

/// Alias → table, from `FROM t [AS] a` and `JOIN t [AS] a` clauses.
fn alias_map(toks: &[Tok]) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    let mut i = 0;
    while i < toks.len() {
        if is_word(toks.get(i), "FROM") || is_word(toks.get(i), "JOIN") {
            let mut j = i + 1;
            while let Some(table) = toks.get(j).and_then(ident) {
                let table = table.to_string();
                map.insert(table.to_lowercase(), table.clone());
                j += 1;
                if is_word(toks.get(j), "AS") {
                    j += 1;
                }
                if let Some(alias) = toks.get(j).and_then(ident) {
                    map.insert(alias.to_lowercase(), table);
                    j += 1;
                }
                if is_sym(toks.get(j), ",") {
                    j += 1;
                } else {
                    break;
                }
            }
            i = j;
        } else {
            i += 1;
        }
    }
    map
}

/// The column compared against the string literal at token `i`, for `=`, `==` and `IN (…)`.
fn predicate_column(toks: &[Tok], i: usize) -> Option<(Option<String>, String)> {
    if i >= 2 && (is_sym(toks.get(i - 1), "=") || is_sym(toks.get(i - 1), "==")) {
        return colref_ending_at(toks, i - 2);
    }
    if is_sym(toks.get(i + 1), "=") || is_sym(toks.get(i + 1), "==") {
        return colref_starting_at(toks, i + 2);
    }
    // Walk back over an IN list: ( 'a' , 'b' , <here>
    let mut j = i;
    while j >= 1 {
        match toks.get(j - 1) {
            Some(Tok::Sym(s)) if s == "," => {
                if j >= 2 && matches!(toks.get(j - 2), Some(Tok::Str { .. })) {
                    j -= 2;
                } else {
                    return None;
                }
            }
            Some(Tok::Sym(s)) if s == "(" => {
                if j >= 2 && is_word(toks.get(j - 2), "IN") {
                    let mut k = j - 2;
                    if k >= 1 && is_word(toks.get(k - 1), "NOT") {
                        k -= 1;
                    }
                    return k.checked_sub(1).and_then(|e| colref_ending_at(toks, e));
                }
                return None;
            }
            _ => return None,
        }
    }
    None
}

fn quote_literal(s: &str) -> String {
    format!("'{}'", s.replace('\'', "''"))
}

/// Replace natural-language literals in equality and `IN` predicates with the
/// exact stored values recorded in the evidence.
///
/// A literal already equal to some evidence value for its column is left
/// alone. Otherwise a case-insensitive match against an evidence value, then
/// against an evidence term, selects the replacement. `LIKE` patterns are
/// never touched.
pub fn autocorrect_values(sql: &str, evidence: &EvidenceMap) -> (String, Vec<Correction>) {
    if evidence.is_empty() {
        return (sql.to_string(), Vec::new());
    }
    let toks = lex(sql);
    let aliases = alias_map(&toks);
    let mut edits: Vec<(usize, usize, String)> = Vec::new();
    let mut corrections = Vec::new();
    for (i, t) in toks.iter().enumerate() {
        let Tok::Str { value, start, end } = t else { continue };
        let Some((qualifier, column)) = predicate_column(&toks, i) else { continue };
        let table = qualifier.as_ref().and_then(|q| aliases.get(&q.to_lowercase()));
        let candidates: Vec<_> = evidence
            .for_column(&column)
            .filter(|e| table.is_none_or(|t| e.table.eq_ignore_ascii_case(t)))
            .collect();
        if candidates.iter().any(|e| e.db_value == *value) {
            continue;
        }
        let lower = value.to_lowercase();
        let hit = candidates
            .iter()
            .find(|e| e.db_value.to_lowercase() == lower)
            .or_else(|| candidates.iter().find(|e| e.nl_term.to_lowercase() == lower));
        if let Some(e) = hit {
            edits.push((*start, *end, quote_literal(&e.db_value)));
            corrections.push(Correction {
                original_literal: value.clone(),
                corrected_literal: e.db_value.clone(),
                table: e.table.clone(),
                column: e.column.clone(),
            });
        }
    }
    let mut out = sql.to_string();
    for (start, end, text) in edits.into_iter().rev() {
        out.replace_range(start..end, &text);
    }
    (out, corrections)
}

// ---------------------------------------------------------------------------
// Stage 2: syntax and reference validation
// ---------------------------------------------------------------------------

pub fn parse_sql(sql: &str) -> Result<Vec<Statement>, String> {
    Parser::parse_sql(&SQLiteDialect {}, sql).map_err(|e| e.to_string())
}

const ROWID_NAMES: [&str; 3] = ["rowid", "oid", "_rowid_"];

#[derive(Debug, Clone)]
struct Relation {
    binding: String,
    table: String,
    columns: Option<Vec<String>>,
}

impl Relation {
    fn has(&self, col: &str) -> bool {
        ROWID_NAMES.iter().any(|r| r.eq_ignore_ascii_case(col))
            || self
                .columns
                .as_ref()
                .is_none_or(|cs| cs.iter().any(|c| c.eq_ignore_ascii_case(col)))
    }
}

#[derive(Debug, Clone, Default)]
struct Scope {
    relations: Vec<Relation>,
    aliases: Vec<String>,
}

impl Scope {
    fn relation(&self, name: &str) -> Option<&Relation> {
        self.relations
            .iter()
            .find(|r| r.binding.eq_ignore_ascii_case(name))
            .or_else(|| self.relations.iter().find(|r| r.table.eq_ignore_ascii_case(name)))
    }

    fn resolves(&self, col: &str) -> bool {
        self.relations.iter().any(|r| r.has(col)) || self.aliases.iter().any(|a| a.eq_ignore_ascii_case(col))
    }

    fn table_list(&self) -> String {
        let mut names: Vec<&str> = self.relations.iter().map(|r| r.table.as_str()).filter(|t| !t.is_empty()).collect();
        names.dedup();
        names.join(", ")
    }
}

/// Identifier references and directly nested subqueries of one expression.
#[derive(Default)]
struct ExprRefs {
    depth: usize,
    idents: Vec<(Option<String>, String, Option<char>)>,
    subqueries: Vec<Query>,
    wildcards: Vec<String>,
    aggregates: bool,
}

impl Visitor for ExprRefs {
    type Break = ();

    fn pre_visit_query(&mut self, query: &Query) -> ControlFlow<()> {
        if self.depth == 0 {
            self.subqueries.push(query.clone());
        }
        self.depth += 1;
        ControlFlow::Continue(())
    }

    fn post_visit_query(&mut self, _query: &Query) -> ControlFlow<()> {
        self.depth -= 1;
        ControlFlow::Continue(())
    }

    fn pre_visit_expr(&mut self, expr: &Expr) -> ControlFlow<()> {
        if self.depth > 0 {
            return ControlFlow::Continue(());
        }
        match expr {
            Expr::Identifier(id) => self.idents.push((None, id.value.clone(), id.quote_style)),
            Expr::CompoundIdentifier(parts) if parts.len() >= 2 => {
                let n = parts.len();
                self.idents.push((Some(parts[n - 2].value.clone()), parts[n - 1].value.clone(), parts[n - 1].quote_style));
            }
            Expr::QualifiedWildcard(name, _) => self.wildcards.push(last_name(name)),
            Expr::Function(f) => {
                let name = last_name(&f.name);
                if ["COUNT", "SUM", "AVG", "MIN", "MAX", "TOTAL", "GROUP_CONCAT"]
                    .iter()
                    .any(|a| a.eq_ignore_ascii_case(&name))
                {
                    self.aggregates = true;
                }
            }
            _ => {}
        }
        ControlFlow::Continue(())
    }
}

fn last_name(name: &ObjectName) -> String {
    match name.0.last() {
        Some(ObjectNamePart::Identifier(id)) => id.value.clone(),
        Some(ObjectNamePart::Function(f)) => f.name.value.clone(),
        None => String::new(),
    }
}

fn collect_refs<V: Visit>(node: &V) -> ExprRefs {
    let mut refs = ExprRefs::default();
    let _ = node.visit(&mut refs);
    refs
}

struct Resolver<'a> {
    catalog: &'a SchemaCatalog,
    ctes: Vec<(String, Option<Vec<String>>)>,
    errors: Vec<String>,
    warnings: Vec<String>,
}

impl<'a> Resolver<'a> {
    fn new(catalog: &'a SchemaCatalog) -> Self {
        Resolver {
            catalog,
            ctes: Vec::new(),
            errors: Vec::new(),
            warnings: Vec::new(),
        }
    }

    fn error(&mut self, msg: String) {
        if !self.errors.contains(&msg) {
            self.errors.push(msg);
        }
    }

    fn query(&mut self, q: &Query, outer: &[Scope]) -> Option<Vec<String>> {
        let mark = self.ctes.len();
        if let Some(with) = &q.with {
            for cte in &with.cte_tables {
                let declared: Vec<String> = cte.alias.columns.iter().map(|c| c.name.value.clone()).collect();
                let name = cte.alias.name.value.clone();
                // Recursive CTEs may reference themselves.
                self.ctes.push((name.clone(), (!declared.is_empty()).then(|| declared.clone())));
                let cols = self.query(&cte.query, outer);
                self.ctes.pop();
                let cols = if declared.is_empty() { cols } else { Some(declared) };
                self.ctes.push((name, cols));
            }
        }
        let cols = self.set_expr(&q.body, outer, q.order_by.as_ref());
        self.ctes.truncate(mark);
        cols
    }

    fn set_expr(&mut self, body: &SetExpr, outer: &[Scope], order_by: Option<&OrderBy>) -> Option<Vec<String>> {
        match body {
            SetExpr::Select(s) => self.select(s, outer, order_by),
            SetExpr::Query(q) => self.query(q, outer),
            SetExpr::SetOperation { left, right, .. } => {
                let cols = self.set_expr(left, outer, None);
                self.set_expr(right, outer, None);
                cols
            }
            SetExpr::Values(v) => {
                for row in &v.rows {
                    for e in row {
                        self.check(e, &Scope::default(), outer);
                    }
                }
                None
            }
            other => {
                self.error(format!("unsupported query body: {other}"));
                None
            }
        }
    }

    fn table_factor(&mut self, tf: &TableFactor, outer: &[Scope], scope: &mut Scope) {
        match tf {
            TableFactor::Table { name, alias, args, .. } => {
                let table = last_name(name);
                let binding = alias.as_ref().map_or(table.clone(), |a| a.name.value.clone());
                let columns = if args.is_some() {
                    None
                } else if let Some((_, cols)) = self.ctes.iter().rev().find(|(n, _)| n.eq_ignore_ascii_case(&table)) {
                    cols.clone()
                } else if let Some(t) = self.catalog.table(&table) {
                    Some(t.columns.iter().map(|c| c.name.clone()).collect())
                } else {
                    self.error(format!("unknown table {table}"));
                    None
                };
                scope.relations.push(Relation {
                    binding,
                    table,
                    columns,
                });
            }
            TableFactor::Derived { subquery, alias, .. } => {
                let mut cols = self.query(subquery, outer);
                let binding = alias.as_ref().map(|a| a.name.value.clone()).unwrap_or_default();
                if let Some(a) = alias.as_ref().filter(|a| !a.columns.is_empty()) {
                    cols = Some(a.columns.iter().map(|c| c.name.value.clone()).collect());
                }
                scope.relations.push(Relation {
                    table: binding.clone(),
                    binding,
                    columns: cols,
                });
            }
            TableFactor::NestedJoin { table_with_joins, .. } => {
                self.table_factor(&table_with_joins.relation, outer, scope);
                for j in &table_with_joins.joins {
                    self.table_factor(&j.relation, outer, scope);
                }
            }
            _ => scope.relations.push(Relation {
                binding: String::new(),
                table: String::new(),
                columns: None,
            }),
        }
    }

    fn check<V: Visit>(&mut self, node: &V, scope: &Scope, outer: &[Scope]) {
        let refs = collect_refs(node);
        for (qualifier, col, quote) in refs.idents {
            match qualifier {
                None => {
                    if ROWID_NAMES.iter().any(|r| r.eq_ignore_ascii_case(&col))
                        || scope.resolves(&col)
                        || outer.iter().any(|s| s.resolves(&col))
                        // SQLite reads an unresolvable "x" as a string literal.
                        || quote == Some('"')
                    {
                        continue;
                    }
                    let tables = scope.table_list();
                    if tables.is_empty() {
                        self.error(format!("unknown column {col}"));
                    } else {
                        self.error(format!("unknown column {col} in {tables}"));
                    }
                }
                Some(q) => {
                    let rel = scope.relation(&q).or_else(|| outer.iter().find_map(|s| s.relation(&q)));
                    match rel {
                        None => self.error(format!("unknown table or alias {q} (referenced as {q}.{col})")),
                        Some(r) if !r.has(&col) => {
                            let msg = format!("unknown column {col} in {}", r.table);
                            self.error(msg);
                        }
                        Some(_) => {}
                    }
                }
            }
        }
        for w in refs.wildcards {
            if scope.relation(&w).is_none() {
                self.error(format!("unknown table or alias {w} in {w}.*"));
            }
        }
        if !refs.subqueries.is_empty() {
            let mut nested = Vec::with_capacity(outer.len() + 1);
            nested.push(scope.clone());
            nested.extend_from_slice(outer);
            for q in &refs.subqueries {
                self.query(q, &nested);
            }
        }
    }

    fn select(&mut self, s: &sqlparser::ast::Select, outer: &[Scope], order_by: Option<&OrderBy>) -> Option<Vec<String>> {
        let mut scope = Scope::default();
        let mut on_exprs = Vec::new();
        for twj in &s.from {
            self.table_factor(&twj.relation, outer, &mut scope);
            for j in &twj.joins {
                self.table_factor(&j.relation, outer, &mut scope);
                let constraint = match &j.join_operator {
                    JoinOperator::Join(c)
                    | JoinOperator::Inner(c)
                    | JoinOperator::Left(c)
                    | JoinOperator::LeftOuter(c)
                    | JoinOperator::Right(c)
                    | JoinOperator::RightOuter(c)
                    | JoinOperator::FullOuter(c) => Some(c),
                    _ => None,
                };
                match constraint {
                    Some(JoinConstraint::None) => self.warnings.push(format!("JOIN without ON/USING clause: {}", j.relation)),
                    Some(JoinConstraint::On(e)) => on_exprs.push(e.clone()),
                    Some(JoinConstraint::Using(cols)) => {
                        for c in cols {
                            let c = last_name(c);
                            if !scope.resolves(&c) {
                                self.error(format!("unknown column {c} in USING clause"));
                            }
                        }
                    }
                    _ => {}
                }
            }
        }
        scope.aliases = s
            .projection
            .iter()
            .filter_map(|p| match p {
                SelectItem::ExprWithAlias { alias, .. } => Some(alias.value.clone()),
                _ => None,
            })
            .collect();

        for e in &on_exprs {
            self.check(e, &scope, outer);
        }
        let mut outputs: Option<Vec<String>> = Some(Vec::new());
        for item in &s.projection {
            match item {
                SelectItem::UnnamedExpr(e) => {
                    self.check(e, &scope, outer);
                    let name = match e {
                        Expr::Identifier(id) => id.value.clone(),
                        Expr::CompoundIdentifier(p) => p.last().map(|i| i.value.clone()).unwrap_or_default(),
                        other => other.to_string(),
                    };
                    if let Some(o) = outputs.as_mut() {
                        o.push(name);
                    }
                }
                SelectItem::ExprWithAlias { expr, alias } => {
                    self.check(expr, &scope, outer);
                    if let Some(o) = outputs.as_mut() {
                        o.push(alias.value.clone());
                    }
                }
                SelectItem::Wildcard(_) => {
                    let all: Option<Vec<String>> = scope
                        .relations
                        .iter()
                        .map(|r| r.columns.clone())
                        .collect::<Option<Vec<_>>>()
                        .map(|v| v.concat());
                    match (outputs.as_mut(), all) {
                        (Some(o), Some(all)) => o.extend(all),
                        _ => outputs = None,
                    }
                }
                SelectItem::QualifiedWildcard(kind, _) => {
                    let name = match kind {
                        SelectItemQualifiedWildcardKind::ObjectName(n) => last_name(n),
                        SelectItemQualifiedWildcardKind::Expr(e) => e.to_string(),
                    };
                    match scope.relation(&name).map(|r| r.columns.clone()) {
                        None => {
                            self.error(format!("unknown table or alias {name} in {name}.*"));
                            outputs = None;
                        }
                        Some(cols) => match (outputs.as_mut(), cols) {
                            (Some(o), Some(c)) => o.extend(c),
                            _ => outputs = None,
                        },
                    }
                }
            }
        }
        if let Some(w) = &s.selection {
            self.check(w, &scope, outer);
        }
        if let GroupByExpr::Expressions(exprs, _) = &s.group_by {
            for e in exprs {
                self.check(e, &scope, outer);
            }
        }
        if let Some(h) = &s.having {
            self.check(h, &scope, outer);
        }
        if let Some(OrderBy {
            kind: OrderByKind::Expressions(items),
            ..
        }) = order_by
        {
            for item in items {
                self.check(&item.expr, &scope, outer);
            }
        }
        outputs
    }
}

/// Check syntax, statement kind, table and column references, and JOIN formation.
pub fn validate_syntax(sql: &str, catalog: &SchemaCatalog) -> StageResult {
    let statements = match parse_sql(sql) {
        Ok(s) => s,
        Err(e) => return StageResult::fail(StageKind::Syntax, format!("parse error: {e}")),
    };
    match statements.as_slice() {
        [] => StageResult::fail(StageKind::Syntax, "empty statement"),
        [Statement::Query(q)] => {
            let mut r = Resolver::new(catalog);
            r.query(q, &[]);
            StageResult::new(StageKind::Syntax, r.errors, r.warnings)
        }
        [other] => StageResult::fail(
            StageKind::Syntax,
            format!(
                "only read-only SELECT queries are allowed, got: {}",
                other.to_string().split_whitespace().next().unwrap_or("statement")
            ),
        ),
        _ => StageResult::fail(
            StageKind::Syntax,
            "multiple statements: a candidate must be a single statement",
        ),
    }
}

/// Syntax stage with a dialect escape hatch: when the parser rejects text that
/// the database itself accepts, the stage downgrades to a warning.
fn syntax_stage(sql: &str, catalog: &SchemaCatalog, conn: &Connection) -> StageResult {
    let result = validate_syntax(sql, catalog);
    let parser_failure = result.status == StageStatus::Fail
        && result.messages.len() == 1
        && result.messages[0].starts_with("parse error");
    if parser_failure {
        if let Ok(stmt) = conn.prepare(sql) {
            if stmt.readonly() {
                return StageResult::new(
                    StageKind::Syntax,
                    vec![],
                    vec![format!("reference checks skipped; {}", result.messages[0])],
                );
            }
        }
    }
    result
}

// ---------------------------------------------------------------------------
// Stage 3: sandboxed execution
// ---------------------------------------------------------------------------

/// First keyword of `sql`, skipping whitespace, comments and opening parentheses.
fn leading_keyword(sql: &str) -> &str {
    let mut rest = sql;
    loop {
        let t = rest.trim_start_matches(|c: char| c.is_whitespace() || c == '(');
        if let Some(after) = t.strip_prefix("--") {
            rest = after.split_once('\n').map_or("", |(_, tail)| tail);
        } else if let Some(after) = t.strip_prefix("/*") {
            rest = after.split_once("*/").map_or("", |(_, tail)| tail);
        } else {
            let end = t.find(|c: char| !c.is_ascii_alphabetic()).unwrap_or(t.len());
            return &t[..end];
        }
    }
}

fn is_query_keyword(word: &str) -> bool {
    ["SELECT", "WITH", "VALUES"].iter().any(|k| k.eq_ignore_ascii_case(word))
}

fn sandbox_connection(db: &Path) -> Result<Connection, String> {
    let conn = open_read_only(db).map_err(|e| e.to_string())?;
    conn.set_limit(Limit::SQLITE_LIMIT_ATTACHED, 0).map_err(|e| e.to_string())?;
    conn.execute_batch("PRAGMA query_only = ON;").map_err(|e| e.to_string())?;
    Ok(conn)
}

fn run_on(conn: &Connection, sql: &str, limits: &SandboxLimits) -> Result<ExecutionOutcome, String> {
    let deadline = Instant::now() + limits.timeout();
    conn.progress_handler(1_000, Some(move || Instant::now() >= deadline));
    conn.execute_batch("BEGIN").map_err(|e| e.to_string())?;
    let result = (|| {
        let mut stmt = conn.prepare(sql).map_err(|e| match e {
            rusqlite::Error::MultipleStatement => "multiple statements: a candidate must be a single statement".to_string(),
            other => other.to_string(),
        })?;
        if !stmt.readonly() || !is_query_keyword(leading_keyword(sql)) {
            return Err("attempt to write a readonly database: only read-only queries run in the sandbox".to_string());
        }
        let column_names: Vec<String> = stmt.column_names().into_iter().map(String::from).collect();
        let arity = column_names.len();
        let started = Instant::now();
        let mut rows = stmt.query([]).map_err(|e| e.to_string())?;
        let mut out = Vec::new();
        let mut truncated = false;
        loop {
            let next = rows.next().map_err(|e| match &e {
                rusqlite::Error::SqliteFailure(f, _) if f.code == ErrorCode::OperationInterrupted => {
                    format!("timeout after {:?}", limits.timeout())
                }
                _ => e.to_string(),
            })?;
            let Some(row) = next else { break };
            if out.len() == limits.max_rows {
                truncated = true;
                break;
            }
            out.push((0..arity).map(|i| row.get_ref(i).map(Value::from)).collect::<Result<Vec<_>, _>>().map_err(|e| e.to_string())?);
        }
        let runtime = started.elapsed().max(Duration::from_nanos(1));
        Ok(ExecutionOutcome {
            column_names,
            rows: out,
            runtime,
            truncated,
        })
    })();
    let _ = conn.execute_batch("ROLLBACK");
    conn.progress_handler(0, None::<fn() -> bool>);
    result
}

/// Execute one read-only statement inside an always-rolled-back transaction.
pub fn execute_sandboxed(sql: &str, db: &Path, limits: &SandboxLimits) -> Result<ExecutionOutcome, String> {
    let conn = sandbox_connection(db)?;
    run_on(&conn, sql, limits)
}

/// A reusable sandboxed connection for repeated executions against one database.
pub struct Sandbox {
    conn: Connection,
}

impl Sandbox {
    pub fn open(db: &Path) -> Result<Self, String> {
        Ok(Sandbox {
            conn: sandbox_connection(db)?,
        })
    }

    pub fn execute(&self, sql: &str, limits: &SandboxLimits) -> Result<ExecutionOutcome, String> {
        run_on(&self.conn, sql, limits)
    }
}

// ---------------------------------------------------------------------------
// Stage 4: semantic validation
// ---------------------------------------------------------------------------

/// Whether the outermost SELECT aggregates (aggregate call in its projection or HAVING, or a GROUP BY).
pub fn sql_has_aggregate(sql: &str) -> Option<bool> {
    let statements = parse_sql(sql).ok()?;
    let Some(Statement::Query(q)) = statements.first() else {
        return None;
    };
    let mut body = q.body.as_ref();
    loop {
        match body {
            SetExpr::Select(s) => {
                let grouped = matches!(&s.group_by, GroupByExpr::Expressions(e, _) if !e.is_empty())
                    || matches!(&s.group_by, GroupByExpr::All(_));
                let in_projection = s.projection.iter().any(|p| collect_refs(p).aggregates);
                let in_having = s.having.as_ref().is_some_and(|h| collect_refs(h).aggregates);
                return Some(grouped || in_projection || in_having);
            }
            SetExpr::Query(inner) => body = inner.body.as_ref(),
            SetExpr::SetOperation { left, .. } => body = left.as_ref(),
            _ => return Some(false),
        }
    }
}

/// Compare the result shape with the plan's output specification.
pub fn validate_semantics(outcome: &ExecutionOutcome, plan: &DecompositionPlan, sql: &str) -> StageResult {
    let mut errors = Vec::new();
    let mut warnings = Vec::new();
    let expected = plan.output.columns.len();
    if outcome.column_names.len() != expected {
        errors.push(format!(
            "result has {} columns but the plan expects {expected}",
            outcome.column_names.len()
        ));
    }
    if outcome.rows.is_empty() {
        warnings.push("empty result".to_string());
    }
    if let Some(sql_agg) = sql_has_aggregate(sql) {
        let plan_agg = plan.output.expects_aggregate();
        if plan_agg && !sql_agg {
            warnings.push("aggregation mismatch: plan expects an aggregate output but the query does not aggregate".into());
        } else if sql_agg && !plan_agg {
            warnings.push("aggregation mismatch: query aggregates but the plan expects row-level output".into());
        }
    }
    StageResult::new(StageKind::Semantic, errors, warnings)
}

// ---------------------------------------------------------------------------
// Full pipeline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Accepted {
        sql: String,
        outcome: ExecutionOutcome,
        report: ValidationReport,
    },
    Rejected {
        bundle: DiagnosticBundle,
        report: ValidationReport,
    },
}

impl Verdict {
    pub fn is_accepted(&self) -> bool {
        matches!(self, Verdict::Accepted { .. })
    }

    pub fn report(&self) -> &ValidationReport {
        match self {
            Verdict::Accepted { report, .. } | Verdict::Rejected { report, .. } => report,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationPolicy {
    pub limits: SandboxLimits,
    /// Promote semantic warnings to failures.
    pub strict_semantic: bool,
}

fn reject(sql: String, report: ValidationReport) -> Verdict {
    let mut execution_errors = report.messages(StageStatus::Fail);
    if execution_errors.is_empty() {
        execution_errors.push("validation failed".into());
    }
    Verdict::Rejected {
        bundle: DiagnosticBundle {
            execution_errors,
            validation_warnings: report.messages(StageStatus::Warn),
            failed_sql: sql,
        },
        report,
    }
}

/// Run all four stages on `sql`.
pub fn validate_full(
    sql: &str,
    context: &SchemaContext,
    plan: &DecompositionPlan,
    db: &Path,
    policy: &ValidationPolicy,
) -> Verdict {
    let mut report = ValidationReport::default();
    let (corrected, corrections) = autocorrect_values(sql, &context.evidence);
    let notes: Vec<String> = corrections
        .iter()
        .map(|c| {
            format!(
                "corrected '{}' to '{}' for {}.{}",
                c.original_literal, c.corrected_literal, c.table, c.column
            )
        })
        .collect();
    report.corrections = corrections;
    report.stage_results.push(StageResult::new(StageKind::ValueCheck, vec![], notes));

    let conn = match sandbox_connection(db) {
        Ok(c) => c,
        Err(e) => {
            report.stage_results.push(StageResult::fail(StageKind::Syntax, format!("cannot open database: {e}")));
            return reject(corrected, report);
        }
    };

    let syntax = syntax_stage(&corrected, &context.catalog, &conn);
    let failed = syntax.status == StageStatus::Fail;
    report.stage_results.push(syntax);
    if failed {
        return reject(corrected, report);
    }

    let outcome = match run_on(&conn, &corrected, &policy.limits) {
        Ok(o) => o,
        Err(e) => {
            report.stage_results.push(StageResult::fail(StageKind::Execution, e));
            return reject(corrected, report);
        }
    };
    let exec_warnings = if outcome.truncated {
        vec![format!("result truncated at {} rows", policy.limits.max_rows)]
    } else {
        vec![]
    };
    report.stage_results.push(StageResult::new(StageKind::Execution, vec![], exec_warnings));

    let mut semantic = validate_semantics(&outcome, plan, &corrected);
    if policy.strict_semantic && semantic.status == StageStatus::Warn {
        semantic.status = StageStatus::Fail;
    }
    let failed = semantic.status == StageStatus::Fail;
    report.stage_results.push(semantic);
    if failed {
        return reject(corrected, report);
    }
    Verdict::Accepted {
        sql: corrected,
        outcome,
        report,
    }
}
