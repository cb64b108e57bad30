//! Run candidate SQL through value correction, syntax, sandboxed execution and
//! the semantic check.

use std::time::Duration;

use nlsql::decomposer::parse_plan;
use nlsql::extractor::{build_context, introspect_schema};
use nlsql::fixtures::{create_schools_db, schools_evidence, EXCELLENCE_PLAN};
use nlsql::validator::{execute_sandboxed, validate_full, SandboxLimits, ValidationPolicy, Verdict};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let db = dir.path().join("schools.sqlite");
    create_schools_db(&db)?;
    let context = build_context(introspect_schema(&db)?, Vec::new(), schools_evidence(), Duration::ZERO);
    let plan = parse_plan(EXCELLENCE_PLAN)?;
    let policy = ValidationPolicy::default();

    let candidates = [
        "SELECT sname FROM schools WHERE charter = 'y'",
        "SELECT nme FROM schools",
        "DELETE FROM schools",
        "SELECT sname FROM schools; DROP TABLE schools",
        "SELECT COUNT(*) FROM schools",
    ];
    for sql in candidates {
        println!("\n> {sql}");
        let verdict = validate_full(sql, &context, &plan, &db, &policy);
        for stage in &verdict.report().stage_results {
            println!("  {:<11} {:?} {}", format!("{:?}", stage.stage), stage.status, stage.messages.join("; "));
        }
        match verdict {
            Verdict::Accepted { sql, outcome, .. } => println!("  accepted: {sql} -> {} rows", outcome.rows.len()),
            Verdict::Rejected { bundle, .. } => println!("  rejected: {}", bundle.execution_errors.join("; ")),
        }
    }

    let limits = SandboxLimits { timeout_ms: 200, max_rows: 10 };
    let runaway = "WITH RECURSIVE r(x) AS (SELECT 1 UNION ALL SELECT x + 1 FROM r) SELECT count(*) FROM r";
    println!("\nrunaway query: {}", execute_sandboxed(runaway, &db, &limits).unwrap_err());
    let wide = "WITH RECURSIVE r(x) AS (SELECT 1 UNION ALL SELECT x + 1 FROM r WHERE x < 100) SELECT x FROM r";
    let capped = execute_sandboxed(wide, &db, &limits)?;
    println!("row cap: {} rows kept, truncated = {}", capped.rows.len(), capped.truncated);
    Ok(())
}
