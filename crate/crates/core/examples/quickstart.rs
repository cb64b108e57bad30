//! Build the schools fixture, wire a pipeline to scripted backends and answer one question.
//!
//! cargo run --example quickstart

use nlsql::app::format_table;
use nlsql::fixtures::{self, benchmark_backends, EXCELLENCE_QUESTION, SCHOOLS_DB_ID};
use nlsql::model::{DatabaseRegistry, Question};
use nlsql::pipeline::Pipeline;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let ws = fixtures::write_workspace(dir.path())?;
    let registry = DatabaseRegistry::scan(&ws.databases_root)?;
    let pipeline = Pipeline::new(registry, benchmark_backends());

    let question = Question::new(EXCELLENCE_QUESTION, SCHOOLS_DB_ID);
    let run = pipeline.run("q1", &question)?;
    let r = &run.result;

    println!("question: {}", question.text);
    println!("plan steps: {}", run.state.plan.as_ref().map_or(0, |p| p.steps.len()));
    println!("sql: {}", r.sql.as_deref().unwrap_or("-"));
    print!("{}", format_table(&r.column_names, r.rows.as_deref().unwrap_or_default(), 50));
    println!("route: {}  cost: {}", r.route, r.cost);
    for entry in &run.state.trace {
        println!("  +{:>10?}  {}", entry.at - run.state.trace[0].at, entry.event.name());
    }
    Ok(())
}
