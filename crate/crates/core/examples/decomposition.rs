//! Parse a decomposition plan, check it against the catalog, and show the
//! error a malformed plan produces.

use nlsql::decomposer::{check_bindings, parse_plan, serialize_plan};
use nlsql::extractor::introspect_schema;
use nlsql::fixtures::{create_schools_db, EXCELLENCE_PLAN};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let db = dir.path().join("schools.sqlite");
    create_schools_db(&db)?;
    let catalog = introspect_schema(&db)?;
    println!("{}", catalog.summary());

    let plan = parse_plan(EXCELLENCE_PLAN)?;
    check_bindings(&plan, &catalog, EXCELLENCE_PLAN)?;
    println!("entities {}, conditions {}, steps {}", plan.entities.len(), plan.conditions.len(), plan.steps.len());
    for step in &plan.steps {
        println!("  {:<3} {:<55} after {:?}", step.id, step.description, step.depends_on);
    }
    println!("\ncanonical form:\n{}", serialize_plan(&plan));

    let broken = EXCELLENCE_PLAN.replace("s2,s3", "s2,s9");
    match parse_plan(&broken) {
        Ok(_) => println!("unexpectedly parsed"),
        Err(e) => println!("rejected: {e}"),
    }
    let unbound = EXCELLENCE_PLAN.replace("schools.sname", "schools.title");
    if let Err(e) = parse_plan(&unbound).map_err(|e| e.to_string()).and_then(|p| check_bindings(&p, &catalog, &unbound).map_err(|e| e.to_string())) {
        println!("rejected: {e}");
    }
    Ok(())
}
