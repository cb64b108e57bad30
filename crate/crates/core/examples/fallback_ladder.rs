//! Drive the generator ladder directly: a primary that is rejected, a fallback
//! that repairs it, and a question where every attempt fails.

use std::time::Duration;

use nlsql::decomposer::parse_plan;
use nlsql::extractor::{build_context, introspect_schema};
use nlsql::fixtures::{benchmark_backends, benchmark_tasks, create_schools_db, schools_evidence};
use nlsql::gateway::GenerationParams;
use nlsql::generator::{run_ladder, FinalCandidate, Generators, MAX_FALLBACK_ATTEMPTS};
use nlsql::model::Question;
use nlsql::prompts::PromptTemplates;
use nlsql::validator::{validate_full, ValidationPolicy};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let db = dir.path().join("schools.sqlite");
    create_schools_db(&db)?;
    let context = build_context(introspect_schema(&db)?, Vec::new(), schools_evidence(), Duration::ZERO);
    let backends = benchmark_backends();
    let templates = PromptTemplates::default();
    let params = GenerationParams::default();
    let gens = Generators {
        primary: &backends.primary,
        fallback: &backends.fallback,
        templates: &templates,
        params: &params,
    };
    let policy = ValidationPolicy::default();

    println!("fallback budget: {MAX_FALLBACK_ATTEMPTS} attempts");
    for task in benchmark_tasks().iter().filter(|t| t.question_id >= 3) {
        let question = Question::new(task.question, "schools");
        let plan = parse_plan(task.plan)?;
        let outcome = run_ladder(&question, &plan, &context, &gens, |sql| validate_full(sql, &context, &plan, &db, &policy));

        println!("\n{}", task.question);
        for call in &outcome.calls {
            let sql = call.candidate.as_ref().map_or("-", |c| c.sql.as_str());
            println!("  {:?}: {sql}", call.origin);
        }
        for (i, b) in outcome.bundle_history.iter().enumerate() {
            println!("  bundle {}: {}", i + 1, b.execution_errors.join("; "));
        }
        match &outcome.final_candidate {
            FinalCandidate::Accepted(a) => println!("  accepted after {} fallback attempts: {}", outcome.attempts_used, a.sql),
            FinalCandidate::Failure => println!("  generation failure after {} attempts", outcome.attempts_used),
        }
        println!("  primary tokens {}, fallback tokens {}", outcome.usage_for(true).total(), outcome.usage_for(false).total());
    }
    Ok(())
}
