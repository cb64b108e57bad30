//! Score the five-task fixture for execution accuracy and valid efficiency.
//!
//! cargo run --example benchmark -- [workers]

use nlsql::fixtures::{self, benchmark_backends};
use nlsql::harness::{load_tasks, run_benchmark, summary_table, write_report, BenchOptions};
use nlsql::model::{DatabaseRegistry, SystemClock};
use nlsql::pipeline::Pipeline;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let workers = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(2);
    let dir = tempfile::tempdir()?;
    let ws = fixtures::write_workspace(dir.path())?;
    let pipeline = Pipeline::new(DatabaseRegistry::scan(&ws.databases_root)?, benchmark_backends());
    let tasks = load_tasks(&ws.tasks_path)?;

    let opts = BenchOptions { workers, trials: 3, ..Default::default() };
    let report = run_benchmark(&tasks, &pipeline, &opts, &SystemClock::default())?;
    print!("{}", summary_table(&report));
    for t in &report.per_task {
        println!(
            "  #{} {:<9} {:<8} ex={} r={}",
            t.question_id,
            t.outcome.map_or("error".into(), |o| o.to_string()),
            t.route.to_string(),
            t.indicator,
            t.r_value.map_or("-".into(), |r| format!("{r:.2}"))
        );
    }
    let (json, csv) = write_report(&report, dir.path())?;
    println!("wrote {} and {}", json.display(), csv.display());
    Ok(())
}
