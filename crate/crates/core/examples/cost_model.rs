//! Price token usage per backend and compare a mostly-local workload against
//! sending every query to a large remote model.

use nlsql::gateway::{scripted_backend, BackendSpec, Cost, CostLedger, Pricing, Role, Route, TokenUsage};

fn main() {
    let local = scripted_backend("local-slm", Role::PrimaryGenerator, [("q", "SELECT 1")]);
    let remote = BackendSpec::http("gpt-4o", Role::FallbackGenerator, "http://unused", "gpt-4o", Pricing::GPT_4O);
    let baseline = BackendSpec::http("gpt-4", Role::PrimaryGenerator, "http://unused", "gpt-4", Pricing::GPT_4);

    let prompt = TokenUsage::new(900, 120);
    let mut hybrid = CostLedger::new();
    let mut all_remote = CostLedger::new();
    for i in 0..100 {
        let id = format!("q{i}");
        hybrid.record_usage(&id, &local, prompt);
        let route = if i % 3 == 2 {
            hybrid.record_usage(&id, &remote, TokenUsage::new(1100, 120));
            Route::FallbackUsed
        } else {
            Route::LocalOnly
        };
        hybrid.close_query(&id, route);
        all_remote.record_usage(&id, &baseline, prompt);
        all_remote.close_query(&id, Route::LocalOnly);
    }

    for (name, totals) in hybrid.per_backend() {
        println!("{name:<10} {:>8} tokens  {}", totals.usage.total(), totals.cost);
    }
    let fallbacks = hybrid.per_query().iter().filter(|q| q.route == Route::FallbackUsed).count();
    let (h, b): (Cost, Cost) = (hybrid.total_cost(), all_remote.total_cost());
    println!("hybrid: {h} ({fallbacks} fallbacks)   gpt-4 only: {b}");
    println!("ratio: {:.2}%", 100.0 * h.picos() as f64 / b.picos() as f64);
}
