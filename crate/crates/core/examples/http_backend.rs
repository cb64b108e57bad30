//! Talk to an OpenAI-compatible chat endpoint. Point `NLSQL_DEMO_URL` at a real
//! server, or let the example start a local mock.

use nlsql::fixtures::{chat_response, MockServer};
use nlsql::gateway::{complete, BackendSpec, GenerationParams, Pricing, Role};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mock;
    let url = match std::env::var("NLSQL_DEMO_URL") {
        Ok(url) => url,
        Err(_) => {
            mock = MockServer::spawn(vec![
                (503, "{\"error\":\"warming up\"}".into()),
                (200, chat_response("```sql\nSELECT COUNT(*) FROM schools\n```", 42, 9)),
            ])?;
            mock.url.clone()
        }
    };
    let backend = BackendSpec::http("remote", Role::FallbackGenerator, &url, "gpt-4o", Pricing::GPT_4O)
        .with_api_key(std::env::var("NLSQL_FALLBACK_TOKEN").ok());
    let params = GenerationParams::default();

    for attempt in 1..=2 {
        match complete(&backend, "How many schools are there?", &params) {
            Ok(c) => {
                println!("attempt {attempt}: {:?}", c.text);
                println!("usage {:?}, cost {}", c.usage, backend.pricing.cost(c.usage));
                break;
            }
            Err(e) => println!("attempt {attempt}: {e} (transport: {})", e.is_transport()),
        }
    }
    Ok(())
}
