use nlsql::fixtures::{chat_response, MockServer};
use nlsql::gateway::{complete, embed, BackendSpec, GatewayError, GenerationParams, Pricing, Role, TokenUsage};

fn backend(url: &str) -> BackendSpec {
    BackendSpec::http("remote", Role::FallbackGenerator, url, "gpt-4o", Pricing::GPT_4O)
}

#[test]
fn chat_request_and_usage() {
    let server = MockServer::spawn(vec![(200, chat_response("SELECT 1", 1000, 200))]).unwrap();
    let b = backend(&server.url).with_api_key(Some("sekret".into()));
    let params = GenerationParams {
        system: Some("be terse".into()),
        ..Default::default()
    };
    let c = complete(&b, "how many?", &params).unwrap();
    assert_eq!(c.text, "SELECT 1");
    assert_eq!(c.usage, TokenUsage::new(1000, 200));
    assert_eq!(b.pricing.cost(c.usage).picos(), 4_500_000_000);

    let reqs = server.requests();
    assert_eq!(reqs.len(), 1);
    assert_eq!(reqs[0].path, "/v1/chat/completions");
    assert_eq!(reqs[0].authorization.as_deref(), Some("Bearer sekret"));
    let body = &reqs[0].body;
    assert_eq!(body["model"], "gpt-4o");
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][1]["content"], "how many?");
    assert_eq!(body["temperature"], 0.0);
}

#[test]
fn server_errors_are_transport_client_errors_are_not() {
    let server = MockServer::spawn(vec![(502, "{}".into()), (400, "{\"error\":\"bad\"}".into()), (200, "{\"choices\":[]}".into())]).unwrap();
    let b = backend(&server.url);
    let p = GenerationParams::default();
    assert!(complete(&b, "q", &p).unwrap_err().is_transport());
    let e = complete(&b, "q", &p).unwrap_err();
    assert!(matches!(e, GatewayError::Protocol { .. }), "{e}");
    let e = complete(&b, "q", &p).unwrap_err();
    assert!(e.to_string().contains("choices[0].message.content"));
}

#[test]
fn unreachable_server_is_transport() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    drop(listener);
    let e = complete(&backend(&url), "q", &GenerationParams::default()).unwrap_err();
    assert!(e.is_transport(), "{e}");
}

#[test]
fn embeddings_endpoint() {
    let server = MockServer::spawn(vec![(200, "{\"data\":[{\"embedding\":[0.5,-0.25,1.0]}]}".into())]).unwrap();
    let b = BackendSpec::http("emb", Role::Embedder, &server.url, "text-embedding-3-small", Pricing::LOCAL);
    assert_eq!(embed(&b, "charter schools").unwrap(), vec![0.5, -0.25, 1.0]);
    let reqs = server.requests();
    assert_eq!(reqs[0].path, "/v1/embeddings");
    assert_eq!(reqs[0].body["input"], "charter schools");
}
