//! Uniform access to text-generation and embedding backends.
//!
//! A [`BackendSpec`] binds one pipeline role to either an HTTP endpoint that
//! speaks the chat-completion protocol or to an in-process scripted backend
//! used for deterministic runs. [`complete`] never touches a ledger; callers
//! account for usage through [`CostLedger::record_usage`].

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::ops::{Add, AddAssign};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Embedding dimension used by the scripted embedder unless configured otherwise.
pub const DEFAULT_EMBEDDING_DIM: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("transport error from backend {backend}: {message}")]
    Transport {
        backend: String,
        message: String,
        retryable: bool,
    },
    #[error("protocol error from backend {backend}: {message}")]
    Protocol { backend: String, message: String },
    #[error("backend {backend} cannot serve role {role:?}")]
    WrongRole { backend: String, role: Role },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl GatewayError {
    pub fn is_transport(&self) -> bool {
        matches!(self, GatewayError::Transport { .. })
    }
}

/// The job a backend performs in the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Decomposer,
    PrimaryGenerator,
    FallbackGenerator,
    Embedder,
}

impl Role {
    pub const ALL: [Role; 4] = [
        Role::Decomposer,
        Role::PrimaryGenerator,
        Role::FallbackGenerator,
        Role::Embedder,
    ];
}

/// Token prices in currency units per one million tokens.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pricing {
    pub input_per_million: f64,
    pub output_per_million: f64,
}

impl Pricing {
    /// Local backends run at zero marginal cost.
    pub const LOCAL: Pricing = Pricing {
        input_per_million: 0.0,
        output_per_million: 0.0,
    };
    /// GPT-4o list price used for the fallback generator.
    pub const GPT_4O: Pricing = Pricing {
        input_per_million: 2.50,
        output_per_million: 10.0,
    };
    /// GPT-4 standard price used for the all-remote baselines.
    pub const GPT_4: Pricing = Pricing {
        input_per_million: 30.0,
        output_per_million: 60.0,
    };

    pub fn new(input_per_million: f64, output_per_million: f64) -> Result<Self, GatewayError> {
        let p = Pricing {
            input_per_million,
            output_per_million,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if ok(self.input_per_million) && ok(self.output_per_million) {
            Ok(())
        } else {
            Err(GatewayError::InvalidRequest(format!(
                "pricing rates must be finite and non-negative, got {}/{}",
                self.input_per_million, self.output_per_million
            )))
        }
    }

    fn micros(rate: f64) -> u64 {
        (rate * 1e6).round() as u64
    }

    /// Exact cost of `usage`: tokens × (µ$ per million tokens) is a count of picodollars.
    pub fn cost(&self, usage: TokenUsage) -> Cost {
        let pico = u128::from(usage.input_tokens) * u128::from(Self::micros(self.input_per_million))
            + u128::from(usage.output_tokens) * u128::from(Self::micros(self.output_per_million));
        Cost::from_picos(pico)
    }
}

/// An exact currency amount stored as integer picodollars (10⁻¹² units).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Cost(u128);

impl Cost {
    pub const ZERO: Cost = Cost(0);

    pub fn from_picos(picos: u128) -> Self {
        Cost(picos)
    }

    pub fn picos(self) -> u128 {
        self.0
    }

    pub fn micros(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn dollars(self) -> f64 {
        self.0 as f64 / 1e12
    }
}

impl Add for Cost {
    type Output = Cost;
    fn add(self, rhs: Cost) -> Cost {
        Cost(self.0 + rhs.0)
    }
}

impl AddAssign for Cost {
    fn add_assign(&mut self, rhs: Cost) {
        self.0 += rhs.0;
    }
}

impl std::iter::Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::ZERO, Add::add)
    }
}

impl fmt::Display for Cost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "${:.4}", self.dollars())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl TokenUsage {
    pub fn new(input_tokens: u64, output_tokens: u64) -> Self {
        TokenUsage {
            input_tokens,
            output_tokens,
        }
    }

    pub fn total(&self) -> u64 {
        self.input_tokens + self.output_tokens
    }
}

impl Add for TokenUsage {
    type Output = TokenUsage;
    fn add(self, rhs: TokenUsage) -> TokenUsage {
        TokenUsage::new(
            self.input_tokens + rhs.input_tokens,
            self.output_tokens + rhs.output_tokens,
        )
    }
}

impl AddAssign for TokenUsage {
    fn add_assign(&mut self, rhs: TokenUsage) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for TokenUsage {
    fn sum<I: Iterator<Item = TokenUsage>>(iter: I) -> Self {
        iter.fold(TokenUsage::default(), |a, b| a + b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub usage: TokenUsage,
    pub latency: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f32,
    pub max_tokens: u32,
    pub system: Option<String>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            temperature: 0.0,
            max_tokens: 1024,
            system: None,
        }
    }
}

/// Where a backend's answers come from.
#[derive(Clone)]
pub enum Endpoint {
    /// Base URL of a server exposing `POST {url}/chat/completions` and `POST {url}/embeddings`.
    Http { url: String, model: String },
    /// Fixture-driven generator.
    Scripted(Arc<ScriptedFixtures>),
    /// Deterministic hash-seeded embedder.
    HashEmbedder { dim: usize },
}

impl fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Http { url, model } => write!(f, "Http({url}, {model})"),
            Endpoint::Scripted(fx) => write!(f, "Scripted({} keys)", fx.len()),
            Endpoint::HashEmbedder { dim } => write!(f, "HashEmbedder(dim={dim})"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BackendSpec {
    pub name: String,
    pub role: Role,
    pub endpoint: Endpoint,
    pub pricing: Pricing,
    pub timeout: Duration,
    /// Bearer token sent as `Authorization` header; never read from config files.
    pub api_key: Option<String>,
}

impl BackendSpec {
    pub fn http(name: &str, role: Role, url: &str, model: &str, pricing: Pricing) -> Self {
        BackendSpec {
            name: name.to_string(),
            role,
            endpoint: Endpoint::Http {
                url: url.trim_end_matches('/').to_string(),
                model: model.to_string(),
            },
            pricing,
            timeout: Duration::from_secs(60),
            api_key: None,
        }
    }

    pub fn hash_embedder(name: &str, dim: usize) -> Self {
        BackendSpec {
            name: name.to_string(),
            role: Role::Embedder,
            endpoint: Endpoint::HashEmbedder { dim },
            pricing: Pricing::LOCAL,
            timeout: Duration::from_secs(1),
            api_key: None,
        }
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn with_pricing(mut self, pricing: Pricing) -> Self {
        self.pricing = pricing;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    pub fn is_local(&self) -> bool {
        self.pricing == Pricing::LOCAL
    }

    pub fn expect_role(&self, role: Role) -> Result<(), GatewayError> {
        if self.role == role {
            Ok(())
        } else {
            Err(GatewayError::WrongRole {
                backend: self.name.clone(),
                role,
            })
        }
    }
}

/// A scripted reply: either text or a simulated transport failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptedReply {
    Text(String),
    Failure { transport_error: String },
}

impl From<&str> for ScriptedReply {
    fn from(s: &str) -> Self {
        ScriptedReply::Text(s.to_string())
    }
}

impl From<String> for ScriptedReply {
    fn from(s: String) -> Self {
        ScriptedReply::Text(s)
    }
}

/// Prompt-key → ordered responses, with a per-key cursor.
///
/// A prompt matches a key when it equals the key; otherwise the longest key
/// contained in the prompt wins (ties go to the lexicographically smaller key).
/// Successive calls on one key walk its response list and then repeat the last
/// entry.
#[derive(Debug, Default)]
pub struct ScriptedFixtures {
    responses: BTreeMap<String, Vec<ScriptedReply>>,
    cursors: Mutex<HashMap<String, usize>>,
}

impl ScriptedFixtures {
    pub fn new(responses: BTreeMap<String, Vec<ScriptedReply>>) -> Self {
        ScriptedFixtures {
            responses,
            cursors: Mutex::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.responses.keys().map(String::as_str)
    }

    fn match_key(&self, prompt: &str) -> Option<&str> {
        if self.responses.contains_key(prompt) {
            return self.responses.get_key_value(prompt).map(|(k, _)| k.as_str());
        }
        self.responses
            .keys()
            .filter(|k| !k.is_empty() && prompt.contains(k.as_str()))
            .max_by(|a, b| a.len().cmp(&b.len()).then_with(|| b.cmp(a)))
            .map(String::as_str)
    }

    fn next_reply(&self, prompt: &str) -> Option<ScriptedReply> {
        let key = self.match_key(prompt)?;
        let list = &self.responses[key];
        let mut cursors = self.cursors.lock().expect("fixture cursor lock poisoned");
        let cursor = cursors.entry(key.to_string()).or_insert(0);
        let reply = list.get(*cursor).or_else(|| list.last()).cloned();
        *cursor += 1;
        reply
    }

    /// Rewind every key to its first response.
    pub fn reset(&self) {
        self.cursors.lock().expect("fixture cursor lock poisoned").clear();
    }
}

/// Build a deterministic backend that answers only the given prompt keys.
pub fn scripted_backend<K, R>(name: &str, role: Role, fixtures: impl IntoIterator<Item = (K, R)>) -> BackendSpec
where
    K: Into<String>,
    R: Into<ScriptedReply>,
{
    scripted_sequence_backend(
        name,
        role,
        fixtures.into_iter().map(|(k, r)| (k, vec![r.into()])),
    )
}

/// Like [`scripted_backend`], but each key holds an ordered list of replies.
pub fn scripted_sequence_backend<K>(
    name: &str,
    role: Role,
    fixtures: impl IntoIterator<Item = (K, Vec<ScriptedReply>)>,
) -> BackendSpec
where
    K: Into<String>,
{
    let responses: BTreeMap<String, Vec<ScriptedReply>> = fixtures
        .into_iter()
        .map(|(k, v)| (k.into(), v))
        .filter(|(_, v)| !v.is_empty())
        .collect();
    assert!(!responses.is_empty(), "scripted backend needs at least one fixture");
    BackendSpec {
        name: name.to_string(),
        role,
        endpoint: Endpoint::Scripted(Arc::new(ScriptedFixtures::new(responses))),
        pricing: Pricing::LOCAL,
        timeout: Duration::from_secs(1),
        api_key: None,
    }
}

fn whitespace_tokens(s: &str) -> u64 {
    s.split_whitespace().count() as u64
}

/// Ask `backend` to complete `prompt`.
pub fn complete(backend: &BackendSpec, prompt: &str, params: &GenerationParams) -> Result<Completion, GatewayError> {
    if prompt.trim().is_empty() {
        return Err(GatewayError::InvalidRequest("prompt must not be empty".into()));
    }
    let started = Instant::now();
    match &backend.endpoint {
        Endpoint::Scripted(fixtures) => match fixtures.next_reply(prompt) {
            Some(ScriptedReply::Text(text)) => {
                let usage = TokenUsage::new(whitespace_tokens(prompt), whitespace_tokens(&text));
                Ok(Completion {
                    text,
                    usage,
                    latency: started.elapsed(),
                })
            }
            Some(ScriptedReply::Failure { transport_error }) => Err(GatewayError::Transport {
                backend: backend.name.clone(),
                message: transport_error,
                retryable: true,
            }),
            None => Err(GatewayError::Protocol {
                backend: backend.name.clone(),
                message: format!("no scripted fixture matches prompt key {:?}", preview(prompt)),
            }),
        },
        Endpoint::Http { url, model } => http::chat(backend, url, model, prompt, params, started),
        Endpoint::HashEmbedder { .. } => Err(GatewayError::WrongRole {
            backend: backend.name.clone(),
            role: Role::Embedder,
        }),
    }
}

fn preview(s: &str) -> String {
    const MAX: usize = 80;
    if s.chars().count() <= MAX {
        s.to_string()
    } else {
        let head: String = s.chars().take(MAX).collect();
        format!("{head}…")
    }
}

/// Embed `text` into the backend's vector space.
pub fn embed(backend: &BackendSpec, text: &str) -> Result<Vec<f32>, GatewayError> {
    if text.trim().is_empty() {
        return Err(GatewayError::InvalidRequest("cannot embed empty text".into()));
    }
    match &backend.endpoint {
        Endpoint::HashEmbedder { dim } => Ok(hash_embedding(text, *dim)),
        Endpoint::Http { url, model } => http::embed(backend, url, model, text),
        Endpoint::Scripted(_) => Err(GatewayError::WrongRole {
            backend: backend.name.clone(),
            role: Role::Embedder,
        }),
    }
}

fn seeded_unit(seed_text: &str, dim: usize) -> Vec<f64> {
    let digest = Sha256::digest(seed_text.as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed);
    let v: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Hash-seeded unit vector: a bag of per-word vectors plus a whole-string
/// component, so texts sharing words land close while distinct strings never
/// coincide.
pub fn hash_embedding(text: &str, dim: usize) -> Vec<f32> {
    let mut acc = seeded_unit(&format!("\u{1}{text}"), dim);
    for x in acc.iter_mut() {
        *x *= 0.25;
    }
    for word in crate::extractor::word_set(text) {
        for (a, w) in acc.iter_mut().zip(seeded_unit(&word, dim)) {
            *a += w;
        }
    }
    let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
    acc.into_iter().map(|x| (x / norm) as f32).collect()
}

mod http {
    use super::*;
    use serde_json::{json, Value};

    fn transport(backend: &BackendSpec, err: impl fmt::Display) -> GatewayError {
        GatewayError::Transport {
            backend: backend.name.clone(),
            message: err.to_string(),
            retryable: true,
        }
    }

    fn protocol(backend: &BackendSpec, msg: impl Into<String>) -> GatewayError {
        GatewayError::Protocol {
            backend: backend.name.clone(),
            message: msg.into(),
        }
    }

    fn post(backend: &BackendSpec, url: &str, body: &Value) -> Result<Value, GatewayError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(backend.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut req = agent.post(url);
        if let Some(key) = &backend.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| transport(backend, e))?;
        let status = resp.status();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| transport(backend, e))?;
        if status.is_server_error() {
            return Err(transport(backend, format!("HTTP {status}: {text}")));
        }
        if !status.is_success() {
            return Err(protocol(backend, format!("HTTP {status}: {text}")));
        }
        serde_json::from_str(&text).map_err(|e| protocol(backend, format!("malformed JSON response: {e}")))
    }

    pub(super) fn chat(
        backend: &BackendSpec,
        base: &str,
        model: &str,
        prompt: &str,
        params: &GenerationParams,
        started: Instant,
    ) -> Result<Completion, GatewayError> {
        let mut messages = Vec::new();
        if let Some(system) = &params.system {
            messages.push(json!({"role": "system", "content": system}));
        }
        messages.push(json!({"role": "user", "content": prompt}));
        let body = json!({
            "model": model,
            "messages": messages,
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        });
        let v = post(backend, &format!("{base}/chat/completions"), &body)?;
        let text = v
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| protocol(backend, "response lacks choices[0].message.content"))?;
        let count = |field: &str| {
            v.pointer(&format!("/usage/{field}"))
                .and_then(Value::as_u64)
                .ok_or_else(|| protocol(backend, format!("response lacks usage.{field}")))
        };
        Ok(Completion {
            text: text.to_string(),
            usage: TokenUsage::new(count("prompt_tokens")?, count("completion_tokens")?),
            latency: started.elapsed(),
        })
    }

    pub(super) fn embed(backend: &BackendSpec, base: &str, model: &str, text: &str) -> Result<Vec<f32>, GatewayError> {
        let v = post(backend, &format!("{base}/embeddings"), &json!({"model": model, "input": text}))?;
        let arr = v
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| protocol(backend, "response lacks data[0].embedding"))?;
        arr.iter()
            .map(|x| {
                x.as_f64()
                    .map(|f| f as f32)
                    .ok_or_else(|| protocol(backend, "embedding contains a non-number"))
            })
            .collect()
    }
}

/// Route a query took through the generator ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    LocalOnly,
    FallbackUsed,
    Failed,
}

impl fmt::Display for Route {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Route::LocalOnly => "local",
            Route::FallbackUsed => "fallback",
            Route::Failed => "failed",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BackendTotals {
    pub usage: TokenUsage,
    pub cost: Cost,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub query_id: String,
    pub backend: String,
    pub usage: TokenUsage,
    pub cost: Cost,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryCost {
    pub query_id: String,
    pub route: Route,
    pub cost: Cost,
}

/// Append-only record of token consumption priced per backend.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    per_backend: BTreeMap<String, BackendTotals>,
    entries: Vec<LedgerEntry>,
    per_query: Vec<QueryCost>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Price `usage` at the backend's rates and append it. Returns the cost delta.
    pub fn record_usage(&mut self, query_id: &str, backend: &BackendSpec, usage: TokenUsage) -> Cost {
        let cost = backend.pricing.cost(usage);
        let totals = self.per_backend.entry(backend.name.clone()).or_default();
        totals.usage += usage;
        totals.cost += cost;
        self.entries.push(LedgerEntry {
            query_id: query_id.to_string(),
            backend: backend.name.clone(),
            usage,
            cost,
        });
        cost
    }

    /// Close a query: sum its entries and append a per-query line.
    pub fn close_query(&mut self, query_id: &str, route: Route) -> Cost {
        let cost = self.query_cost(query_id);
        self.per_query.push(QueryCost {
            query_id: query_id.to_string(),
            route,
            cost,
        });
        cost
    }

    pub fn query_cost(&self, query_id: &str) -> Cost {
        self.entries
            .iter()
            .filter(|e| e.query_id == query_id)
            .map(|e| e.cost)
            .sum()
    }

    pub fn query_usage(&self, query_id: &str) -> BTreeMap<String, TokenUsage> {
        let mut out: BTreeMap<String, TokenUsage> = BTreeMap::new();
        for e in self.entries.iter().filter(|e| e.query_id == query_id) {
            *out.entry(e.backend.clone()).or_default() += e.usage;
        }
        out
    }

    pub fn total_cost(&self) -> Cost {
        self.per_backend.values().map(|t| t.cost).sum()
    }

    pub fn per_backend(&self) -> &BTreeMap<String, BackendTotals> {
        &self.per_backend
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn per_query(&self) -> &[QueryCost] {
        &self.per_query
    }
}

/// Ledger shared between concurrently running pipelines.
pub type SharedLedger = Arc<Mutex<CostLedger>>;

#[cfg(test)]
mod tests {
    use super::*;

    fn priced(p: Pricing) -> BackendSpec {
        BackendSpec::hash_embedder("b", 8).with_pricing(p)
    }

    #[test]
    fn scripted_echo_counts_whitespace_tokens() {
        let b = scripted_backend("s", Role::PrimaryGenerator, [("P1", "SELECT 1")]);
        let c = complete(&b, "P1", &GenerationParams::default()).unwrap();
        assert_eq!(c.text, "SELECT 1");
        assert_eq!(c.usage, TokenUsage::new(1, 2));
    }

    #[test]
    fn scripted_miss_names_the_key() {
        let b = scripted_backend("s", Role::PrimaryGenerator, [("P1", "SELECT 1")]);
        let err = complete(&b, "P2", &GenerationParams::default()).unwrap_err();
        match err {
            GatewayError::Protocol { message, .. } => assert!(message.contains("P2"), "{message}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn scripted_runs_are_identical() {
        let mk = || scripted_backend("s", Role::PrimaryGenerator, [("P1", "SELECT 1"), ("P2", "SELECT 2")]);
        let (a, b) = (mk(), mk());
        for key in ["P1", "P2", "P1"] {
            let ca = complete(&a, key, &GenerationParams::default()).unwrap();
            let cb = complete(&b, key, &GenerationParams::default()).unwrap();
            assert_eq!(ca.text.as_bytes(), cb.text.as_bytes());
            assert_eq!(ca.usage, cb.usage);
        }
    }

    #[test]
    fn scripted_sequences_advance_then_repeat() {
        let b = scripted_sequence_backend(
            "s",
            Role::FallbackGenerator,
            [("Q", vec!["A".into(), "B".into(), "C".into()])],
        );
        let seq: Vec<String> = (0..4)
            .map(|_| complete(&b, "Q", &GenerationParams::default()).unwrap().text)
            .collect();
        assert_eq!(seq, ["A", "B", "C", "C"]);
        if let Endpoint::Scripted(fx) = &b.endpoint {
            fx.reset();
        }
        assert_eq!(complete(&b, "Q", &GenerationParams::default()).unwrap().text, "A");
    }

    #[test]
    fn longest_contained_key_wins() {
        let b = scripted_backend("s", Role::PrimaryGenerator, [("schools", "short"), ("charter schools", "long")]);
        let c = complete(&b, "list charter schools please", &GenerationParams::default()).unwrap();
        assert_eq!(c.text, "long");
    }

    #[test]
    fn scripted_transport_failure() {
        let b = scripted_sequence_backend(
            "s",
            Role::FallbackGenerator,
            [("Q", vec![ScriptedReply::Failure { transport_error: "boom".into() }])],
        );
        let err = complete(&b, "Q", &GenerationParams::default()).unwrap_err();
        assert!(err.is_transport());
    }

    #[test]
    fn empty_prompt_rejected() {
        let b = scripted_backend("s", Role::PrimaryGenerator, [("P1", "x")]);
        assert!(matches!(
            complete(&b, "  ", &GenerationParams::default()),
            Err(GatewayError::InvalidRequest(_))
        ));
    }

    #[test]
    fn record_usage_rate_arithmetic() {
        let mut ledger = CostLedger::new();
        let d = ledger.record_usage("q", &priced(Pricing::GPT_4O), TokenUsage::new(2000, 500));
        assert!((d.dollars() - 0.01).abs() < 1e-12);
        let d = ledger.record_usage("q", &priced(Pricing::GPT_4O), TokenUsage::new(0, 0));
        assert_eq!(d, Cost::ZERO);
        let d = ledger.record_usage("r", &priced(Pricing::GPT_4), TokenUsage::new(2800, 200));
        assert!((d.dollars() - 0.096).abs() < 1e-12);
        assert!((ledger.total_cost().dollars() - 0.106).abs() < 1e-12);
        assert_eq!(ledger.entries().len(), 3);
    }

    #[test]
    fn local_backend_is_free() {
        let mut ledger = CostLedger::new();
        let d = ledger.record_usage("q", &priced(Pricing::LOCAL), TokenUsage::new(123_456, 7_890));
        assert_eq!(d, Cost::ZERO);
    }

    #[test]
    fn close_query_sums_entries() {
        let mut ledger = CostLedger::new();
        let b = priced(Pricing::GPT_4O);
        ledger.record_usage("q1", &b, TokenUsage::new(1000, 0));
        ledger.record_usage("q2", &b, TokenUsage::new(1000, 0));
        ledger.record_usage("q1", &b, TokenUsage::new(0, 100));
        let c = ledger.close_query("q1", Route::FallbackUsed);
        assert_eq!(c, Cost::from_picos(1000 * 2_500_000 + 100 * 10_000_000));
        assert_eq!(ledger.per_query().len(), 1);
    }

    #[test]
    fn cost_renders_four_decimals() {
        assert_eq!(Cost::from_picos(1_500_000_000).to_string(), "$0.0015");
    }

    #[test]
    fn negative_pricing_rejected() {
        assert!(Pricing::new(-1.0, 0.0).is_err());
        assert!(Pricing::new(0.0, f64::NAN).is_err());
    }

    #[test]
    fn hash_embedding_is_deterministic_unit() {
        let a = hash_embedding("how many schools", 64);
        let b = hash_embedding("how many schools", 64);
        assert_eq!(a, b);
        let n: f64 = a.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }

    #[test]
    fn embed_rejects_empty() {
        let e = BackendSpec::hash_embedder("e", 64);
        assert!(embed(&e, "").is_err());
    }

    proptest::proptest! {
        #[test]
        fn ledger_is_additive(a in 0u64..10_000_000, b in 0u64..10_000_000, c in 0u64..10_000_000, d in 0u64..10_000_000) {
            let backend = priced(Pricing::new(2.5, 10.0).unwrap());
            let mut split = CostLedger::new();
            split.record_usage("q", &backend, TokenUsage::new(a, b));
            split.record_usage("q", &backend, TokenUsage::new(c, d));
            let mut joined = CostLedger::new();
            joined.record_usage("q", &backend, TokenUsage::new(a + c, b + d));
            proptest::prop_assert_eq!(split.total_cost(), joined.total_cost());
            proptest::prop_assert!((split.total_cost().dollars() - joined.total_cost().dollars()).abs() < 1e-12);
            proptest::prop_assert_eq!(split.per_backend()["b"].usage, joined.per_backend()["b"].usage);
        }
    }
}
