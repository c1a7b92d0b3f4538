//! Chat-completion and embedding access for the three model roles.
//!
//! A [`Gateway`] runs in one of three modes. `live` talks to an
//! OpenAI-compatible endpoint; `record` does the same and additionally
//! persists every response under a content-addressed key; `replay` serves
//! responses from those fixtures and never touches the transport.

mod fixtures;
mod transport;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use fixtures::{fixture_key, FixtureRecord, FixtureResponse, FixtureStore};
pub use transport::{HttpTransport, Transport, TransportFailure};

pub const DEFAULT_EMBED_BATCH: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("gateway misconfigured: {0}")]
    Config(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("authentication rejected (HTTP {status})")]
    Auth { status: u16 },
    #[error("no replay fixture for key {key}; fixtures are stale, re-record them")]
    FixtureMiss { key: String },
    #[error("backend returned an empty response")]
    EmptyResponse,
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("fixture store error: {0}")]
    Fixture(String),
}

/// Chat roles: the heavyweight reasoning model and the fast worker model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatRole {
    Reasoner,
    Worker,
}

impl ChatRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ChatRole::Reasoner => "reasoner",
            ChatRole::Worker => "worker",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChatParams {
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl ChatParams {
    pub fn default_for(role: ChatRole) -> Self {
        let temperature = match role {
            ChatRole::Reasoner => 0.2,
            ChatRole::Worker => 0.7,
        };
        ChatParams {
            temperature,
            max_tokens: 4096,
            seed: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub role: ChatRole,
    pub system: String,
    pub user: String,
    pub params: ChatParams,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.system.trim().is_empty() || self.user.trim().is_empty() {
            return Err(GatewayError::InvalidRequest(
                "system and user messages must be non-empty".into(),
            ));
        }
        let t = self.params.temperature;
        if !(0.0..=2.0).contains(&t) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {t} outside [0, 2]"
            )));
        }
        if self.params.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// A unit-normalized embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub model_id: String,
}

impl EmbeddingVector {
    /// Scales `values` to unit Euclidean norm.
    pub fn unit(values: Vec<f64>, model_id: impl Into<String>) -> Result<Self, GatewayError> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(GatewayError::MalformedResponse(
                "embedding has zero or non-finite norm".into(),
            ));
        }
        Ok(EmbeddingVector {
            values: values.into_iter().map(|v| v / norm).collect(),
            model_id: model_id.into(),
        })
    }

    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }
}

/// Anything that can answer a chat request.
pub trait ChatModel: Send + Sync {
    fn chat(&self, req: &ChatRequest) -> Result<String, GatewayError>;

    fn default_params(&self, role: ChatRole) -> ChatParams {
        ChatParams::default_for(role)
    }

    fn request(&self, role: ChatRole, system: String, user: String) -> ChatRequest {
        ChatRequest {
            role,
            system,
            user,
            params: self.default_params(role),
        }
    }
}

/// Anything that maps texts to unit vectors, order preserved.
pub trait Embedder: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError>;
}

impl<T: ChatModel + ?Sized> ChatModel for Arc<T> {
    fn chat(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        (**self).chat(req)
    }
    fn default_params(&self, role: ChatRole) -> ChatParams {
        (**self).default_params(role)
    }
}

impl<T: Embedder + ?Sized> Embedder for Arc<T> {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        (**self).embed(texts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Live,
    Record,
    Replay,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(Mode::Live),
            "record" => Ok(Mode::Record),
            "replay" => Ok(Mode::Replay),
            other => Err(format!("unknown mode `{other}` (expected live, record or replay)")),
        }
    }
}

/// Credential that never appears in `Debug` output or serialized config.
#[derive(Clone, PartialEq, Eq, Deserialize)]
#[serde(transparent)]
pub struct Secret(String);

impl Secret {
    pub fn new(value: impl Into<String>) -> Self {
        Secret(value.into())
    }
    pub fn expose(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Debug for Secret {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Secret(***)")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMap {
    pub reasoner: String,
    pub worker: String,
    pub embedder: String,
}

impl Default for ModelMap {
    fn default() -> Self {
        ModelMap {
            reasoner: "qwq-32b".into(),
            worker: "gpt-4o-mini".into(),
            embedder: "text-embedding-3-small".into(),
        }
    }
}

impl ModelMap {
    pub fn chat_model(&self, role: ChatRole) -> &str {
        match role {
            ChatRole::Reasoner => &self.reasoner,
            ChatRole::Worker => &self.worker,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            base_backoff_ms: 500,
            max_backoff_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `failed + 1`, after `failed` failures (≥ 1). Nondecreasing.
    pub fn backoff(&self, failed: u32) -> Duration {
        let exp = failed.saturating_sub(1).min(32);
        let ms = self
            .base_backoff_ms
            .saturating_mul(1u64 << exp)
            .min(self.max_backoff_ms.max(self.base_backoff_ms));
        Duration::from_millis(ms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub endpoint_url: String,
    #[serde(skip_serializing)]
    pub credential: Option<Secret>,
    pub models: ModelMap,
    pub mode: Mode,
    pub fixture_dir: Option<PathBuf>,
    pub retry: RetryPolicy,
    pub timeout_secs: u64,
    pub requests_per_minute: Option<u32>,
    pub reasoner_temperature: f64,
    pub worker_temperature: f64,
    pub max_tokens: u32,
    pub embed_batch_size: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            endpoint_url: "https://api.openai.com/v1".into(),
            credential: None,
            models: ModelMap::default(),
            mode: Mode::Live,
            fixture_dir: None,
            retry: RetryPolicy::default(),
            timeout_secs: 120,
            requests_per_minute: None,
            reasoner_temperature: ChatParams::default_for(ChatRole::Reasoner).temperature,
            worker_temperature: ChatParams::default_for(ChatRole::Worker).temperature,
            max_tokens: 4096,
            embed_batch_size: DEFAULT_EMBED_BATCH,
        }
    }
}

impl GatewayConfig {
    pub fn replay(fixture_dir: impl Into<PathBuf>) -> Self {
        GatewayConfig {
            mode: Mode::Replay,
            fixture_dir: Some(fixture_dir.into()),
            ..GatewayConfig::default()
        }
    }

    /// Applies `THEMATIC_ENDPOINT` and `THEMATIC_API_KEY` (or `OPENAI_API_KEY`).
    pub fn apply_env(&mut self) {
        if let Ok(endpoint) = std::env::var("THEMATIC_ENDPOINT") {
            if !endpoint.trim().is_empty() {
                self.endpoint_url = endpoint;
            }
        }
        let key = std::env::var("THEMATIC_API_KEY").or_else(|_| std::env::var("OPENAI_API_KEY"));
        if let Ok(key) = key {
            if !key.trim().is_empty() {
                self.credential = Some(Secret::new(key));
            }
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        match self.mode {
            Mode::Replay => match &self.fixture_dir {
                Some(dir) if dir.is_dir() => {}
                Some(dir) => {
                    return Err(GatewayError::Config(format!(
                        "fixture directory {} does not exist",
                        dir.display()
                    )))
                }
                None => return Err(GatewayError::Config("replay mode needs a fixture directory".into())),
            },
            Mode::Live | Mode::Record => {
                if self.endpoint_url.trim().is_empty() {
                    return Err(GatewayError::Config("endpoint_url is not set".into()));
                }
                if self.credential.as_ref().is_none_or(|c| c.expose().trim().is_empty()) {
                    return Err(GatewayError::Config("credential is not set".into()));
                }
                if self.mode == Mode::Record && self.fixture_dir.is_none() {
                    return Err(GatewayError::Config("record mode needs a fixture directory".into()));
                }
            }
        }
        if self.retry.max_attempts == 0 {
            return Err(GatewayError::Config("retry.max_attempts must be at least 1".into()));
        }
        if self.embed_batch_size == 0 {
            return Err(GatewayError::Config("embed_batch_size must be positive".into()));
        }
        Ok(())
    }
}

type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

/// Serializes request admission to at most `per_minute` requests per minute.
struct RateLimiter {
    interval: Duration,
    next_slot: Mutex<Option<Instant>>,
}

impl RateLimiter {
    fn new(per_minute: u32) -> Self {
        RateLimiter {
            interval: Duration::from_secs(60) / per_minute.max(1),
            next_slot: Mutex::new(None),
        }
    }

    fn admit(&self, sleep: &Sleeper) {
        let wait = {
            let mut slot = self.next_slot.lock().unwrap_or_else(|e| e.into_inner());
            let now = Instant::now();
            let start = slot.map_or(now, |s| s.max(now));
            *slot = Some(start + self.interval);
            start - now
        };
        if !wait.is_zero() {
            sleep(wait);
        }
    }
}

#[derive(Serialize)]
struct ChatFixtureKey<'a> {
    kind: &'static str,
    max_tokens: u32,
    model: &'a str,
    role: &'static str,
    seed: Option<u64>,
    system: &'a str,
    temperature: f64,
    user: &'a str,
}

#[derive(Serialize)]
struct EmbedFixtureKey<'a> {
    kind: &'static str,
    model: &'a str,
    text: &'a str,
}

/// The shared model gateway.
pub struct Gateway {
    cfg: GatewayConfig,
    transport: Arc<dyn Transport>,
    fixtures: Option<FixtureStore>,
    limiter: Option<RateLimiter>,
    sleeper: Sleeper,
    dims: Mutex<HashMap<String, usize>>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("mode", &self.cfg.mode)
            .field("endpoint", &self.cfg.endpoint_url)
            .field("models", &self.cfg.models)
            .finish_non_exhaustive()
    }
}

impl Gateway {
    /// Builds a gateway over the HTTP transport described by `cfg`.
    pub fn new(cfg: GatewayConfig) -> Result<Self, GatewayError> {
        let transport = HttpTransport::new(
            &cfg.endpoint_url,
            cfg.credential.as_ref().map(|c| c.expose().to_owned()),
            Duration::from_secs(cfg.timeout_secs.max(1)),
        );
        Gateway::with_transport(cfg, Arc::new(transport))
    }

    pub fn with_transport(cfg: GatewayConfig, transport: Arc<dyn Transport>) -> Result<Self, GatewayError> {
        cfg.validate()?;
        let fixtures = match cfg.mode {
            Mode::Live => None,
            Mode::Record | Mode::Replay => cfg.fixture_dir.clone().map(FixtureStore::new),
        };
        let limiter = cfg.requests_per_minute.map(RateLimiter::new);
        Ok(Gateway {
            cfg,
            transport,
            fixtures,
            limiter,
            sleeper: Arc::new(std::thread::sleep),
            dims: Mutex::new(HashMap::new()),
        })
    }

    /// Replaces the function used for backoff and rate-limit waits.
    pub fn with_sleeper(mut self, sleeper: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleeper = Arc::new(sleeper);
        self
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.cfg
    }

    pub fn mode(&self) -> Mode {
        self.cfg.mode
    }

    /// Fixture keys read (replay) or written (record), in call order.
    pub fn fixture_keys_used(&self) -> Vec<String> {
        self.fixtures.as_ref().map(FixtureStore::used_keys).unwrap_or_default()
    }

    /// Fixture key of a chat request under this gateway's model map.
    pub fn chat_key(&self, req: &ChatRequest) -> (String, Value) {
        fixture_key(&ChatFixtureKey {
            kind: "chat",
            max_tokens: req.params.max_tokens,
            model: self.cfg.models.chat_model(req.role),
            role: req.role.as_str(),
            seed: req.params.seed,
            system: &req.system,
            temperature: req.params.temperature,
            user: &req.user,
        })
    }

    fn embed_key(&self, text: &str) -> (String, Value) {
        fixture_key(&EmbedFixtureKey {
            kind: "embedding",
            model: &self.cfg.models.embedder,
            text,
        })
    }

    fn store(&self) -> Result<&FixtureStore, GatewayError> {
        self.fixtures
            .as_ref()
            .ok_or_else(|| GatewayError::Config("no fixture directory configured".into()))
    }

    /// One backend call with retries on transient failures.
    fn post_with_retry(&self, path: &str, body: &Value) -> Result<Value, GatewayError> {
        let max = self.cfg.retry.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            if let Some(limiter) = &self.limiter {
                limiter.admit(&self.sleeper);
            }
            match self.transport.post_json(path, body) {
                Ok(value) => return Ok(value),
                Err(failure) if failure.is_auth() => {
                    let status = match failure {
                        TransportFailure::Status { code, .. } => code,
                        _ => 401,
                    };
                    return Err(GatewayError::Auth { status });
                }
                Err(TransportFailure::Decode(m)) => return Err(GatewayError::MalformedResponse(m)),
                Err(failure) => {
                    if !failure.is_retryable() || attempt >= max {
                        return Err(GatewayError::Transport {
                            attempts: attempt,
                            message: failure.to_string(),
                        });
                    }
                    let delay = self.cfg.retry.backoff(attempt);
                    tracing::warn!(attempt, max, ?delay, "backend call failed, retrying: {failure}");
                    (self.sleeper)(delay);
                }
            }
        }
    }

    fn chat_live(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        let mut body = json!({
            "model": self.cfg.models.chat_model(req.role),
            "messages": [
                {"role": "system", "content": req.system},
                {"role": "user", "content": req.user},
            ],
            "temperature": req.params.temperature,
            "max_tokens": req.params.max_tokens,
        });
        if let Some(seed) = req.params.seed {
            body["seed"] = json!(seed);
        }
        let resp = self.post_with_retry("chat/completions", &body)?;
        let content = resp
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .unwrap_or_default();
        if content.trim().is_empty() {
            return Err(GatewayError::EmptyResponse);
        }
        Ok(content.to_owned())
    }

    fn embed_live(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        let mut out = Vec::with_capacity(texts.len());
        for batch in texts.chunks(self.cfg.embed_batch_size.max(1)) {
            let body = json!({"model": self.cfg.models.embedder, "input": batch});
            let resp = self.post_with_retry("embeddings", &body)?;
            let data = resp
                .get("data")
                .and_then(Value::as_array)
                .ok_or(GatewayError::EmptyResponse)?;
            if data.len() != batch.len() {
                return Err(GatewayError::MalformedResponse(format!(
                    "expected {} embeddings, got {}",
                    batch.len(),
                    data.len()
                )));
            }
            let mut indexed: Vec<(usize, Vec<f64>)> = Vec::with_capacity(data.len());
            for (pos, item) in data.iter().enumerate() {
                let index = item.get("index").and_then(Value::as_u64).map_or(pos, |i| i as usize);
                let values = item
                    .get("embedding")
                    .and_then(Value::as_array)
                    .ok_or_else(|| GatewayError::MalformedResponse("missing embedding".into()))?
                    .iter()
                    .map(|v| v.as_f64().ok_or_else(|| GatewayError::MalformedResponse("non-numeric embedding".into())))
                    .collect::<Result<Vec<f64>, _>>()?;
                indexed.push((index, values));
            }
            indexed.sort_by_key(|(i, _)| *i);
            out.extend(indexed.into_iter().map(|(_, v)| v));
        }
        Ok(out)
    }

    fn check_dims(&self, dim: usize) -> Result<(), GatewayError> {
        let mut dims = self.dims.lock().unwrap_or_else(|e| e.into_inner());
        let model = &self.cfg.models.embedder;
        match dims.get(model) {
            Some(&d) if d != dim => Err(GatewayError::MalformedResponse(format!(
                "embedding dimension changed from {d} to {dim} for model {model}"
            ))),
            Some(_) => Ok(()),
            None => {
                dims.insert(model.clone(), dim);
                Ok(())
            }
        }
    }
}

impl ChatModel for Gateway {
    fn chat(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        req.validate()?;
        match self.cfg.mode {
            Mode::Live => self.chat_live(req),
            Mode::Record => {
                let text = self.chat_live(req)?;
                let (key, canonical) = self.chat_key(req);
                self.store()?.store(&key, canonical, FixtureResponse::Text(text.clone()))?;
                Ok(text)
            }
            Mode::Replay => {
                let (key, _) = self.chat_key(req);
                match self.store()?.load(&key)? {
                    FixtureResponse::Text(text) if !text.trim().is_empty() => Ok(text),
                    FixtureResponse::Text(_) => Err(GatewayError::EmptyResponse),
                    FixtureResponse::Vector(_) => Err(GatewayError::Fixture(format!(
                        "fixture {key} holds an embedding, not a chat response"
                    ))),
                }
            }
        }
    }

    fn default_params(&self, role: ChatRole) -> ChatParams {
        ChatParams {
            temperature: match role {
                ChatRole::Reasoner => self.cfg.reasoner_temperature,
                ChatRole::Worker => self.cfg.worker_temperature,
            },
            max_tokens: self.cfg.max_tokens,
            seed: None,
        }
    }
}

impl Embedder for Gateway {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        if texts.is_empty() || texts.iter().any(|t| t.trim().is_empty()) {
            return Err(GatewayError::InvalidRequest(
                "embedding inputs must be a non-empty list of non-empty texts".into(),
            ));
        }
        let raw = match self.cfg.mode {
            Mode::Live => self.embed_live(texts)?,
            Mode::Record => {
                let raw = self.embed_live(texts)?;
                let store = self.store()?;
                for (text, values) in texts.iter().zip(&raw) {
                    let (key, canonical) = self.embed_key(text);
                    store.store(&key, canonical, FixtureResponse::Vector(values.clone()))?;
                }
                raw
            }
            Mode::Replay => {
                let store = self.store()?;
                texts
                    .iter()
                    .map(|text| {
                        let (key, _) = self.embed_key(text);
                        match store.load(&key)? {
                            FixtureResponse::Vector(v) => Ok(v),
                            FixtureResponse::Text(_) => Err(GatewayError::Fixture(format!(
                                "fixture {key} holds a chat response, not an embedding"
                            ))),
                        }
                    })
                    .collect::<Result<Vec<_>, _>>()?
            }
        };
        raw.into_iter()
            .map(|values| {
                self.check_dims(values.len())?;
                EmbeddingVector::unit(values, self.cfg.models.embedder.clone())
            })
            .collect()
    }
}

#[cfg(test)]
mod tests;
