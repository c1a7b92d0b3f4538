use std::time::Duration;

use serde_json::Value;

/// Why a single backend call failed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportFailure {
    Status { code: u16, body: String },
    Timeout(String),
    Connection(String),
    Decode(String),
}

impl TransportFailure {
    /// 429, 408 and 5xx responses, timeouts and connection failures are worth retrying.
    pub fn is_retryable(&self) -> bool {
        match self {
            TransportFailure::Status { code, .. } => {
                *code == 429 || *code == 408 || (500..600).contains(code)
            }
            TransportFailure::Timeout(_) | TransportFailure::Connection(_) => true,
            TransportFailure::Decode(_) => false,
        }
    }

    pub fn is_auth(&self) -> bool {
        matches!(self, TransportFailure::Status { code: 401 | 403, .. })
    }
}

impl std::fmt::Display for TransportFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TransportFailure::Status { code, body } => write!(f, "HTTP {code}: {body}"),
            TransportFailure::Timeout(m) => write!(f, "timeout: {m}"),
            TransportFailure::Connection(m) => write!(f, "connection failed: {m}"),
            TransportFailure::Decode(m) => write!(f, "undecodable response: {m}"),
        }
    }
}

/// A JSON-over-HTTP backend speaking the OpenAI-compatible wire protocol.
/// `path` is relative to the endpoint, e.g. `chat/completions`.
pub trait Transport: Send + Sync {
    fn post_json(&self, path: &str, body: &Value) -> Result<Value, TransportFailure>;
}

/// Blocking HTTP transport.
pub struct HttpTransport {
    agent: ureq::Agent,
    endpoint: String,
    credential: Option<String>,
}

impl std::fmt::Debug for HttpTransport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpTransport")
            .field("endpoint", &self.endpoint)
            .field("has_credential", &self.credential.is_some())
            .finish()
    }
}

impl HttpTransport {
    pub fn new(endpoint: &str, credential: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        HttpTransport {
            agent,
            endpoint: endpoint.trim_end_matches('/').to_owned(),
            credential,
        }
    }
}

impl Transport for HttpTransport {
    fn post_json(&self, path: &str, body: &Value) -> Result<Value, TransportFailure> {
        let url = format!("{}/{}", self.endpoint, path.trim_start_matches('/'));
        let mut req = self.agent.post(&url).set("Content-Type", "application/json");
        if let Some(key) = &self.credential {
            req = req
                .set("Authorization", &format!("Bearer {key}"))
                .set("api-key", key);
        }
        match req.send_json(body.clone()) {
            Ok(resp) => resp
                .into_json::<Value>()
                .map_err(|e| TransportFailure::Decode(e.to_string())),
            Err(ureq::Error::Status(code, resp)) => Err(TransportFailure::Status {
                code,
                body: resp.into_string().unwrap_or_default(),
            }),
            Err(ureq::Error::Transport(t)) => {
                let message = t.to_string();
                if message.contains("timed out") || message.contains("Timeout") {
                    Err(TransportFailure::Timeout(message))
                } else {
                    Err(TransportFailure::Connection(message))
                }
            }
        }
    }
}
