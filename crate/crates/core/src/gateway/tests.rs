use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde_json::{json, Value};

use super::*;

/// Transport answering from a script of outcomes, recording every call.
#[derive(Default)]
struct ScriptTransport {
    outcomes: Mutex<Vec<Result<Value, TransportFailure>>>,
    calls: AtomicUsize,
    bodies: Mutex<Vec<Value>>,
}

impl ScriptTransport {
    fn with(outcomes: Vec<Result<Value, TransportFailure>>) -> Arc<Self> {
        Arc::new(ScriptTransport {
            outcomes: Mutex::new(outcomes.into_iter().rev().collect()),
            ..Default::default()
        })
    }
    fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Transport for ScriptTransport {
    fn post_json(&self, path: &str, body: &Value) -> Result<Value, TransportFailure> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.bodies.lock().unwrap().push(body.clone());
        if path == "embeddings" {
            let inputs = body["input"].as_array().unwrap();
            let data: Vec<Value> = inputs
                .iter()
                .enumerate()
                .map(|(i, t)| json!({"index": i, "embedding": [t.as_str().unwrap().len() as f64, 3.0, 4.0]}))
                .collect();
            return Ok(json!({"data": data}));
        }
        self.outcomes
            .lock()
            .unwrap()
            .pop()
            .unwrap_or_else(|| Ok(chat_reply("default reply")))
    }
}

fn chat_reply(text: &str) -> Value {
    json!({"choices": [{"message": {"role": "assistant", "content": text}}]})
}

fn live_cfg() -> GatewayConfig {
    GatewayConfig {
        credential: Some(Secret::new("sk-test")),
        endpoint_url: "http://localhost:1".into(),
        ..GatewayConfig::default()
    }
}

fn request() -> ChatRequest {
    ChatRequest {
        role: ChatRole::Worker,
        system: "sys".into(),
        user: "hello".into(),
        params: ChatParams::default_for(ChatRole::Worker),
    }
}

fn recording_sleeper() -> (Arc<Mutex<Vec<Duration>>>, impl Fn(Duration) + Send + Sync + 'static) {
    let log = Arc::new(Mutex::new(Vec::new()));
    let sink = log.clone();
    (log, move |d| sink.lock().unwrap().push(d))
}

#[test]
fn defaults_match_role_table() {
    let m = ModelMap::default();
    assert_eq!(m.reasoner, "qwq-32b");
    assert_eq!(m.worker, "gpt-4o-mini");
    assert_eq!(m.embedder, "text-embedding-3-small");
    assert_eq!(ChatParams::default_for(ChatRole::Reasoner).temperature, 0.2);
    assert_eq!(ChatParams::default_for(ChatRole::Worker).temperature, 0.7);
}

#[test]
fn live_chat_returns_content() {
    let t = ScriptTransport::with(vec![Ok(chat_reply("hi there"))]);
    let g = Gateway::with_transport(live_cfg(), t.clone()).unwrap();
    assert_eq!(g.chat(&request()).unwrap(), "hi there");
    let body = &t.bodies.lock().unwrap()[0];
    assert_eq!(body["model"], "gpt-4o-mini");
    assert_eq!(body["messages"][0]["role"], "system");
}

#[test]
fn transient_failures_retry_with_nondecreasing_backoff() {
    let fail = || Err(TransportFailure::Status { code: 503, body: String::new() });
    let t = ScriptTransport::with(vec![fail(), Err(TransportFailure::Timeout("t".into())), fail(), Ok(chat_reply("ok"))]);
    let (log, sleeper) = recording_sleeper();
    let g = Gateway::with_transport(live_cfg(), t.clone()).unwrap().with_sleeper(sleeper);
    assert_eq!(g.chat(&request()).unwrap(), "ok");
    assert_eq!(t.calls(), 4);
    let delays = log.lock().unwrap().clone();
    assert_eq!(delays.len(), 3);
    assert!(delays.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn retries_stop_at_the_cap() {
    let outcomes = (0..10)
        .map(|_| Err(TransportFailure::Status { code: 429, body: "slow down".into() }))
        .collect();
    let t = ScriptTransport::with(outcomes);
    let (_, sleeper) = recording_sleeper();
    let g = Gateway::with_transport(live_cfg(), t.clone()).unwrap().with_sleeper(sleeper);
    match g.chat(&request()) {
        Err(GatewayError::Transport { attempts, .. }) => assert_eq!(attempts, 4),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(t.calls(), 4);
}

#[test]
fn auth_failure_is_not_retried() {
    let t = ScriptTransport::with(vec![Err(TransportFailure::Status { code: 401, body: String::new() })]);
    let (log, sleeper) = recording_sleeper();
    let g = Gateway::with_transport(live_cfg(), t.clone()).unwrap().with_sleeper(sleeper);
    assert!(matches!(g.chat(&request()), Err(GatewayError::Auth { status: 401 })));
    assert_eq!(t.calls(), 1);
    assert!(log.lock().unwrap().is_empty());
}

#[test]
fn empty_content_is_an_error() {
    let t = ScriptTransport::with(vec![Ok(chat_reply("   "))]);
    let g = Gateway::with_transport(live_cfg(), t).unwrap();
    assert!(matches!(g.chat(&request()), Err(GatewayError::EmptyResponse)));
}

#[test]
fn backoff_is_capped_and_monotone() {
    let p = RetryPolicy {
        max_attempts: 50,
        base_backoff_ms: 100,
        max_backoff_ms: 1000,
    };
    let delays: Vec<Duration> = (1..50).map(|i| p.backoff(i)).collect();
    assert_eq!(delays[0], Duration::from_millis(100));
    assert_eq!(delays[1], Duration::from_millis(200));
    assert!(delays.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(*delays.last().unwrap(), Duration::from_millis(1000));
}

#[test]
fn record_then_replay_is_identical_and_offline() {
    let dir = tempfile::tempdir().unwrap();
    let t = ScriptTransport::with(vec![Ok(chat_reply("recorded answer"))]);
    let cfg = GatewayConfig {
        mode: Mode::Record,
        fixture_dir: Some(dir.path().to_path_buf()),
        ..live_cfg()
    };
    let rec = Gateway::with_transport(cfg, t.clone()).unwrap();
    let texts: Vec<String> = vec!["alpha".into(), "beta gamma".into()];
    let recorded = rec.chat(&request()).unwrap();
    let rec_vecs = rec.embed(&texts).unwrap();
    assert_eq!(rec.fixture_keys_used().len(), 3);

    let offline = ScriptTransport::with(vec![]);
    let rep = Gateway::with_transport(GatewayConfig::replay(dir.path()), offline.clone()).unwrap();
    assert_eq!(rep.chat(&request()).unwrap(), recorded);
    assert_eq!(rep.embed(&texts).unwrap(), rec_vecs);
    assert_eq!(offline.calls(), 0);

    let files = std::fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(files, 3);
    let (key, _) = rep.chat_key(&request());
    let record: FixtureRecord =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(format!("{key}.json"))).unwrap()).unwrap();
    assert_eq!(record.key, key);
    assert_eq!(record.request["model"], "gpt-4o-mini");
    assert_eq!(record.response, FixtureResponse::Text("recorded answer".into()));
}

#[test]
fn replay_miss_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let t = ScriptTransport::with(vec![]);
    let g = Gateway::with_transport(GatewayConfig::replay(dir.path()), t.clone()).unwrap();
    let (expected, _) = g.chat_key(&request());
    match g.chat(&request()) {
        Err(GatewayError::FixtureMiss { key }) => assert_eq!(key, expected),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(t.calls(), 0);
}

#[test]
fn key_depends_on_seed_and_model() {
    let g = Gateway::with_transport(live_cfg(), ScriptTransport::with(vec![])).unwrap();
    let base = g.chat_key(&request()).0;
    let mut seeded = request();
    seeded.params.seed = Some(7);
    assert_ne!(g.chat_key(&seeded).0, base);
    let mut other_role = request();
    other_role.role = ChatRole::Reasoner;
    assert_ne!(g.chat_key(&other_role).0, base);
    assert_eq!(g.chat_key(&request()).0, base);
    assert_eq!(base.len(), 64);
}

#[test]
fn embeddings_batch_and_normalize() {
    let t = ScriptTransport::with(vec![]);
    let g = Gateway::with_transport(live_cfg(), t.clone()).unwrap();
    let texts: Vec<String> = (0..130).map(|i| format!("text number {i}")).collect();
    let vecs = g.embed(&texts).unwrap();
    assert_eq!(vecs.len(), 130);
    assert_eq!(t.calls(), 3);
    let sizes: Vec<usize> = t.bodies.lock().unwrap().iter().map(|b| b["input"].as_array().unwrap().len()).collect();
    assert_eq!(sizes, vec![64, 64, 2]);
    for (text, v) in texts.iter().zip(&vecs) {
        let norm: f64 = v.values.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
        let raw = [text.len() as f64, 3.0, 4.0];
        let raw_norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((v.values[0] - raw[0] / raw_norm).abs() < 1e-12);
    }
}

#[test]
fn invalid_requests_are_rejected_locally() {
    let t = ScriptTransport::with(vec![]);
    let g = Gateway::with_transport(live_cfg(), t.clone()).unwrap();
    let mut bad = request();
    bad.params.temperature = 3.0;
    assert!(matches!(g.chat(&bad), Err(GatewayError::InvalidRequest(_))));
    assert!(matches!(g.embed(&[]), Err(GatewayError::InvalidRequest(_))));
    assert_eq!(t.calls(), 0);
}

#[test]
fn config_validation() {
    assert!(matches!(
        Gateway::with_transport(GatewayConfig::default(), ScriptTransport::with(vec![])),
        Err(GatewayError::Config(_))
    ));
    assert!(GatewayConfig::replay("/definitely/not/here").validate().is_err());
    let debug = format!("{:?}", live_cfg());
    assert!(!debug.contains("sk-test"));
    let json = serde_json::to_string(&live_cfg()).unwrap();
    assert!(!json.contains("sk-test"));
}

#[test]
fn rate_limiter_spaces_requests() {
    let cfg = GatewayConfig {
        requests_per_minute: Some(60),
        ..live_cfg()
    };
    let (log, sleeper) = recording_sleeper();
    let g = Gateway::with_transport(cfg, ScriptTransport::with(vec![])).unwrap().with_sleeper(sleeper);
    for _ in 0..3 {
        g.chat(&request()).unwrap();
    }
    let waits = log.lock().unwrap().clone();
    assert_eq!(waits.len(), 2);
    assert!(waits.iter().all(|w| *w > Duration::from_millis(900)));
}
