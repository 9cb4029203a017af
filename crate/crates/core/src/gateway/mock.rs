//! Deterministic in-process chat-completion server for offline tests.
//!
//! A [`MockScript`] is an ordered list of rules. Each request is matched
//! against the rules in order; the first rule whose substrings all occur in
//! the request text (and which has uses left) supplies the reply. Every
//! request is recorded, and the server tracks its peak number of concurrent
//! requests.

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;
use tokio::sync::oneshot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockRoute {
    Chat,
    Images,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockReply {
    /// Assistant message content for chat requests.
    Text(String),
    /// Bare HTTP status with an error body.
    Status(u16),
    /// Deterministic image payload derived from the prompt and seed.
    Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(default)]
    pub contains: Vec<String>,
    #[serde(default)]
    pub route: Option<MockRoute>,
    pub reply: MockReply,
    /// Remaining uses; `None` means unlimited.
    #[serde(default)]
    pub times: Option<usize>,
    #[serde(default)]
    pub delay_ms: u64,
}

impl MockRule {
    pub fn new(contains: &[&str], reply: MockReply) -> Self {
        MockRule {
            contains: contains.iter().map(|s| s.to_string()).collect(),
            route: None,
            reply,
            times: None,
            delay_ms: 0,
        }
    }

    pub fn text(contains: &[&str], text: impl Into<String>) -> Self {
        MockRule::new(contains, MockReply::Text(text.into()))
    }

    pub fn times(mut self, n: usize) -> Self {
        self.times = Some(n);
        self
    }

    pub fn delay(mut self, d: Duration) -> Self {
        self.delay_ms = d.as_millis() as u64;
        self
    }

    pub fn on(mut self, route: MockRoute) -> Self {
        self.route = Some(route);
        self
    }

    fn matches(&self, route: MockRoute, text: &str) -> bool {
        let implied = match self.reply {
            MockReply::Text(_) => Some(MockRoute::Chat),
            MockReply::Image => Some(MockRoute::Images),
            MockReply::Status(_) => None,
        };
        self.times != Some(0)
            && self.route.or(implied).is_none_or(|r| r == route)
            && self.contains.iter().all(|needle| text.contains(needle.as_str()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    /// Unmatched requests fail with `ScriptExhausted` instead of falling back.
    #[serde(default)]
    pub strict: bool,
    /// Fallback for unmatched chat requests in non-strict mode (empty text
    /// when absent). Unmatched image requests always get a generated image.
    #[serde(default)]
    pub default: Option<MockReply>,
}

impl MockScript {
    pub fn strict(rules: Vec<MockRule>) -> Self {
        MockScript {
            rules,
            strict: true,
            default: None,
        }
    }

    pub fn lenient(rules: Vec<MockRule>) -> Self {
        MockScript {
            rules,
            strict: false,
            default: None,
        }
    }

    pub fn with_default(mut self, reply: MockReply) -> Self {
        self.default = Some(reply);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordedRequest {
    pub route: MockRoute,
    /// Concatenated text parts (chat) or the prompt (images).
    pub text: String,
    pub body: Value,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MockError {
    #[error("script exhausted: no rule matched request #{request_index}")]
    ScriptExhausted { request_index: usize },
}

#[derive(Default)]
struct Shared {
    script: Mutex<MockScript>,
    log: Mutex<Vec<RecordedRequest>>,
    errors: Mutex<Vec<MockError>>,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
}

struct InFlight<'a>(&'a Shared);

impl<'a> InFlight<'a> {
    fn enter(shared: &'a Shared) -> Self {
        let now = shared.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        shared.peak.fetch_max(now, Ordering::SeqCst);
        InFlight(shared)
    }
}

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

pub struct MockServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    shutdown: Option<oneshot::Sender<()>>,
}

impl MockServer {
    /// Binds an ephemeral localhost port and serves until dropped.
    pub async fn start(script: MockScript) -> std::io::Result<MockServer> {
        Self::bind("127.0.0.1:0", script).await
    }

    pub async fn bind(addr: &str, script: MockScript) -> std::io::Result<MockServer> {
        let shared = Arc::new(Shared {
            script: Mutex::new(script),
            ..Default::default()
        });
        let app = Router::new()
            .route("/v1/chat/completions", post(chat))
            .route("/v1/images/generations", post(images))
            .with_state(shared.clone());
        let listener = tokio::net::TcpListener::bind(addr).await?;
        let addr = listener.local_addr()?;
        let (tx, rx) = oneshot::channel::<()>();
        tokio::spawn(async move {
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
        Ok(MockServer {
            addr,
            shared,
            shutdown: Some(tx),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Base URL for [`super::EndpointConfig::base_url`].
    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.shared.log.lock().unwrap().clone()
    }

    pub fn request_count(&self) -> usize {
        self.shared.log.lock().unwrap().len()
    }

    pub fn peak_in_flight(&self) -> usize {
        self.shared.peak.load(Ordering::SeqCst)
    }

    pub fn errors(&self) -> Vec<MockError> {
        self.shared.errors.lock().unwrap().clone()
    }

    pub fn replace_script(&self, script: MockScript) {
        *self.shared.script.lock().unwrap() = script;
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

fn chat_text(body: &Value) -> String {
    let mut pieces = Vec::new();
    for msg in body["messages"].as_array().into_iter().flatten() {
        match &msg["content"] {
            Value::String(s) => pieces.push(s.as_str()),
            Value::Array(parts) => pieces.extend(parts.iter().filter_map(|p| p["text"].as_str())),
            _ => {}
        }
    }
    pieces.join("\n")
}

/// Deterministic fake PNG: the PNG signature followed by a SHA-256 digest of
/// the prompt, seed and source image.
pub fn synthetic_image(prompt: &str, seed: u64, source: Option<&str>) -> Vec<u8> {
    let mut h = Sha256::new();
    h.update(prompt.as_bytes());
    h.update([0u8]);
    h.update(seed.to_le_bytes());
    if let Some(src) = source {
        h.update(src.as_bytes());
    }
    let mut out = vec![0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];
    out.extend_from_slice(&h.finalize());
    out
}

async fn dispatch(shared: &Shared, route: MockRoute, text: String, body: Value) -> Result<MockReply, Response> {
    let index = {
        let mut log = shared.log.lock().unwrap();
        log.push(RecordedRequest {
            route,
            text: text.clone(),
            body,
        });
        log.len() - 1
    };
    let (reply, delay) = {
        let mut guard = shared.script.lock().unwrap();
        let script = &mut *guard;
        match script.rules.iter_mut().find(|r| r.matches(route, &text)) {
            Some(rule) => {
                if let Some(n) = rule.times.as_mut() {
                    *n -= 1;
                }
                (Some(rule.reply.clone()), rule.delay_ms)
            }
            None if script.strict => (None, 0),
            None => match route {
                MockRoute::Chat => (Some(script.default.clone().unwrap_or(MockReply::Text(String::new()))), 0),
                MockRoute::Images => (Some(MockReply::Image), 0),
            },
        }
    };
    if delay > 0 {
        tokio::time::sleep(Duration::from_millis(delay)).await;
    }
    match reply {
        Some(MockReply::Status(code)) => {
            let status = StatusCode::from_u16(code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
            Err((status, Json(json!({"error": {"message": "scripted failure"}}))).into_response())
        }
        Some(reply) => Ok(reply),
        None => {
            let err = MockError::ScriptExhausted { request_index: index };
            shared.errors.lock().unwrap().push(err.clone());
            Err((
                StatusCode::CONFLICT,
                Json(json!({"error": {"type": "ScriptExhausted", "message": err.to_string()}})),
            )
                .into_response())
        }
    }
}

async fn chat(State(shared): State<Arc<Shared>>, Json(body): Json<Value>) -> Response {
    let _guard = InFlight::enter(&shared);
    let text = chat_text(&body);
    match dispatch(&shared, MockRoute::Chat, text, body).await {
        Ok(MockReply::Text(content)) => Json(json!({
            "object": "chat.completion",
            "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}],
        }))
        .into_response(),
        Ok(_) => (StatusCode::BAD_REQUEST, "rule reply is not valid for chat").into_response(),
        Err(resp) => resp,
    }
}

async fn images(State(shared): State<Arc<Shared>>, Json(body): Json<Value>) -> Response {
    let _guard = InFlight::enter(&shared);
    let prompt = body["prompt"].as_str().unwrap_or_default().to_string();
    let seed = body["seed"].as_u64().unwrap_or(0);
    let source = body["image"].as_str().map(str::to_string);
    match dispatch(&shared, MockRoute::Images, prompt.clone(), body).await {
        Ok(MockReply::Image) => {
            let bytes = synthetic_image(&prompt, seed, source.as_deref());
            Json(json!({"data": [{"b64_json": STANDARD.encode(bytes), "media_type": "image/png"}]})).into_response()
        }
        Ok(_) => (StatusCode::BAD_REQUEST, "rule reply is not valid for images").into_response(),
        Err(resp) => resp,
    }
}
