//! Client for chat-completion model servers and image generators.
//!
//! Speaks the common chat-completions JSON protocol: `POST
//! {base_url}/chat/completions` with `model`, `messages`, `temperature` and
//! `max_tokens`, reading `choices[0].message.content`. Images travel as
//! base64 data URLs inside `image_url` content parts. Image generation uses
//! `POST {base_url}/images/generations` and reads `data[0].b64_json`.

mod image;
pub mod mock;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::sync::Arc;
use std::time::{Duration, Instant};
use tokio::sync::Semaphore;

pub use image::{extension_for, media_type_for, ImageRef, ImageRefError, MEDIA_TYPES};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GatewayError {
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("server returned status {status}: {body}")]
    Server { status: u16, body: String },
    #[error("rate limited by server")]
    RateLimited,
    #[error("retry budget exhausted after {attempts} attempts; last error: {last}")]
    BudgetExceeded { attempts: u32, last: Box<GatewayError> },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("invalid endpoint config: {0}")]
    Config(String),
}

impl GatewayError {
    pub fn is_retryable(&self) -> bool {
        match self {
            GatewayError::Timeout(_) | GatewayError::Transport(_) | GatewayError::RateLimited => true,
            GatewayError::Server { status, .. } => *status >= 500,
            _ => false,
        }
    }

    /// The underlying failure, looking through `BudgetExceeded`.
    pub fn root(&self) -> &GatewayError {
        match self {
            GatewayError::BudgetExceeded { last, .. } => last.root(),
            other => other,
        }
    }
}

fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    3
}
fn default_in_flight() -> usize {
    8
}
fn default_max_tokens() -> u32 {
    4096
}
fn default_backoff_base() -> f64 {
    0.5
}
fn default_backoff_factor() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    /// Never written back out; usually supplied through the environment.
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    #[serde(default = "default_backoff_base")]
    pub backoff_base_secs: f64,
    #[serde(default = "default_backoff_factor")]
    pub backoff_factor: f64,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        EndpointConfig {
            base_url: base_url.into(),
            model: model.into(),
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            max_in_flight: default_in_flight(),
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            api_key: None,
            backoff_base_secs: default_backoff_base(),
            backoff_factor: default_backoff_factor(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::Config(m.to_string()));
        if self.base_url.trim().is_empty() {
            return bad("base_url is empty");
        }
        if self.model.trim().is_empty() {
            return bad("model is empty");
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return bad("timeout_secs must be > 0");
        }
        if self.max_in_flight < 1 {
            return bad("max_in_flight must be >= 1");
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return bad("temperature must be >= 0");
        }
        if !(self.backoff_base_secs >= 0.0 && self.backoff_factor >= 1.0) {
            return bad("backoff_base_secs must be >= 0 and backoff_factor >= 1");
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    /// Upper bound on a full request including every retry.
    pub fn budget(&self) -> Duration {
        self.timeout() * (self.max_retries + 1)
    }

    /// Full-jitter delay before retry number `retry` (1-based).
    fn backoff(&self, retry: u32) -> Duration {
        let cap = self.backoff_base_secs * self.backoff_factor.powi(retry as i32 - 1);
        Duration::from_secs_f64(rand::rng().random_range(0.0..=cap.max(0.0)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Part {
    Text(String),
    Image(ImageRef),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatMessage {
    pub role: Role,
    pub parts: Vec<Part>,
}

impl ChatMessage {
    pub fn user_text(text: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            parts: vec![Part::Text(text.into())],
        }
    }

    /// Images first, then the prompt text.
    pub fn user_with_images<'a>(images: impl IntoIterator<Item = &'a ImageRef>, text: impl Into<String>) -> Self {
        let mut parts: Vec<Part> = images.into_iter().cloned().map(Part::Image).collect();
        parts.push(Part::Text(text.into()));
        ChatMessage {
            role: Role::User,
            parts,
        }
    }

    fn to_wire(&self) -> Result<Value, GatewayError> {
        if self.parts.is_empty() {
            return Err(GatewayError::InvalidRequest("message has no parts".into()));
        }
        let content = match self.parts.as_slice() {
            [Part::Text(t)] => Value::String(t.clone()),
            parts => Value::Array(
                parts
                    .iter()
                    .map(|p| match p {
                        Part::Text(t) => Ok(json!({"type": "text", "text": t})),
                        Part::Image(img) => Ok(json!({"type": "image_url", "image_url": {"url": img.to_wire_url()?}})),
                    })
                    .collect::<Result<_, GatewayError>>()?,
            ),
        };
        Ok(json!({"role": self.role, "content": content}))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub retries: u32,
    pub latency: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub source: Option<ImageRef>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub image: ImageRef,
    pub latency: Duration,
}

/// A client bound to one endpoint. Cloning shares the in-flight limit.
#[derive(Debug, Clone)]
pub struct Gateway {
    cfg: Arc<EndpointConfig>,
    http: reqwest::Client,
    permits: Arc<Semaphore>,
}

impl Gateway {
    pub fn new(cfg: EndpointConfig) -> Result<Self, GatewayError> {
        cfg.validate()?;
        let http = reqwest::Client::builder()
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(Gateway {
            permits: Arc::new(Semaphore::new(cfg.max_in_flight)),
            cfg: Arc::new(cfg),
            http,
        })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{path}", self.cfg.base_url.trim_end_matches('/'))
    }

    pub async fn complete(&self, messages: &[ChatMessage]) -> Result<Completion, GatewayError> {
        self.complete_at(messages, self.cfg.temperature).await
    }

    /// Chat completion at an explicit sampling temperature.
    pub async fn complete_at(&self, messages: &[ChatMessage], temperature: f64) -> Result<Completion, GatewayError> {
        if messages.is_empty() {
            return Err(GatewayError::InvalidRequest("no messages".into()));
        }
        let wire: Vec<Value> = messages.iter().map(ChatMessage::to_wire).collect::<Result<_, _>>()?;
        let body = json!({
            "model": self.cfg.model,
            "messages": wire,
            "temperature": temperature,
            "max_tokens": self.cfg.max_tokens,
        });
        let started = Instant::now();
        let (reply, retries) = self.post_with_retries("chat/completions", &body).await?;
        let text = reply
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| GatewayError::InvalidResponse("missing choices[0].message.content".into()))?
            .to_string();
        Ok(Completion {
            text,
            retries,
            latency: started.elapsed(),
        })
    }

    pub async fn generate_image(&self, req: &GenerationRequest) -> Result<GenerationResult, GatewayError> {
        if req.prompt.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("empty generation prompt".into()));
        }
        let mut body = json!({
            "model": self.cfg.model,
            "prompt": req.prompt,
            "seed": req.seed,
            "n": 1,
            "response_format": "b64_json",
        });
        if let Some(src) = &req.source {
            body["image"] = Value::String(src.to_wire_url()?);
        }
        let started = Instant::now();
        let (reply, _) = self.post_with_retries("images/generations", &body).await?;
        let b64 = reply
            .pointer("/data/0/b64_json")
            .and_then(Value::as_str)
            .ok_or_else(|| GatewayError::InvalidResponse("missing data[0].b64_json".into()))?;
        let bytes = STANDARD
            .decode(b64)
            .map_err(|e| GatewayError::InvalidResponse(e.to_string()))?;
        let media_type = reply
            .pointer("/data/0/media_type")
            .and_then(Value::as_str)
            .unwrap_or("image/png");
        let image = ImageRef::inline(media_type, bytes).map_err(|e| GatewayError::InvalidResponse(e.to_string()))?;
        Ok(GenerationResult {
            image,
            latency: started.elapsed(),
        })
    }

    async fn post_with_retries(&self, path: &str, body: &Value) -> Result<(Value, u32), GatewayError> {
        let deadline = Instant::now() + self.cfg.budget();
        let mut retries = 0u32;
        loop {
            let remaining = deadline.saturating_duration_since(Instant::now());
            let attempt_timeout = remaining.min(self.cfg.timeout());
            let outcome = if attempt_timeout.is_zero() {
                Err(GatewayError::Timeout(self.cfg.timeout()))
            } else {
                self.attempt(path, body, attempt_timeout).await
            };
            let err = match outcome {
                Ok(v) => return Ok((v, retries)),
                Err(e) if !e.is_retryable() => return Err(e),
                Err(e) => e,
            };
            if self.cfg.max_retries == 0 {
                return Err(err);
            }
            if retries >= self.cfg.max_retries {
                return Err(GatewayError::BudgetExceeded {
                    attempts: retries + 1,
                    last: Box::new(err),
                });
            }
            retries += 1;
            let pause = self.cfg.backoff(retries);
            if Instant::now() + pause >= deadline {
                return Err(GatewayError::BudgetExceeded {
                    attempts: retries,
                    last: Box::new(err),
                });
            }
            tracing::debug!(path, retries, ?pause, error = %err, "retrying");
            tokio::time::sleep(pause).await;
        }
    }

    async fn attempt(&self, path: &str, body: &Value, timeout: Duration) -> Result<Value, GatewayError> {
        let _permit = self
            .permits
            .acquire()
            .await
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        let mut req = self.http.post(self.url(path)).json(body).timeout(timeout);
        if let Some(key) = &self.cfg.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(|e| classify(e, timeout))?;
        let status = resp.status();
        if status.as_u16() == 429 {
            return Err(GatewayError::RateLimited);
        }
        let text = resp.text().await.map_err(|e| classify(e, timeout))?;
        if !status.is_success() {
            return Err(GatewayError::Server {
                status: status.as_u16(),
                body: text,
            });
        }
        serde_json::from_str(&text).map_err(|e| GatewayError::InvalidResponse(e.to_string()))
    }
}

fn classify(e: reqwest::Error, timeout: Duration) -> GatewayError {
    if e.is_timeout() {
        GatewayError::Timeout(timeout)
    } else {
        GatewayError::Transport(e.to_string())
    }
}
