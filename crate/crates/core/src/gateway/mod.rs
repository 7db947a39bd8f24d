//! Single access point to language-model backends.
//!
//! Three backends exist. `Remote` talks HTTP to a chat-completion endpoint
//! and persists every answer in the on-disk cache. `Replay` serves only
//! what the cache already holds. `Mock` is a pure function of the request,
//! which lets the whole pipeline run offline.

mod cache;
pub mod mock;
mod transport;

use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::{CacheRecord, ResponseCache};
pub use mock::MockBackend;
pub use transport::{HttpTransport, Transport, TransportError};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("replay miss for key {0}")]
    ReplayMiss(String),
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("rate limit still exceeded after {0} attempts")]
    RateLimitExhausted(u32),
    #[error("backend returned an empty response")]
    EmptyResponse,
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("mock backend has no responder for task {0:?}")]
    NoMockResponder(Task),
    #[error("mock responder failed: {0}")]
    Mock(String),
    #[error("cache i/o on {path}: {source}")]
    Cache { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

/// Which pipeline role issued a request. Mock backends dispatch on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Describe,
    Entail,
    Filter,
    Synthesize,
    Judge,
    Caption,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePayload {
    pub media_type: String,
    pub data: Arc<[u8]>,
}

impl ImagePayload {
    pub fn new(media_type: impl Into<String>, data: impl Into<Arc<[u8]>>) -> Self {
        Self {
            media_type: media_type.into(),
            data: data.into(),
        }
    }

    /// Reads an image file, deriving the media type from its extension.
    pub fn from_file(path: &Path) -> std::io::Result<Self> {
        let data = std::fs::read(path)?;
        Ok(Self::new(media_type_for(path), data))
    }

    pub fn sha256_hex(&self) -> String {
        hex::encode(Sha256::digest(&self.data))
    }
}

pub fn media_type_for(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("jpg") | Some("jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("bmp") => "image/bmp",
        Some("txt") => "text/plain",
        _ => "application/octet-stream",
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Part {
    Text(String),
    Image(ImagePayload),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub role: Role,
    pub parts: Vec<Part>,
}

impl Message {
    pub fn user(parts: Vec<Part>) -> Self {
        Self {
            role: Role::User,
            parts,
        }
    }

    pub fn user_text(text: impl Into<String>) -> Self {
        Self::user(vec![Part::Text(text.into())])
    }

    pub fn assistant_text(text: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            parts: vec![Part::Text(text.into())],
        }
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.parts.iter().filter_map(|p| match p {
            Part::Text(t) => Some(t.as_str()),
            Part::Image(_) => None,
        })
    }

    pub fn images(&self) -> impl Iterator<Item = &ImagePayload> {
        self.parts.iter().filter_map(|p| match p {
            Part::Image(i) => Some(i),
            Part::Text(_) => None,
        })
    }
}

/// Model selection and sampling settings for one role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestProfile {
    pub model_tag: String,
    pub temperature: f64,
    pub max_output: u32,
}

impl RequestProfile {
    pub fn new(model_tag: impl Into<String>, temperature: f64, max_output: u32) -> Self {
        Self {
            model_tag: model_tag.into(),
            temperature,
            max_output,
        }
    }

    /// Temperature 0 for every role except synthesis, which gets 0.2.
    pub fn default_for(task: Task) -> Self {
        let temperature = if task == Task::Synthesize { 0.2 } else { 0.0 };
        Self::new("default", temperature, 2048)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub task: Task,
    pub messages: Vec<Message>,
    pub model_tag: String,
    pub temperature: f64,
    pub max_output: u32,
}

impl ChatRequest {
    pub fn new(task: Task, profile: &RequestProfile, messages: Vec<Message>) -> Self {
        Self {
            task,
            messages,
            model_tag: profile.model_tag.clone(),
            temperature: profile.temperature,
            max_output: profile.max_output,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("no messages".into()));
        }
        for m in &self.messages {
            if m.role != Role::User && m.images().next().is_some() {
                return Err(GatewayError::InvalidRequest(format!(
                    "image payload in a {:?} message",
                    m.role
                )));
            }
        }
        Ok(())
    }

    pub fn image_count(&self) -> usize {
        self.messages.iter().map(|m| m.images().count()).sum()
    }

    /// Text of the last user message, concatenated.
    pub fn last_user_text(&self) -> String {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.texts().collect::<Vec<_>>().join("\n"))
            .unwrap_or_default()
    }

    /// Messages with images replaced by their content hash.
    fn canonical_messages(&self) -> Value {
        Value::Array(
            self.messages
                .iter()
                .map(|m| {
                    let parts: Vec<Value> = m
                        .parts
                        .iter()
                        .map(|p| match p {
                            Part::Text(t) => json!({"type": "text", "text": t}),
                            Part::Image(i) => json!({
                                "type": "image",
                                "media_type": i.media_type,
                                "sha256": i.sha256_hex(),
                            }),
                        })
                        .collect();
                    json!({"role": m.role, "parts": parts})
                })
                .collect(),
        )
    }

    /// Vendor-neutral wire body with inline base64 images.
    pub fn wire_body(&self) -> Value {
        let b64 = base64::engine::general_purpose::STANDARD;
        let messages: Vec<Value> = self
            .messages
            .iter()
            .map(|m| {
                let content: Vec<Value> = m
                    .parts
                    .iter()
                    .map(|p| match p {
                        Part::Text(t) => json!({"type": "text", "text": t}),
                        Part::Image(i) => json!({
                            "type": "image",
                            "media_type": i.media_type,
                            "data": b64.encode(&i.data),
                        }),
                    })
                    .collect();
                json!({"role": m.role, "content": content})
            })
            .collect();
        json!({
            "model": self.model_tag,
            "temperature": self.temperature,
            "max_tokens": self.max_output,
            "messages": messages,
        })
    }
}

/// Content digest identifying a request to a given backend.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey(String);

impl CacheKey {
    pub fn for_request(backend_id: &str, request: &ChatRequest) -> Self {
        let material = json!({
            "backend_id": backend_id,
            "model_tag": request.model_tag,
            "temperature": format!("{:?}", request.temperature),
            "max_output": request.max_output,
            "task": request.task,
            "messages": request.canonical_messages(),
        });
        let digest = Sha256::digest(material.to_string().as_bytes());
        Self(hex::encode(digest))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatResponse {
    pub text: String,
    pub backend_id: String,
    pub cached: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_delay: Duration::from_millis(500),
        }
    }
}

/// Endpoint settings of the remote backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteEndpoint {
    pub url: String,
    /// Environment variable holding the bearer credential.
    pub api_key_env: Option<String>,
}

enum Backend {
    Remote {
        endpoint: RemoteEndpoint,
        transport: Arc<dyn Transport>,
    },
    Replay,
    Mock(MockBackend),
}

/// Counting semaphore bounding the number of in-flight remote calls.
struct InFlight {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> InFlightGuard<'_> {
        let mut active = self.active.lock().expect("in-flight lock");
        while *active >= self.limit {
            active = self.freed.wait(active).expect("in-flight lock");
        }
        *active += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.active.lock().expect("in-flight lock") -= 1;
        self.0.freed.notify_one();
    }
}

pub struct Gateway {
    backend_id: String,
    backend: Backend,
    cache: Option<ResponseCache>,
    retry: RetryPolicy,
    in_flight: InFlight,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match self.backend {
            Backend::Remote { .. } => "remote",
            Backend::Replay => "replay",
            Backend::Mock(_) => "mock",
        };
        f.debug_struct("Gateway")
            .field("backend_id", &self.backend_id)
            .field("kind", &kind)
            .finish()
    }
}

impl Gateway {
    pub fn remote(
        backend_id: impl Into<String>,
        endpoint: RemoteEndpoint,
        transport: Arc<dyn Transport>,
        cache: ResponseCache,
    ) -> Self {
        Self {
            backend_id: backend_id.into(),
            backend: Backend::Remote { endpoint, transport },
            cache: Some(cache),
            retry: RetryPolicy::default(),
            in_flight: InFlight::new(4),
        }
    }

    /// Serves entries recorded earlier by a remote backend with the same id.
    pub fn replay(backend_id: impl Into<String>, cache: ResponseCache) -> Self {
        Self {
            backend_id: backend_id.into(),
            backend: Backend::Replay,
            cache: Some(cache),
            retry: RetryPolicy::default(),
            in_flight: InFlight::new(1),
        }
    }

    pub fn mock(mock: MockBackend) -> Self {
        Self {
            backend_id: "mock".into(),
            backend: Backend::Mock(mock),
            cache: None,
            retry: RetryPolicy::default(),
            in_flight: InFlight::new(1),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_in_flight_limit(mut self, limit: usize) -> Self {
        self.in_flight = InFlight::new(limit);
        self
    }

    pub fn backend_id(&self) -> &str {
        &self.backend_id
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        match &self.backend {
            Backend::Mock(mock) => {
                let text = mock.respond(request)?;
                self.finish(text, false)
            }
            Backend::Replay => {
                let key = CacheKey::for_request(&self.backend_id, request);
                let cache = self.cache.as_ref().expect("replay has a cache");
                match cache.get(&key)? {
                    Some(record) => self.finish(record.response, true),
                    None => Err(GatewayError::ReplayMiss(key.as_str().to_string())),
                }
            }
            Backend::Remote { endpoint, transport } => {
                let key = CacheKey::for_request(&self.backend_id, request);
                let cache = self.cache.as_ref().expect("remote has a cache");
                if let Some(record) = cache.get(&key)? {
                    return self.finish(record.response, true);
                }
                let text = self.call_remote(endpoint, transport.as_ref(), request)?;
                if text.trim().is_empty() {
                    return Err(GatewayError::EmptyResponse);
                }
                cache.put(
                    &key,
                    &CacheRecord {
                        key: key.as_str().to_string(),
                        backend_id: self.backend_id.clone(),
                        model_tag: request.model_tag.clone(),
                        task: request.task,
                        response: text.clone(),
                    },
                )?;
                self.finish(text, false)
            }
        }
    }

    fn finish(&self, text: String, cached: bool) -> Result<ChatResponse, GatewayError> {
        if text.trim().is_empty() {
            return Err(GatewayError::EmptyResponse);
        }
        Ok(ChatResponse {
            text,
            backend_id: self.backend_id.clone(),
            cached,
        })
    }

    fn call_remote(
        &self,
        endpoint: &RemoteEndpoint,
        transport: &dyn Transport,
        request: &ChatRequest,
    ) -> Result<String, GatewayError> {
        let mut headers = Vec::new();
        if let Some(var) = &endpoint.api_key_env {
            if let Ok(key) = std::env::var(var) {
                headers.push(("Authorization".to_string(), format!("Bearer {key}")));
            }
        }
        let body = request.wire_body();
        let _permit = self.in_flight.acquire();
        let attempts = self.retry.max_attempts.max(1);
        let mut last = TransportError::Io(String::new());
        for attempt in 0..attempts {
            if attempt > 0 {
                thread::sleep(self.retry.base_delay * 2u32.saturating_pow(attempt - 1));
            }
            match transport.post_json(&endpoint.url, &headers, &body) {
                Ok(value) => return extract_text(&value),
                Err(e) if e.is_retryable() => {
                    log::warn!("attempt {} to {} failed: {e}", attempt + 1, endpoint.url);
                    last = e;
                }
                Err(e) => {
                    return Err(GatewayError::Transport {
                        attempts: attempt + 1,
                        message: e.to_string(),
                    })
                }
            }
        }
        Err(match last {
            TransportError::RateLimited => GatewayError::RateLimitExhausted(attempts),
            other => GatewayError::Transport {
                attempts,
                message: other.to_string(),
            },
        })
    }
}

/// Accepts `{"text": ...}` and the common `choices[0].message.content` shape.
fn extract_text(value: &Value) -> Result<String, GatewayError> {
    if let Some(text) = value.get("text").and_then(Value::as_str) {
        return Ok(text.to_string());
    }
    value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| GatewayError::Malformed(value.to_string()))
}

/// Pulls the last fenced ```json block out of a prompt.
pub fn extract_json_block(text: &str) -> Option<Value> {
    let start = text.rfind("```json")?;
    let body = &text[start + "```json".len()..];
    let end = body.find("```")?;
    serde_json::from_str(body[..end].trim()).ok()
}

/// Wraps a JSON value in a fenced block for embedding in prompts.
pub fn json_block(value: &Value) -> String {
    serde_json::to_string_pretty(value).expect("json value serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Counting {
        calls: AtomicUsize,
        fail_first: usize,
        rate_limited: bool,
    }

    impl Transport for Counting {
        fn post_json(&self, _url: &str, _headers: &[(String, String)], body: &Value) -> Result<Value, TransportError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                return Err(if self.rate_limited {
                    TransportError::RateLimited
                } else {
                    TransportError::Io("connection reset".into())
                });
            }
            Ok(json!({"text": format!("echo {}", body["model"])}))
        }
    }

    fn counting(fail_first: usize, rate_limited: bool) -> Arc<Counting> {
        Arc::new(Counting {
            calls: AtomicUsize::new(0),
            fail_first,
            rate_limited,
        })
    }

    fn endpoint() -> RemoteEndpoint {
        RemoteEndpoint {
            url: "http://localhost:0/v1/chat".into(),
            api_key_env: None,
        }
    }

    fn fast_retry() -> RetryPolicy {
        RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(1),
        }
    }

    fn request(text: &str) -> ChatRequest {
        ChatRequest::new(
            Task::Describe,
            &RequestProfile::new("m", 0.0, 16),
            vec![Message::user_text(text)],
        )
    }

    #[test]
    fn second_call_is_served_from_cache() {
        let dir = tempfile::tempdir().unwrap();
        let transport = counting(0, false);
        let gw = Gateway::remote(
            "svc",
            endpoint(),
            transport.clone(),
            ResponseCache::open(dir.path()).unwrap(),
        );
        let first = gw.complete(&request("hi")).unwrap();
        let second = gw.complete(&request("hi")).unwrap();
        assert!(!first.cached);
        assert!(second.cached);
        assert_eq!(first.text, second.text);
        assert_eq!(transport.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn replay_serves_recorded_entries_only() {
        let dir = tempfile::tempdir().unwrap();
        let replay = Gateway::replay("svc", ResponseCache::open(dir.path()).unwrap());
        let err = replay.complete(&request("hi")).unwrap_err();
        assert!(err.to_string().contains("replay miss"), "{err}");

        let remote = Gateway::remote(
            "svc",
            endpoint(),
            counting(0, false),
            ResponseCache::open(dir.path()).unwrap(),
        );
        let live = remote.complete(&request("hi")).unwrap();
        let replayed = replay.complete(&request("hi")).unwrap();
        assert_eq!(live.text, replayed.text);
        assert!(replayed.cached);
    }

    #[test]
    fn transient_failures_are_retried() {
        let dir = tempfile::tempdir().unwrap();
        let transport = counting(2, false);
        let gw = Gateway::remote(
            "svc",
            endpoint(),
            transport.clone(),
            ResponseCache::open(dir.path()).unwrap(),
        )
        .with_retry(fast_retry());
        gw.complete(&request("x")).unwrap();
        assert_eq!(transport.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn rate_limit_exhaustion() {
        let dir = tempfile::tempdir().unwrap();
        let gw = Gateway::remote(
            "svc",
            endpoint(),
            counting(10, true),
            ResponseCache::open(dir.path()).unwrap(),
        )
        .with_retry(fast_retry());
        assert!(matches!(
            gw.complete(&request("x")),
            Err(GatewayError::RateLimitExhausted(3))
        ));
    }

    #[test]
    fn cache_key_sensitivity() {
        let a = request("hello");
        let b = request("hellp");
        assert_eq!(
            CacheKey::for_request("svc", &a),
            CacheKey::for_request("svc", &a.clone())
        );
        assert_ne!(CacheKey::for_request("svc", &a), CacheKey::for_request("svc", &b));
        assert_ne!(CacheKey::for_request("svc", &a), CacheKey::for_request("other", &a));
        let mut c = a.clone();
        c.temperature = 0.2;
        assert_ne!(CacheKey::for_request("svc", &a), CacheKey::for_request("svc", &c));

        let img = |byte: u8| {
            let mut r = request("x");
            r.messages[0]
                .parts
                .push(Part::Image(ImagePayload::new("image/png", vec![1, 2, byte])));
            r
        };
        assert_ne!(
            CacheKey::for_request("svc", &img(3)),
            CacheKey::for_request("svc", &img(4))
        );
    }

    #[test]
    fn rejects_images_outside_user_messages() {
        let mut r = request("x");
        r.messages.push(Message {
            role: Role::Assistant,
            parts: vec![Part::Image(ImagePayload::new("image/png", vec![0u8]))],
        });
        assert!(matches!(r.validate(), Err(GatewayError::InvalidRequest(_))));
        r.messages.clear();
        assert!(r.validate().is_err());
    }

    #[test]
    fn extracts_text_from_both_shapes() {
        assert_eq!(extract_text(&json!({"text": "a"})).unwrap(), "a");
        assert_eq!(
            extract_text(&json!({"choices": [{"message": {"content": "b"}}]})).unwrap(),
            "b"
        );
        assert!(extract_text(&json!({})).is_err());
    }

    #[test]
    fn json_block_round_trip() {
        let v = json!({"caption": "a shark", "n": 1});
        let prompt = format!("intro\n```json\n{}\n```\nrest", json_block(&v));
        assert_eq!(extract_json_block(&prompt), Some(v));
    }
}
