use std::time::Duration;

use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum TransportError {
    #[error("rate limited")]
    RateLimited,
    #[error("http status {0}: {1}")]
    Status(u16, String),
    #[error("i/o: {0}")]
    Io(String),
}

impl TransportError {
    pub fn is_retryable(&self) -> bool {
        match self {
            TransportError::RateLimited | TransportError::Io(_) => true,
            TransportError::Status(code, _) => *code >= 500,
        }
    }
}

/// JSON-over-HTTP POST. Swappable so tests can count or script calls.
pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, headers: &[(String, String)], body: &Value) -> Result<Value, TransportError>;
}

#[derive(Debug, Clone)]
pub struct HttpTransport {
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { agent }
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self::new(Duration::from_secs(120))
    }
}

impl Transport for HttpTransport {
    fn post_json(&self, url: &str, headers: &[(String, String)], body: &Value) -> Result<Value, TransportError> {
        let mut request = self.agent.post(url);
        for (name, value) in headers {
            request = request.header(name, value);
        }
        let mut response = request.send_json(body).map_err(|e| TransportError::Io(e.to_string()))?;
        let status = response.status().as_u16();
        if status == 429 {
            return Err(TransportError::RateLimited);
        }
        if !(200..300).contains(&status) {
            let text = response.body_mut().read_to_string().unwrap_or_default();
            return Err(TransportError::Status(status, text));
        }
        response
            .body_mut()
            .read_json()
            .map_err(|e| TransportError::Io(e.to_string()))
    }
}
