//! JSON-over-HTTP backends.
//!
//! Chat wire format (POST to the model endpoint):
//!
//! ```json
//! {"model": "...", "system": "...",
//!  "parts": [{"type": "text", "value": "..."},
//!            {"type": "image", "value": "<base64>", "mime": "image/png"}],
//!  "temperature": 0.0, "max_tokens": 2048}
//! ```
//!
//! The reply is either `{"text": "..."}` or a plain-text body, returned as is.
//! Embedding requests post `{"model": "...", "texts": [...]}` and expect
//! `{"embeddings": [[...], ...]}`.

use std::path::Path;
use std::time::Duration;

use base64::Engine as _;
use reqwest::blocking::Client;
use serde_json::{json, Value};

use super::{
    require_texts, ChatBackend, ChatRequest, EmbeddingVector, Embedder, ImageRef, ModelError,
    UserPart,
};

pub const ENV_MODEL_ENDPOINT: &str = "MODEL_ENDPOINT";
pub const ENV_MODEL_NAME: &str = "MODEL_NAME";
pub const ENV_MODEL_API_KEY: &str = "MODEL_API_KEY";
pub const ENV_EMBED_ENDPOINT: &str = "EMBED_ENDPOINT";
pub const ENV_EMBED_MODEL: &str = "EMBED_MODEL";
pub const ENV_EMBED_DIM: &str = "EMBED_DIM";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 2u32.saturating_pow(attempt);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

#[derive(Debug, Clone)]
pub struct BackendConfig {
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl BackendConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: None,
            timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
        }
    }

    /// Endpoint, model name and key from `MODEL_ENDPOINT`, `MODEL_NAME`,
    /// `MODEL_API_KEY`.
    pub fn from_env() -> Result<Self, ModelError> {
        let endpoint = env_required(ENV_MODEL_ENDPOINT)?;
        let model = std::env::var(ENV_MODEL_NAME).unwrap_or_default();
        let mut config = Self::new(endpoint, model);
        config.api_key = std::env::var(ENV_MODEL_API_KEY).ok().filter(|k| !k.is_empty());
        Ok(config)
    }
}

#[derive(Debug, Clone)]
pub struct EmbedConfig {
    pub backend: BackendConfig,
    pub dimension: usize,
    pub batch_size: usize,
}

impl EmbedConfig {
    /// `EMBED_ENDPOINT`, `EMBED_MODEL`, `EMBED_DIM`; the key is shared with
    /// the chat backend.
    pub fn from_env() -> Result<Self, ModelError> {
        let endpoint = env_required(ENV_EMBED_ENDPOINT)?;
        let model = std::env::var(ENV_EMBED_MODEL).unwrap_or_default();
        let dimension = env_required(ENV_EMBED_DIM)?
            .parse::<usize>()
            .map_err(|e| ModelError::Config(format!("{ENV_EMBED_DIM}: {e}")))?;
        let mut backend = BackendConfig::new(endpoint, model);
        backend.api_key = std::env::var(ENV_MODEL_API_KEY).ok().filter(|k| !k.is_empty());
        Ok(Self {
            backend,
            dimension,
            batch_size: 64,
        })
    }
}

fn env_required(name: &str) -> Result<String, ModelError> {
    std::env::var(name)
        .ok()
        .filter(|v| !v.is_empty())
        .ok_or_else(|| ModelError::Config(format!("environment variable {name} is not set")))
}

/// One retrying POST; shared by chat and embedding clients.
struct Poster {
    client: Client,
    config: BackendConfig,
}

impl Poster {
    fn new(config: BackendConfig) -> Result<Self, ModelError> {
        if config.endpoint.is_empty() {
            return Err(ModelError::Config("endpoint is empty".into()));
        }
        let client = Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| ModelError::Config(e.to_string()))?;
        Ok(Self { client, config })
    }

    fn post(&self, body: &Value) -> Result<String, ModelError> {
        let retry = self.config.retry;
        let mut attempt = 0;
        loop {
            let err = match self.send_once(body) {
                Ok(text) => return Ok(text),
                Err(e) => e,
            };
            let transient = match &err {
                ModelError::Backend { status, .. } => *status >= 500,
                ModelError::Transport(_) | ModelError::Timeout => true,
                _ => false,
            };
            if !transient || attempt >= retry.max_retries {
                return Err(err);
            }
            log::warn!(
                "backend attempt {} failed ({err}); retrying in {:?}",
                attempt + 1,
                retry.delay(attempt)
            );
            std::thread::sleep(retry.delay(attempt));
            attempt += 1;
        }
    }

    fn send_once(&self, body: &Value) -> Result<String, ModelError> {
        let mut request = self.client.post(&self.config.endpoint).json(body);
        if let Some(key) = &self.config.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(classify)?;
        let status = response.status();
        let text = response.text().map_err(classify)?;
        if status.is_success() {
            Ok(text)
        } else {
            Err(ModelError::Backend {
                status: status.as_u16(),
                body: excerpt(&text),
            })
        }
    }
}

fn classify(err: reqwest::Error) -> ModelError {
    if err.is_timeout() {
        ModelError::Timeout
    } else {
        ModelError::Transport(err.to_string())
    }
}

fn excerpt(body: &str) -> String {
    const LIMIT: usize = 512;
    match body.char_indices().nth(LIMIT) {
        Some((cut, _)) => format!("{}...", &body[..cut]),
        None => body.to_string(),
    }
}

fn mime_for(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("jpg") | Some("jpeg") => "image/jpeg",
        _ => "image/png",
    }
}

/// Builds the chat wire body, inlining images as base64.
pub fn chat_wire_body(model: &str, request: &ChatRequest) -> Result<Value, ModelError> {
    let engine = base64::engine::general_purpose::STANDARD;
    let parts = request
        .user_parts
        .iter()
        .map(|part| match part {
            UserPart::Text(text) => Ok(json!({ "type": "text", "value": text })),
            UserPart::Image(ImageRef::File(path)) => {
                let bytes = std::fs::read(path).map_err(|e| {
                    ModelError::InvalidInput(format!("cannot read image {}: {e}", path.display()))
                })?;
                Ok(json!({ "type": "image", "value": engine.encode(bytes), "mime": mime_for(path) }))
            }
            UserPart::Image(ImageRef::Png(bytes)) => {
                Ok(json!({ "type": "image", "value": engine.encode(bytes), "mime": "image/png" }))
            }
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(json!({
        "model": model,
        "system": request.system_prompt,
        "parts": parts,
        "temperature": request.temperature,
        "max_tokens": request.max_output_tokens,
    }))
}

/// Text output of a chat reply: the `text` field of a JSON object when
/// present, otherwise the body verbatim.
pub fn reply_text(body: String) -> String {
    match serde_json::from_str::<Value>(&body) {
        Ok(Value::Object(map)) => match map.get("text") {
            Some(Value::String(text)) => text.clone(),
            _ => body,
        },
        _ => body,
    }
}

pub struct HttpChatBackend {
    poster: Poster,
}

impl HttpChatBackend {
    pub fn new(config: BackendConfig) -> Result<Self, ModelError> {
        Ok(Self {
            poster: Poster::new(config)?,
        })
    }
}

impl ChatBackend for HttpChatBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, ModelError> {
        request.validate()?;
        let body = chat_wire_body(&self.poster.config.model, request)?;
        self.poster.post(&body).map(reply_text)
    }
}

pub struct HttpEmbedder {
    poster: Poster,
    dimension: usize,
    batch_size: usize,
}

impl HttpEmbedder {
    pub fn new(config: EmbedConfig) -> Result<Self, ModelError> {
        if config.dimension == 0 {
            return Err(ModelError::Config("embedding dimension must be positive".into()));
        }
        Ok(Self {
            poster: Poster::new(config.backend)?,
            dimension: config.dimension,
            batch_size: config.batch_size.max(1),
        })
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ModelError> {
        let body = json!({ "model": self.poster.config.model, "texts": texts });
        let raw = self.poster.post(&body)?;
        let parsed: Value = serde_json::from_str(&raw)
            .map_err(|e| ModelError::Transport(format!("embedding reply is not JSON: {e}")))?;
        let rows = parsed
            .get("embeddings")
            .and_then(Value::as_array)
            .ok_or_else(|| ModelError::Transport("embedding reply lacks `embeddings`".into()))?;
        if rows.len() != texts.len() {
            return Err(ModelError::Transport(format!(
                "{} embeddings for {} texts",
                rows.len(),
                texts.len()
            )));
        }
        rows.iter()
            .map(|row| {
                let values: Vec<f64> = serde_json::from_value(row.clone())
                    .map_err(|e| ModelError::Transport(format!("bad embedding row: {e}")))?;
                if values.len() != self.dimension {
                    return Err(ModelError::Transport(format!(
                        "embedding dimension {} differs from configured {}",
                        values.len(),
                        self.dimension
                    )));
                }
                EmbeddingVector::new(values)
            })
            .collect()
    }
}

impl Embedder for HttpEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ModelError> {
        require_texts(texts)?;
        let mut out = Vec::with_capacity(texts.len());
        for batch in texts.chunks(self.batch_size) {
            out.extend(self.embed_batch(batch)?);
        }
        Ok(out)
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn tag(&self) -> String {
        format!("http:{}:{}", self.poster.config.model, self.dimension)
    }
}
