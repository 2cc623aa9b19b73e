//! Access to generative and embedding backends.
//!
//! Everything downstream talks to [`ChatBackend`] and [`Embedder`]; the HTTP
//! implementations live in [`http`], deterministic stand-ins in [`mock`] and
//! [`embed`].

pub mod embed;
pub mod http;
pub mod mock;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use embed::{CachingEmbedder, HashEmbedder, LookupEmbedder};
pub use http::{BackendConfig, EmbedConfig, HttpChatBackend, HttpEmbedder, RetryPolicy};
pub use mock::{EchoChat, ScriptedChat};

pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 2048;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend returned HTTP {status}: {body}")]
    Backend { status: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("mock script exhausted after {0} replies")]
    ScriptExhausted(usize),
    #[error("backend configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageRef {
    /// A raster on disk, read and base64-encoded at send time.
    File(PathBuf),
    /// PNG bytes produced in memory (e.g. an action visualization).
    Png(#[serde(with = "hex_bytes")] Vec<u8>),
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        hex::decode(text).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UserPart {
    Text(String),
    Image(ImageRef),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_prompt: String,
    pub user_parts: Vec<UserPart>,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl ChatRequest {
    /// A request with temperature 0 and the default token budget.
    pub fn new(system_prompt: impl Into<String>, user_parts: Vec<UserPart>) -> Self {
        Self {
            system_prompt: system_prompt.into(),
            user_parts,
            temperature: 0.0,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.user_parts.is_empty() {
            return Err(ModelError::InvalidInput("request has no user parts".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(ModelError::InvalidInput(format!(
                "temperature {} must be a finite value >= 0",
                self.temperature
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(ModelError::InvalidInput("max_output_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Concatenated text parts, in order.
    pub fn user_text(&self) -> String {
        self.user_parts
            .iter()
            .filter_map(|p| match p {
                UserPart::Text(t) => Some(t.as_str()),
                UserPart::Image(_) => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn with_appended_text(&self, text: impl Into<String>) -> Self {
        let mut next = self.clone();
        next.user_parts.push(UserPart::Text(text.into()));
        next
    }

    /// Hex SHA-256 over the request's canonical JSON.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("requests serialize");
        hex::encode(Sha256::digest(&json))
    }
}

/// A finite, non-empty embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, ModelError> {
        if values.is_empty() {
            return Err(ModelError::InvalidInput("embedding has no components".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::InvalidInput(format!(
                "embedding component {i} is not finite"
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self, ModelError> {
        Self::new(self.0.iter().map(|v| v * factor).collect())
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = ModelError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

/// A generative backend: one request in, the model's text out.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, ModelError>;
}

/// A text embedding backend.
pub trait Embedder: Send + Sync {
    /// One vector per input, in input order.
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ModelError>;

    fn dimension(&self) -> usize;

    /// Identifies the embedding configuration; indexes built with one tag
    /// are only queried with an embedder carrying the same tag.
    fn tag(&self) -> String;

    fn embed_one(&self, text: &str) -> Result<EmbeddingVector, ModelError> {
        let mut out = self.embed(&[text.to_string()])?;
        out.pop()
            .ok_or_else(|| ModelError::InvalidInput("embedder returned no vector".into()))
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<T> {
    fn complete(&self, request: &ChatRequest) -> Result<String, ModelError> {
        (**self).complete(request)
    }
}

impl<T: Embedder + ?Sized> Embedder for std::sync::Arc<T> {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ModelError> {
        (**self).embed(texts)
    }

    fn dimension(&self) -> usize {
        (**self).dimension()
    }

    fn tag(&self) -> String {
        (**self).tag()
    }
}

pub(crate) fn require_texts(texts: &[String]) -> Result<(), ModelError> {
    if texts.is_empty() {
        Err(ModelError::InvalidInput("embed called with no texts".into()))
    } else {
        Ok(())
    }
}
