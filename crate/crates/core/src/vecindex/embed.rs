use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use super::Embedding;
use crate::catalog::Listing;
use crate::gateway::retry::{classify_status, Attempt, RetryPolicy};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EmbedError {
    #[error("listing has no text to embed")]
    EmptyText,
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid embedding: {0}")]
    Invalid(String),
    #[error("embedding endpoint failed after {attempts} attempt(s) (retryable: {retryable}): {message}")]
    Transport {
        attempts: u32,
        retryable: bool,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    RemoteEndpoint,
    DeterministicFeatureHash,
}

/// Maps listing text into the retrieval space.
pub trait Embedder: Send + Sync {
    fn kind(&self) -> ProviderKind;

    fn dimension(&self) -> usize;

    fn embed_text(&self, text: &str) -> Result<Embedding, EmbedError>;

    /// Embeds title, description and condition; other fields are ignored.
    fn embed(&self, listing: &Listing) -> Result<Embedding, EmbedError> {
        self.embed_text(&listing.describe())
    }
}

/// Signed feature hashing of lower-cased word unigrams and bigrams into
/// `dimension` buckets, then L2 normalisation. Uses FNV-1a, so vectors are
/// identical across runs and platforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureHashEmbedder {
    dimension: usize,
}

impl FeatureHashEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { dimension }
    }
}

impl Default for FeatureHashEmbedder {
    fn default() -> Self {
        Self::new(super::DEFAULT_DIMENSION)
    }
}

fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &b in *part {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl Embedder for FeatureHashEmbedder {
    fn kind(&self) -> ProviderKind {
        ProviderKind::DeterministicFeatureHash
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_text(&self, text: &str) -> Result<Embedding, EmbedError> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let mut v = vec![0.0; self.dimension];
        let mut add = |h: u64| {
            let bucket = (h % self.dimension as u64) as usize;
            v[bucket] += if h >> 63 == 0 { 1.0 } else { -1.0 };
        };
        for t in &tokens {
            add(fnv1a(&[b"u:", t.as_bytes()]));
        }
        for pair in tokens.windows(2) {
            add(fnv1a(&[b"b:", pair[0].as_bytes(), b" ", pair[1].as_bytes()]));
        }
        // Signed collisions can cancel everything on tiny inputs; fall back to
        // an unsigned count of the first token so the vector stays defined.
        if v.iter().all(|x| *x == 0.0) {
            let h = fnv1a(&[b"u:", tokens[0].as_bytes()]);
            v[(h % self.dimension as u64) as usize] = 1.0;
        }
        Embedding::normalize(v).map_err(|e| EmbedError::Invalid(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteEmbedderConfig {
    pub base_url: String,
    pub model: String,
    pub dimension: usize,
    #[serde(default)]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_timeout_secs() -> u64 {
    30
}

/// Embeddings from an OpenAI-compatible `/embeddings` endpoint.
pub struct RemoteEmbedder {
    cfg: RemoteEmbedderConfig,
    client: reqwest::blocking::Client,
}

impl RemoteEmbedder {
    pub fn new(cfg: RemoteEmbedderConfig) -> Result<Self, EmbedError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| EmbedError::Invalid(format!("http client: {e}")))?;
        Ok(Self { cfg, client })
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl Embedder for RemoteEmbedder {
    fn kind(&self) -> ProviderKind {
        ProviderKind::RemoteEndpoint
    }

    fn dimension(&self) -> usize {
        self.cfg.dimension
    }

    fn embed_text(&self, text: &str) -> Result<Embedding, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let url = format!("{}/embeddings", self.cfg.base_url.trim_end_matches('/'));
        let body = json!({ "model": self.cfg.model, "input": text });
        let raw = self
            .cfg
            .retry
            .run(|| {
                let mut req = self.client.post(&url).json(&body);
                if let Some(key) = &self.cfg.api_key {
                    req = req.bearer_auth(key);
                }
                let resp = req.send().map_err(|e| Attempt::Retryable(e.to_string()))?;
                let status = resp.status().as_u16();
                let text = resp.text().map_err(|e| Attempt::Retryable(e.to_string()))?;
                if !(200..300).contains(&status) {
                    return Err(classify_status(status, &text));
                }
                let parsed: EmbeddingResponse =
                    serde_json::from_str(&text).map_err(|e| Attempt::Fatal(format!("bad response: {e}")))?;
                parsed
                    .data
                    .into_iter()
                    .next()
                    .map(|d| d.embedding)
                    .ok_or_else(|| Attempt::Fatal("response has no embedding".into()))
            })
            .map_err(|e| EmbedError::Transport {
                attempts: e.attempts,
                retryable: e.retryable,
                message: e.message,
            })?;
        if raw.len() != self.cfg.dimension {
            return Err(EmbedError::Dimension {
                expected: self.cfg.dimension,
                got: raw.len(),
            });
        }
        Embedding::normalize(raw).map_err(|e| EmbedError::Invalid(e.to_string()))
    }
}
