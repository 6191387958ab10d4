//! Chat-completion targets that return per-token log-probabilities.
//!
//! [`OpenAiClient`] speaks the OpenAI-compatible chat-completions wire format;
//! [`MockTarget`] provides deterministic models for tests and offline runs.

mod mock;
mod openai;
pub(crate) mod retry;

use std::sync::{Condvar, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompting::PromptBundle;

pub use mock::{MockBehavior, MockTarget, ScriptRule};
pub use openai::{OpenAiClient, OpenAiConfig};
pub use retry::RetryPolicy;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("transport failure after {attempts} attempt(s) (retryable: {retryable}): {message}")]
    Transport {
        attempts: u32,
        retryable: bool,
        message: String,
    },
    #[error("endpoint does not provide {0}")]
    Capability(String),
    #[error("malformed completion: {0}")]
    Protocol(String),
}

impl GatewayError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, GatewayError::Transport { retryable: true, .. })
    }
}

/// Decoding settings; defaults are greedy decoding with a long output budget
/// and the widest top-logprob view served APIs allow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub top_logprobs: u32,
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 8192,
            top_logprobs: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopLogprob {
    pub token: String,
    pub logprob: f64,
}

/// One generated token with its byte span in [`Generation::text`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub start: usize,
    pub end: usize,
    pub logprob: f64,
    /// Top-k alternatives at this position, including the chosen token.
    pub top: Vec<TopLogprob>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    /// `None` when the endpoint returned no log-probabilities.
    pub tokens: Option<Vec<TokenLogprob>>,
    pub model_id: String,
}

impl Generation {
    /// Builds a generation from `(token, logprob, alternatives)` triples; the
    /// text is the concatenation of the tokens.
    pub fn from_tokens(model_id: impl Into<String>, tokens: Vec<(String, f64, Vec<TopLogprob>)>) -> Self {
        let mut text = String::new();
        let tokens = tokens
            .into_iter()
            .map(|(token, logprob, top)| {
                let start = text.len();
                text.push_str(&token);
                TokenLogprob {
                    end: text.len(),
                    start,
                    token,
                    logprob,
                    top,
                }
            })
            .collect();
        Self {
            text,
            tokens: Some(tokens),
            model_id: model_id.into(),
        }
    }

    pub fn text_only(model_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            tokens: None,
            model_id: model_id.into(),
        }
    }

    /// Token log-probabilities, or a capability error when absent.
    pub fn logprobs(&self) -> Result<&[TokenLogprob], GatewayError> {
        self.tokens
            .as_deref()
            .ok_or_else(|| GatewayError::Capability("token log-probabilities".into()))
    }

    /// Checks span coverage and log-probability invariants.
    pub fn validate(&self) -> Result<(), GatewayError> {
        let Some(tokens) = &self.tokens else {
            return Ok(());
        };
        let mut pos = 0;
        for (i, t) in tokens.iter().enumerate() {
            if t.start != pos || t.end < t.start || self.text.get(t.start..t.end) != Some(t.token.as_str()) {
                return Err(GatewayError::Protocol(format!("token {i} span does not tile the text")));
            }
            pos = t.end;
            if !(t.logprob <= 0.0) {
                return Err(GatewayError::Protocol(format!("token {i} has logprob {}", t.logprob)));
            }
            if t.top.iter().any(|a| !(a.logprob <= 0.0)) {
                return Err(GatewayError::Protocol(format!("token {i} has a positive alternative logprob")));
            }
            let mass: f64 = t.top.iter().map(|a| a.logprob.exp()).sum();
            if mass > 1.0 + 1e-9 {
                return Err(GatewayError::Protocol(format!("token {i} alternatives sum to {mass}")));
            }
        }
        if pos != self.text.len() {
            return Err(GatewayError::Protocol("tokens do not cover the text".into()));
        }
        Ok(())
    }
}

/// Anything that can answer a prompt.
pub trait CompletionTarget: Send + Sync {
    fn model_id(&self) -> &str;

    fn complete(&self, prompt: &PromptBundle, params: &DecodingParams) -> Result<Generation, GatewayError>;
}

/// Counting semaphore capping in-flight requests per endpoint.
#[derive(Debug)]
pub struct ConcurrencyLimit {
    max: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a> {
    limit: &'a ConcurrencyLimit,
}

impl ConcurrencyLimit {
    pub fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.max {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        Permit { limit: self }
    }

    pub fn in_flight(&self) -> usize {
        *self.in_flight.lock().unwrap_or_else(|e| e.into_inner())
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.limit.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.limit.freed.notify_one();
    }
}

pub(crate) fn check_prompt(prompt: &PromptBundle) -> Result<(), GatewayError> {
    if prompt.user.trim().is_empty() && prompt.system.trim().is_empty() {
        Err(GatewayError::EmptyPrompt)
    } else {
        Ok(())
    }
}
