use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::retry::{classify_status, Attempt, RetryPolicy};
use super::{check_prompt, CompletionTarget, ConcurrencyLimit, DecodingParams, Generation, GatewayError, TopLogprob};
use crate::prompting::PromptBundle;

fn default_timeout_secs() -> u64 {
    120
}

fn default_max_concurrency() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenAiConfig {
    /// Base URL up to and including the version segment, e.g. `https://host/v1`.
    pub base_url: String,
    pub model: String,
    #[serde(default)]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_concurrency")]
    pub max_concurrency: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
}

/// Blocking client for `POST {base_url}/chat/completions` with
/// `logprobs: true` and `top_logprobs`.
pub struct OpenAiClient {
    cfg: OpenAiConfig,
    client: reqwest::blocking::Client,
    limit: ConcurrencyLimit,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    content: Option<Vec<WireToken>>,
}

#[derive(Deserialize)]
struct WireToken {
    token: String,
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<WireTop>,
}

#[derive(Deserialize)]
struct WireTop {
    token: String,
    logprob: f64,
}

impl OpenAiClient {
    pub fn new(cfg: OpenAiConfig) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| GatewayError::Protocol(format!("http client: {e}")))?;
        let limit = ConcurrencyLimit::new(cfg.max_concurrency);
        Ok(Self { cfg, client, limit })
    }

    pub fn config(&self) -> &OpenAiConfig {
        &self.cfg
    }

    pub(crate) fn request_body(&self, prompt: &PromptBundle, params: &DecodingParams) -> serde_json::Value {
        let mut messages = Vec::with_capacity(2);
        if !prompt.system.is_empty() {
            messages.push(json!({ "role": "system", "content": prompt.system }));
        }
        messages.push(json!({ "role": "user", "content": prompt.user }));
        json!({
            "model": self.cfg.model,
            "messages": messages,
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
            "logprobs": true,
            "top_logprobs": params.top_logprobs,
        })
    }
}

/// Converts a chat-completions response body into a [`Generation`].
pub(crate) fn decode_response(model_id: &str, body: &str) -> Result<Generation, GatewayError> {
    let resp: ChatResponse =
        serde_json::from_str(body).map_err(|e| GatewayError::Protocol(format!("bad response body: {e}")))?;
    let choice = resp
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| GatewayError::Protocol("response has no choices".into()))?;
    let content = choice.message.content.unwrap_or_default();
    let Some(wire) = choice.logprobs.and_then(|l| l.content) else {
        return Ok(Generation::text_only(model_id, content));
    };
    let tokens: Vec<(String, f64, Vec<TopLogprob>)> = wire
        .into_iter()
        .map(|t| {
            let mut top: Vec<TopLogprob> = t
                .top_logprobs
                .into_iter()
                .map(|a| TopLogprob {
                    token: a.token,
                    logprob: a.logprob,
                })
                .collect();
            if !top.iter().any(|a| a.token == t.token) {
                top.push(TopLogprob {
                    token: t.token.clone(),
                    logprob: t.logprob,
                });
            }
            (t.token, t.logprob, top)
        })
        .collect();
    let generation = Generation::from_tokens(model_id, tokens);
    if generation.text != content {
        tracing::warn!("token stream does not reproduce message content; using the token stream");
    }
    generation.validate()?;
    Ok(generation)
}

impl CompletionTarget for OpenAiClient {
    fn model_id(&self) -> &str {
        &self.cfg.model
    }

    fn complete(&self, prompt: &PromptBundle, params: &DecodingParams) -> Result<Generation, GatewayError> {
        check_prompt(prompt)?;
        let _permit = self.limit.acquire();
        let url = format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'));
        let body = self.request_body(prompt, params);
        let text = self
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
                if (200..300).contains(&status) {
                    Ok(text)
                } else {
                    Err(classify_status(status, &text))
                }
            })
            .map_err(|e| GatewayError::Transport {
                attempts: e.attempts,
                retryable: e.retryable,
                message: e.message,
            })?;
        decode_response(&self.cfg.model, &text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::PromptMode;

    #[test]
    fn request_body_shape() {
        let client = OpenAiClient::new(OpenAiConfig {
            base_url: "http://localhost:1/v1".into(),
            model: "m".into(),
            api_key: None,
            timeout_secs: 1,
            max_concurrency: 1,
            retry: RetryPolicy::default(),
        })
        .unwrap();
        let body = client.request_body(
            &PromptBundle {
                system: "sys".into(),
                user: "usr".into(),
                mode: PromptMode::PriceOnly,
            },
            &DecodingParams::default(),
        );
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"], "usr");
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["max_tokens"], 8192);
        assert_eq!(body["logprobs"], true);
        assert_eq!(body["top_logprobs"], 20);
    }

    #[test]
    fn decodes_logprobs() {
        let body = r#"{"choices":[{"message":{"role":"assistant","content":"<price>120</price>"},
            "logprobs":{"content":[
              {"token":"<price>","logprob":0.0,"top_logprobs":[{"token":"<price>","logprob":0.0}]},
              {"token":"12","logprob":-0.5,"top_logprobs":[{"token":"12","logprob":-0.5},{"token":"11","logprob":-1.2}]},
              {"token":"0","logprob":-0.01,"top_logprobs":[]},
              {"token":"</price>","logprob":0.0,"top_logprobs":[{"token":"</price>","logprob":0.0}]}]}}]}"#;
        let g = decode_response("m", body).unwrap();
        assert_eq!(g.text, "<price>120</price>");
        let toks = g.logprobs().unwrap();
        assert_eq!(toks.len(), 4);
        assert_eq!(toks[1].top.len(), 2);
        // The chosen token is always among the alternatives.
        assert_eq!(toks[2].top.len(), 1);
        assert_eq!(toks[2].top[0].token, "0");
    }

    #[test]
    fn missing_logprobs_yields_text_only() {
        let body = r#"{"choices":[{"message":{"content":"<price>5</price>"},"logprobs":null}]}"#;
        let g = decode_response("m", body).unwrap();
        assert_eq!(g.text, "<price>5</price>");
        assert!(g.tokens.is_none());
    }

    #[test]
    fn malformed_body_is_protocol_error() {
        assert!(matches!(decode_response("m", "{}"), Err(GatewayError::Protocol(_))));
        assert!(matches!(decode_response("m", r#"{"choices":[]}"#), Err(GatewayError::Protocol(_))));
    }
}
