//! Blocking client for OpenAI-compatible completion, chat and embedding APIs.

use std::time::Duration;

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, Completion, CompletionRequest, Embedder, EmbeddingVector, TextGenerator, TopLogprob};

/// Environment variable that overrides the configured credential.
pub const API_KEY_ENV: &str = "INTROPLAN_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApiFlavor {
    /// Legacy `/completions` with `logprobs: k`.
    #[default]
    Completions,
    /// `/chat/completions` with `logprobs: true, top_logprobs: k`.
    Chat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpenAiConfig {
    pub base_url: String,
    pub model: String,
    pub api: ApiFlavor,
    pub api_key: Option<String>,
    pub embedding_model: String,
    pub embedding_dim: usize,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
    /// Provider cap on top logprobs (5 for legacy completions, 20 for chat).
    pub max_top_logprobs: u32,
}

impl Default for OpenAiConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-3.5-turbo-instruct".into(),
            api: ApiFlavor::Completions,
            api_key: None,
            embedding_model: "text-embedding-3-small".into(),
            embedding_dim: 1536,
            max_retries: 3,
            backoff_ms: 500,
            timeout_secs: 60,
            max_top_logprobs: 5,
        }
    }
}

impl OpenAiConfig {
    /// Credential from the environment, falling back to the config file.
    pub fn credential(&self) -> Result<String, BackendError> {
        std::env::var(API_KEY_ENV)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .or_else(|| self.api_key.clone().filter(|k| !k.trim().is_empty()))
            .ok_or_else(|| BackendError::MissingCredential(API_KEY_ENV.into()))
    }

    fn endpoint(&self, path: &str) -> String {
        format!("{}/{}", self.base_url.trim_end_matches('/'), path)
    }
}

#[derive(Debug, Clone)]
pub struct OpenAiClient {
    config: OpenAiConfig,
    http: reqwest::blocking::Client,
}

impl OpenAiClient {
    pub fn new(config: OpenAiConfig) -> Result<Self, BackendError> {
        // Fails harmlessly when a provider is already installed.
        let _ = rustls::crypto::ring::default_provider().install_default();
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Transport {
                message: e.to_string(),
                retryable: false,
            })?;
        Ok(Self { config, http })
    }

    pub fn config(&self) -> &OpenAiConfig {
        &self.config
    }

    /// POSTs `body`, retrying retryable failures at most `max_retries` times.
    fn post(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        let key = self.config.credential()?;
        let url = self.config.endpoint(path);
        let mut attempt = 0u32;
        loop {
            let result = self.post_once(&url, &key, body);
            match result {
                Err(e) if e.is_retryable() && attempt < self.config.max_retries => {
                    let wait = self.config.backoff_ms.saturating_mul(1 << attempt.min(10));
                    warn!("{url}: {e}; retrying in {wait} ms");
                    std::thread::sleep(Duration::from_millis(wait));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn post_once(&self, url: &str, key: &str, body: &Value) -> Result<Value, BackendError> {
        debug!("POST {url}");
        let resp = self
            .http
            .post(url)
            .bearer_auth(key)
            .json(body)
            .send()
            .map_err(|e| BackendError::Transport {
                message: e.to_string(),
                retryable: true,
            })?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| BackendError::Transport {
            message: e.to_string(),
            retryable: true,
        })?;
        if !(200..300).contains(&status) {
            return Err(BackendError::from_status(status, text));
        }
        serde_json::from_str(&text).map_err(|e| BackendError::MalformedBody(e.to_string()))
    }
}

impl TextGenerator for OpenAiClient {
    fn id(&self) -> String {
        format!("openai:{}", self.config.model)
    }

    fn complete(&self, req: &CompletionRequest) -> Result<Completion, BackendError> {
        let top_k = req.logprob_top_k.min(self.config.max_top_logprobs);
        match self.config.api {
            ApiFlavor::Completions => {
                let mut body = json!({
                    "model": self.config.model,
                    "prompt": req.prompt,
                    "max_tokens": req.max_tokens,
                    "temperature": req.temperature,
                });
                if top_k > 0 {
                    body["logprobs"] = json!(top_k);
                }
                parse_completions_body(&self.post("completions", &body)?)
            }
            ApiFlavor::Chat => {
                let mut body = json!({
                    "model": self.config.model,
                    "messages": [{"role": "user", "content": req.prompt}],
                    "max_tokens": req.max_tokens,
                    "temperature": req.temperature,
                });
                if top_k > 0 {
                    body["logprobs"] = json!(true);
                    body["top_logprobs"] = json!(top_k);
                }
                parse_chat_body(&self.post("chat/completions", &body)?)
            }
        }
    }
}

impl Embedder for OpenAiClient {
    fn id(&self) -> String {
        format!("openai:{}", self.config.embedding_model)
    }

    fn dim(&self) -> usize {
        self.config.embedding_dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        if text.trim().is_empty() {
            return Err(BackendError::Precondition("cannot embed empty text".into()));
        }
        let body = json!({"model": self.config.embedding_model, "input": text});
        let v = parse_embedding_body(&self.post("embeddings", &body)?)?;
        if v.dim() != self.config.embedding_dim {
            return Err(BackendError::MalformedBody(format!(
                "embedding has dimension {}, configured {}",
                v.dim(),
                self.config.embedding_dim
            )));
        }
        Ok(v)
    }
}

fn malformed(what: &str) -> BackendError {
    BackendError::MalformedBody(format!("missing {what}"))
}

/// Reads `choices[0].text` and the legacy `top_logprobs` list of maps.
pub fn parse_completions_body(body: &Value) -> Result<Completion, BackendError> {
    let choice = body.pointer("/choices/0").ok_or_else(|| malformed("choices[0]"))?;
    let text = choice
        .get("text")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed("choices[0].text"))?
        .to_string();
    let mut logprobs = Vec::new();
    if let Some(tops) = choice.pointer("/logprobs/top_logprobs").and_then(Value::as_array) {
        for pos in tops {
            let map = pos.as_object().ok_or_else(|| malformed("top_logprobs map"))?;
            let mut alts: Vec<TopLogprob> = map
                .iter()
                .map(|(tok, lp)| {
                    lp.as_f64()
                        .map(|lp| TopLogprob::new(tok.clone(), lp))
                        .ok_or_else(|| malformed("numeric logprob"))
                })
                .collect::<Result<_, _>>()?;
            alts.sort_by(|a, b| b.logprob.total_cmp(&a.logprob).then_with(|| a.token.cmp(&b.token)));
            logprobs.push(alts);
        }
    }
    Ok(Completion { text, logprobs })
}

/// Reads `choices[0].message.content` and `logprobs.content[*].top_logprobs`.
pub fn parse_chat_body(body: &Value) -> Result<Completion, BackendError> {
    let choice = body.pointer("/choices/0").ok_or_else(|| malformed("choices[0]"))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed("choices[0].message.content"))?
        .to_string();
    let mut logprobs = Vec::new();
    if let Some(content) = choice.pointer("/logprobs/content").and_then(Value::as_array) {
        for pos in content {
            let tops = pos
                .get("top_logprobs")
                .and_then(Value::as_array)
                .ok_or_else(|| malformed("top_logprobs"))?;
            let alts = tops
                .iter()
                .map(|t| {
                    let token = t.get("token").and_then(Value::as_str).ok_or_else(|| malformed("token"))?;
                    let lp = t.get("logprob").and_then(Value::as_f64).ok_or_else(|| malformed("logprob"))?;
                    Ok(TopLogprob::new(token, lp))
                })
                .collect::<Result<Vec<_>, BackendError>>()?;
            logprobs.push(alts);
        }
    }
    Ok(Completion { text, logprobs })
}

pub fn parse_embedding_body(body: &Value) -> Result<EmbeddingVector, BackendError> {
    let arr = body
        .pointer("/data/0/embedding")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("data[0].embedding"))?;
    let values = arr
        .iter()
        .map(|v| v.as_f64().ok_or_else(|| malformed("numeric embedding entry")))
        .collect::<Result<Vec<_>, _>>()?;
    EmbeddingVector::new(values)
}
