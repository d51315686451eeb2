//! Blocking client for OpenAI-compatible chat-completions and embeddings
//! endpoints.

use std::time::Duration;

use serde_json::{json, Value};

use super::{DecodingParams, EmbeddingSpec, ModelOutput, ModelSpec};
use crate::error::{Error, Result};

/// Retries apply to transport failures, HTTP 5xx and HTTP 429 only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { attempts: 3, base_delay: Duration::from_millis(500), max_delay: Duration::from_secs(8) }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        self.base_delay.saturating_mul(1 << attempt.min(16)).min(self.max_delay)
    }
}

#[derive(Debug, Clone)]
pub struct OpenAiClient {
    http: reqwest::blocking::Client,
    retry: RetryPolicy,
}

enum Attempt {
    Done(Value),
    Retry(String),
}

impl OpenAiClient {
    pub fn new(retry: RetryPolicy, timeout: Duration) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(OpenAiClient { http, retry })
    }

    fn api_key(env: Option<&str>) -> Option<String> {
        env.and_then(|name| std::env::var(name).ok()).filter(|k| !k.is_empty())
    }

    fn post(&self, url: &str, key: Option<&str>, body: &Value) -> Result<Value> {
        let mut last = String::new();
        for attempt in 0..self.retry.attempts.max(1) {
            if attempt > 0 {
                std::thread::sleep(self.retry.delay(attempt - 1));
            }
            match self.attempt(url, key, body)? {
                Attempt::Done(v) => return Ok(v),
                Attempt::Retry(msg) => {
                    log::warn!("{url}: attempt {} failed: {msg}", attempt + 1);
                    last = msg;
                }
            }
        }
        Err(Error::Transport { attempts: self.retry.attempts.max(1), message: last })
    }

    fn attempt(&self, url: &str, key: Option<&str>, body: &Value) -> Result<Attempt> {
        let mut req = self.http.post(url).json(body);
        if let Some(k) = key {
            req = req.bearer_auth(k);
        }
        let resp = match req.send() {
            Ok(r) => r,
            Err(e) => return Ok(Attempt::Retry(e.to_string())),
        };
        let status = resp.status().as_u16();
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) => return Ok(Attempt::Retry(e.to_string())),
        };
        match status {
            200..=299 => serde_json::from_str(&text)
                .map(Attempt::Done)
                .map_err(|e| Error::Protocol(format!("invalid JSON body: {e}"))),
            401 | 403 => Err(Error::Auth(status)),
            429 | 500..=599 => Ok(Attempt::Retry(format!("HTTP {status}: {}", truncate(&text)))),
            _ => Err(Error::Protocol(format!("HTTP {status}: {}", truncate(&text)))),
        }
    }

    /// One chat completion for a single user message.
    pub fn chat(&self, spec: &ModelSpec, prompt: &str, params: &DecodingParams) -> Result<ModelOutput> {
        let url = format!("{}/chat/completions", spec.endpoint.trim_end_matches('/'));
        let mut body = json!({
            "model": spec.api_model.as_deref().unwrap_or(&spec.model_id),
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
            "n": 1,
        });
        let want_logprobs = params.logprobs && spec.supports_logprobs;
        if want_logprobs {
            body["logprobs"] = json!(true);
        }
        let key = Self::api_key(spec.api_key_env.as_deref());
        let value = self.post(&url, key.as_deref(), &body)?;
        parse_chat(&value, want_logprobs)
    }

    /// Embeds `inputs` in order.
    pub fn embed(&self, spec: &EmbeddingSpec, inputs: &[&str]) -> Result<Vec<Vec<f64>>> {
        let url = format!("{}/embeddings", spec.endpoint.trim_end_matches('/'));
        let body = json!({"model": spec.api_model, "input": inputs});
        let key = Self::api_key(spec.api_key_env.as_deref());
        let value = self.post(&url, key.as_deref(), &body)?;
        parse_embeddings(&value, inputs.len())
    }
}

fn truncate(s: &str) -> &str {
    match s.char_indices().nth(200) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

pub fn parse_chat(value: &Value, want_logprobs: bool) -> Result<ModelOutput> {
    let choice = value
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| Error::Protocol("response has no choices".into()))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Protocol("choice has no message content".into()))?
        .to_string();
    let prob = if want_logprobs {
        choice.pointer("/logprobs/content/0/logprob").and_then(Value::as_f64).map(|lp| lp.exp().clamp(0.0, 1.0))
    } else {
        None
    };
    let usage = |field: &str| value.pointer(&format!("/usage/{field}")).and_then(Value::as_u64);
    let (tokens_in, tokens_out) = match (usage("prompt_tokens"), usage("completion_tokens")) {
        (Some(i), Some(o)) => (i, o),
        _ => {
            log::warn!("response carries no token usage; counting 0");
            (0, 0)
        }
    };
    Ok(ModelOutput { text, label: None, prob, tokens_in, tokens_out })
}

pub fn parse_embeddings(value: &Value, expected: usize) -> Result<Vec<Vec<f64>>> {
    let data = value.get("data").and_then(Value::as_array).ok_or_else(|| Error::Protocol("no embedding data".into()))?;
    if data.len() != expected {
        return Err(Error::Protocol(format!("expected {expected} embeddings, got {}", data.len())));
    }
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::with_capacity(expected);
    for (pos, item) in data.iter().enumerate() {
        let index = item.get("index").and_then(Value::as_u64).map_or(pos, |i| i as usize);
        let emb = item
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Protocol("embedding item without vector".into()))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| Error::Protocol("non-numeric embedding".into())))
            .collect::<Result<Vec<f64>>>()?;
        rows.push((index, emb));
    }
    rows.sort_by_key(|(i, _)| *i);
    Ok(rows.into_iter().map(|(_, e)| e).collect())
}
