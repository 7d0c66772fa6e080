//! HTTP backends for completion, retrieval, and relevance scoring.
//!
//! All three speak single-POST JSON protocols:
//!
//! - completion: `{"prompt", "n", "temperature", "max_tokens", "stop", "seed"}`
//!   -> `{"choices": [{"text": ...}, ...]}`
//! - retrieval:  `{"query", "k"}` -> `{"hits": [{"chunk_id", "text", "score"}, ...]}`
//! - scoring:    `{"premise", "hypothesis"}` -> `{"score": ...}`
//!
//! Transport and 5xx failures are retried with exponential backoff (3
//! attempts, starting at 1s); 4xx responses and malformed bodies are typed
//! protocol errors and never retried.

use std::time::Duration;

use serde::Deserialize;

use crate::error::{Error, Result};

use super::{CompletionBackend, CompletionRequest, RelevanceScorer, RetrievalBackend, RetrievalHit};

pub const ENV_LM_ENDPOINT: &str = "UNIKNOW_LM_ENDPOINT";
pub const ENV_LM_TOKEN: &str = "UNIKNOW_LM_TOKEN";

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

enum Attempt {
    Done(serde_json::Value),
    /// Transport failure or 5xx: retryable.
    Transient(String),
}

fn post_json(
    client: &reqwest::blocking::Client,
    url: &str,
    token: Option<&str>,
    body: &serde_json::Value,
    retry: &RetryPolicy,
) -> Result<serde_json::Value> {
    let mut last_message = String::new();
    for attempt in 0..retry.attempts {
        if attempt > 0 {
            std::thread::sleep(retry.base_delay * 2u32.pow(attempt - 1));
        }
        match post_once(client, url, token, body)? {
            Attempt::Done(value) => return Ok(value),
            Attempt::Transient(msg) => last_message = msg,
        }
    }
    Err(Error::Transport {
        attempts: retry.attempts,
        message: last_message,
    })
}

fn post_once(
    client: &reqwest::blocking::Client,
    url: &str,
    token: Option<&str>,
    body: &serde_json::Value,
) -> Result<Attempt> {
    let mut req = client.post(url).json(body);
    if let Some(token) = token {
        req = req.bearer_auth(token);
    }
    let resp = match req.send() {
        Ok(resp) => resp,
        Err(e) => return Ok(Attempt::Transient(e.to_string())),
    };
    let status = resp.status();
    if status.is_server_error() {
        return Ok(Attempt::Transient(format!("server returned {status}")));
    }
    if !status.is_success() {
        return Err(Error::Protocol(format!("endpoint returned {status}")));
    }
    let value: serde_json::Value = resp
        .json()
        .map_err(|e| Error::Protocol(format!("response body is not JSON: {e}")))?;
    Ok(Attempt::Done(value))
}

// ---------------------------------------------------------------------------
// Completion
// ---------------------------------------------------------------------------

pub struct HttpCompletionBackend {
    id: String,
    url: String,
    token: Option<String>,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
}

impl HttpCompletionBackend {
    pub fn new(id: impl Into<String>, url: impl Into<String>, token: Option<String>) -> Self {
        HttpCompletionBackend {
            id: id.into(),
            url: url.into(),
            token,
            client: reqwest::blocking::Client::new(),
            retry: RetryPolicy::default(),
        }
    }

    /// Endpoint and bearer token from `UNIKNOW_LM_ENDPOINT` / `UNIKNOW_LM_TOKEN`.
    pub fn from_env(id: impl Into<String>) -> Result<Self> {
        let url = std::env::var(ENV_LM_ENDPOINT).map_err(|_| {
            Error::Validation(format!("{ENV_LM_ENDPOINT} is not set but an HTTP backend was requested"))
        })?;
        let token = std::env::var(ENV_LM_TOKEN).ok();
        Ok(Self::new(id, url, token))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }
}

#[derive(Deserialize)]
struct Choice {
    text: String,
}

#[derive(Deserialize)]
struct CompletionBody {
    choices: Vec<Choice>,
}

impl CompletionBackend for HttpCompletionBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete_raw(&self, req: &CompletionRequest) -> Result<Vec<String>> {
        let body = serde_json::json!({
            "prompt": req.prompt,
            "n": req.n_samples,
            "temperature": req.temperature,
            "max_tokens": req.max_new_tokens,
            "stop": req.stop_sequences,
            "seed": req.seed,
        });
        let value = post_json(&self.client, &self.url, self.token.as_deref(), &body, &self.retry)?;
        let parsed: CompletionBody = serde_json::from_value(value)
            .map_err(|e| Error::Protocol(format!("completion body malformed: {e}")))?;
        Ok(parsed.choices.into_iter().map(|c| c.text).collect())
    }
}

// ---------------------------------------------------------------------------
// Retrieval
// ---------------------------------------------------------------------------

pub struct HttpRetrievalBackend {
    id: String,
    url: String,
    token: Option<String>,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
}

impl HttpRetrievalBackend {
    pub fn new(id: impl Into<String>, url: impl Into<String>, token: Option<String>) -> Self {
        HttpRetrievalBackend {
            id: id.into(),
            url: url.into(),
            token,
            client: reqwest::blocking::Client::new(),
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Deserialize)]
struct WireHit {
    chunk_id: String,
    text: String,
    score: f64,
}

#[derive(Deserialize)]
struct RetrievalBody {
    hits: Vec<WireHit>,
}

impl RetrievalBackend for HttpRetrievalBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<RetrievalHit>> {
        if k == 0 {
            return Err(Error::Validation("retrieval k must be >= 1".into()));
        }
        let body = serde_json::json!({"query": query, "k": k});
        let value = post_json(&self.client, &self.url, self.token.as_deref(), &body, &self.retry)?;
        let parsed: RetrievalBody = serde_json::from_value(value)
            .map_err(|e| Error::Protocol(format!("retrieval body malformed: {e}")))?;
        Ok(parsed
            .hits
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(i, h)| RetrievalHit {
                chunk_id: h.chunk_id,
                text: h.text,
                score: h.score,
                rank: i + 1,
            })
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Relevance scoring
// ---------------------------------------------------------------------------

pub struct HttpScoringBackend {
    id: String,
    url: String,
    token: Option<String>,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
}

impl HttpScoringBackend {
    pub fn new(id: impl Into<String>, url: impl Into<String>, token: Option<String>) -> Self {
        HttpScoringBackend {
            id: id.into(),
            url: url.into(),
            token,
            client: reqwest::blocking::Client::new(),
            retry: RetryPolicy::default(),
        }
    }
}

impl RelevanceScorer for HttpScoringBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn score(&self, premise: &str, hypothesis: &str) -> Result<f64> {
        if premise.is_empty() || hypothesis.is_empty() {
            return Err(Error::Validation(
                "relevance scoring requires non-empty premise and hypothesis".into(),
            ));
        }
        let body = serde_json::json!({"premise": premise, "hypothesis": hypothesis});
        let value = post_json(&self.client, &self.url, self.token.as_deref(), &body, &self.retry)
            .map_err(|e| Error::Scorer(e.to_string()))?;
        let score = value
            .get("score")
            .and_then(|s| s.as_f64())
            .ok_or_else(|| Error::Scorer("scoring body lacks numeric 'score'".into()))?;
        Ok(score.clamp(0.0, 1.0))
    }
}
