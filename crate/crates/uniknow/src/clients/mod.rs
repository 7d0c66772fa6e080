//! Uniform access to the three external capabilities the harness needs:
//! text completion, passage retrieval, and relevance scoring. Each capability
//! has a remote HTTP backend and a deterministic offline backend; completion
//! traffic is cached content-addressed so runs are resumable.

pub mod cache;
pub mod http;
pub mod index;
pub mod mock;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::normalize::token_overlap_f1;

pub use cache::{CacheKey, ResponseCache};
pub use index::LocalIndex;
pub use mock::{MockKnowledge, MockLm, MockPolicy};

pub const DEFAULT_PARALLELISM: usize = 8;

// ---------------------------------------------------------------------------
// Requests and hits
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub n_samples: u32,
    pub temperature: f64,
    pub max_new_tokens: u32,
    #[serde(default)]
    pub stop_sequences: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl CompletionRequest {
    pub fn greedy(prompt: impl Into<String>, max_new_tokens: u32) -> Self {
        CompletionRequest {
            prompt: prompt.into(),
            n_samples: 1,
            temperature: 0.0,
            max_new_tokens,
            stop_sequences: vec!["\n".into()],
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 1 {
            return Err(Error::Validation("n_samples must be >= 1".into()));
        }
        if self.temperature < 0.0 {
            return Err(Error::Validation("temperature must be non-negative".into()));
        }
        if self.temperature == 0.0 && self.n_samples != 1 {
            return Err(Error::Validation(
                "greedy decoding (temperature = 0) is single-sample; set n_samples = 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub chunk_id: String,
    pub text: String,
    pub score: f64,
    /// 1-based, contiguous; scores are non-increasing with rank.
    pub rank: usize,
}

// ---------------------------------------------------------------------------
// Backend traits
// ---------------------------------------------------------------------------

/// Raw completion transport. Implementations must be pure given (request,
/// their own configuration) or genuinely remote; truncation and caching live
/// in [`CompletionClient`].
pub trait CompletionBackend: Send + Sync {
    fn id(&self) -> &str;
    fn complete_raw(&self, req: &CompletionRequest) -> Result<Vec<String>>;
}

pub trait RetrievalBackend: Send + Sync {
    fn id(&self) -> &str;
    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<RetrievalHit>>;
}

pub trait RelevanceScorer: Send + Sync {
    fn id(&self) -> &str;
    /// Backend-defined score normalized to [0, 1].
    fn score(&self, premise: &str, hypothesis: &str) -> Result<f64>;
}

/// Offline fallback scorer: token-overlap F1 between hypothesis and premise.
#[derive(Debug, Clone, Default)]
pub struct LexicalScorer;

impl RelevanceScorer for LexicalScorer {
    fn id(&self) -> &str {
        "lexical-f1"
    }

    fn score(&self, premise: &str, hypothesis: &str) -> Result<f64> {
        if premise.is_empty() || hypothesis.is_empty() {
            return Err(Error::Validation(
                "relevance scoring requires non-empty premise and hypothesis".into(),
            ));
        }
        Ok(token_overlap_f1(premise, hypothesis))
    }
}

// ---------------------------------------------------------------------------
// In-flight gate
// ---------------------------------------------------------------------------

/// Bounds the number of concurrent transport calls.
#[derive(Debug)]
pub struct Gate {
    max: usize,
    in_flight: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    pub fn new(max: usize) -> Self {
        Gate {
            max: max.max(1),
            in_flight: Mutex::new(0),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> GateGuard<'_> {
        let mut count = self.in_flight.lock().unwrap();
        while *count >= self.max {
            count = self.cv.wait(count).unwrap();
        }
        *count += 1;
        GateGuard { gate: self }
    }
}

pub struct GateGuard<'a> {
    gate: &'a Gate,
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        let mut count = self.gate.in_flight.lock().unwrap();
        *count -= 1;
        self.gate.cv.notify_one();
    }
}

// ---------------------------------------------------------------------------
// Cached completion client
// ---------------------------------------------------------------------------

/// Cache-backed, concurrency-bounded completion client. All LM interaction in
/// the harness goes through this type.
pub struct CompletionClient {
    backend: Box<dyn CompletionBackend>,
    cache: ResponseCache,
    gate: Gate,
    backend_calls: AtomicU64,
}

impl CompletionClient {
    pub fn new(backend: Box<dyn CompletionBackend>, cache: ResponseCache, parallelism: usize) -> Self {
        CompletionClient {
            backend,
            cache,
            gate: Gate::new(parallelism),
            backend_calls: AtomicU64::new(0),
        }
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    /// Number of transport calls actually issued (cache misses).
    pub fn backend_calls(&self) -> u64 {
        self.backend_calls.load(Ordering::Relaxed)
    }

    /// Complete a request, serving from the cache when possible. Returns
    /// exactly `n_samples` texts, each truncated at its first stop sequence.
    pub fn complete(&self, req: &CompletionRequest) -> Result<Vec<String>> {
        req.validate()?;
        let payload = serde_json::to_value(req).expect("request serializes");
        let key = CacheKey::new(self.backend.id(), &payload);

        let raw: Vec<String> = match self.cache.get(&key)? {
            Some(value) => serde_json::from_value(
                value
                    .get("texts")
                    .cloned()
                    .ok_or_else(|| Error::Format("cache entry missing 'texts'".into()))?,
            )
            .map_err(|e| Error::Format(format!("corrupt cache entry: {e}")))?,
            None => {
                let texts = {
                    let _slot = self.gate.acquire();
                    let calls = &self.backend_calls;
                    calls.fetch_add(1, Ordering::Relaxed);
                    self.backend.complete_raw(req)?
                };
                self.cache
                    .put(&key, &serde_json::json!({ "texts": texts }))?;
                texts
            }
        };

        if raw.len() < req.n_samples as usize {
            return Err(Error::Protocol(format!(
                "backend {} returned {} texts for n_samples={}",
                self.backend.id(),
                raw.len(),
                req.n_samples
            )));
        }
        Ok(raw
            .into_iter()
            .take(req.n_samples as usize)
            .map(|t| truncate_at_stop(&t, &req.stop_sequences))
            .collect())
    }
}

fn truncate_at_stop(text: &str, stops: &[String]) -> String {
    let mut cut = text.len();
    for stop in stops {
        if stop.is_empty() {
            continue;
        }
        if let Some(pos) = text.find(stop.as_str()) {
            cut = cut.min(pos);
        }
    }
    text[..cut].to_string()
}
