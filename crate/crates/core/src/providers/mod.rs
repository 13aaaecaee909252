//! Provider clients: text embedding, text completion and output scoring.
//!
//! A [`Backend`] performs raw upstream calls. [`ProviderClient`] wraps one
//! with the content-addressed [`DiskCache`], retry with exponential backoff,
//! a per-client bound on in-flight requests, and call accounting.

mod cache;
mod http;
pub mod mock;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use cache::{CacheEntry, DiskCache};
pub use http::{HttpBackend, HttpModels};

#[derive(Debug, thiserror::Error)]
pub enum ProviderError {
    #[error("transport failure: {message}")]
    Transport { message: String, retryable: bool },
    #[error("provider refused the request: {0}")]
    Refusal(String),
    #[error("provider does not support {0}")]
    CapabilityUnsupported(Capability),
    #[error("embedding dimension mismatch for `{model_tag}`: expected {expected}, got {got}")]
    DimensionMismatch {
        model_tag: String,
        expected: usize,
        got: usize,
    },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("cache: {0}")]
    Cache(String),
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ProviderError::Transport { retryable: true, .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Capability {
    Embedding,
    Completion,
    Scoring,
}

impl Capability {
    pub fn as_str(self) -> &'static str {
        match self {
            Capability::Embedding => "embedding",
            Capability::Completion => "completion",
            Capability::Scoring => "scoring",
        }
    }
}

impl std::fmt::Display for Capability {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A dense text embedding tagged with the model that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
    model_tag: String,
}

impl EmbeddingVector {
    /// Fails on an empty or non-finite vector.
    pub fn new(values: Vec<f64>, model_tag: impl Into<String>) -> Result<Self, ProviderError> {
        if values.is_empty() {
            return Err(ProviderError::InvalidResponse("empty embedding".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(ProviderError::InvalidResponse(format!(
                "embedding component {i} is not finite"
            )));
        }
        Ok(Self {
            values,
            model_tag: model_tag.into(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn model_tag(&self) -> &str {
        &self.model_tag
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Log-probability of a target continuation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreResult {
    /// Sum of per-token log-probabilities, in nats.
    pub total_logprob: f64,
    pub token_count: usize,
    /// Set by mock scorers, whose values need not be true log-probabilities.
    #[serde(default)]
    pub mock: bool,
}

impl ScoreResult {
    pub fn per_token(&self) -> f64 {
        self.total_logprob / self.token_count.max(1) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionOptions {
    pub max_tokens: u32,
    pub temperature: f64,
}

impl Default for CompletionOptions {
    fn default() -> Self {
        Self {
            max_tokens: 32,
            temperature: 0.0,
        }
    }
}

/// Raw upstream access. Every method defaults to `CapabilityUnsupported`.
pub trait Backend: Send + Sync {
    /// Model identifier used in cache keys and embedding tags.
    fn model_tag(&self, capability: Capability) -> String;

    /// Mock backends make latency and score provenance deterministic.
    fn is_mock(&self) -> bool {
        false
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        let _ = texts;
        Err(ProviderError::CapabilityUnsupported(Capability::Embedding))
    }

    fn complete(&self, prompt: &str, options: &CompletionOptions) -> Result<String, ProviderError> {
        let _ = (prompt, options);
        Err(ProviderError::CapabilityUnsupported(Capability::Completion))
    }

    fn score(&self, prefix: &str, target: &str) -> Result<ScoreResult, ProviderError> {
        let _ = (prefix, target);
        Err(ProviderError::CapabilityUnsupported(Capability::Scoring))
    }
}

/// Routes each capability to its own backend.
pub struct RoutedBackend {
    pub embedding: Arc<dyn Backend>,
    pub completion: Arc<dyn Backend>,
    pub scoring: Arc<dyn Backend>,
}

impl RoutedBackend {
    fn route(&self, capability: Capability) -> &Arc<dyn Backend> {
        match capability {
            Capability::Embedding => &self.embedding,
            Capability::Completion => &self.completion,
            Capability::Scoring => &self.scoring,
        }
    }
}

impl Backend for RoutedBackend {
    fn model_tag(&self, capability: Capability) -> String {
        self.route(capability).model_tag(capability)
    }

    fn is_mock(&self) -> bool {
        self.embedding.is_mock() && self.completion.is_mock() && self.scoring.is_mock()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        self.embedding.embed(texts)
    }

    fn complete(&self, prompt: &str, options: &CompletionOptions) -> Result<String, ProviderError> {
        self.completion.complete(prompt, options)
    }

    fn score(&self, prefix: &str, target: &str) -> Result<ScoreResult, ProviderError> {
        self.scoring.score(prefix, target)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based): `base * 2^(retry-1)`, capped.
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u64.checked_shl(retry.saturating_sub(1)).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

/// Connection and client settings for one provider.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub base_url: String,
    pub embedding_model: String,
    pub completion_model: String,
    pub scoring_model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub max_parallel: usize,
    pub retry: RetryPolicy,
    /// Defaults to `<output_dir>/cache` when unset.
    pub cache_dir: Option<PathBuf>,
    pub timeout_secs: u64,
    pub embed_batch_size: usize,
    /// Divide scoring log-probabilities by token count.
    pub length_normalized_scores: bool,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            embedding_model: "text-embedding-ada-002".into(),
            completion_model: "gpt-4".into(),
            scoring_model: "gpt-neo-2.7B".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            max_parallel: 4,
            retry: RetryPolicy::default(),
            cache_dir: None,
            timeout_secs: 60,
            embed_batch_size: 64,
            length_normalized_scores: false,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.max_parallel == 0 {
            return Err(ProviderError::InvalidRequest("max_parallel must be >= 1".into()));
        }
        if self.retry.max_attempts == 0 {
            return Err(ProviderError::InvalidRequest("retry.max_attempts must be >= 1".into()));
        }
        if self.embed_batch_size == 0 {
            return Err(ProviderError::InvalidRequest("embed_batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Counting semaphore bounding concurrent upstream requests.
struct Limiter {
    permits: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(n: usize) -> Self {
        Self {
            permits: Mutex::new(n),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.permits.lock().expect("limiter poisoned");
        while *free == 0 {
            free = self.freed.wait(free).expect("limiter poisoned");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut free = self.0.permits.lock().expect("limiter poisoned");
        *free += 1;
        self.0.freed.notify_one();
    }
}

/// Snapshot of client call counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CallStats {
    /// Upstream attempts, retries included.
    pub upstream_calls: usize,
    pub cache_hits: usize,
    pub retries: usize,
}

#[derive(Default)]
struct Counters {
    upstream: AtomicUsize,
    hits: AtomicUsize,
    retries: AtomicUsize,
}

/// Shareable client: cache, retry, bounded parallelism over a [`Backend`].
pub struct ProviderClient {
    backend: Arc<dyn Backend>,
    cache: Option<DiskCache>,
    retry: RetryPolicy,
    limiter: Limiter,
    embed_batch_size: usize,
    length_normalized: bool,
    counters: Counters,
    dims: Mutex<HashMap<String, usize>>,
}

impl ProviderClient {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self::with_config(backend, &ProviderConfig::default(), None)
    }

    pub fn with_config(
        backend: Arc<dyn Backend>,
        config: &ProviderConfig,
        cache: Option<DiskCache>,
    ) -> Self {
        Self {
            backend,
            cache,
            retry: config.retry.clone(),
            limiter: Limiter::new(config.max_parallel.max(1)),
            embed_batch_size: config.embed_batch_size.max(1),
            length_normalized: config.length_normalized_scores,
            counters: Counters::default(),
            dims: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_cache(mut self, cache: DiskCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_max_parallel(mut self, n: usize) -> Self {
        self.limiter = Limiter::new(n.max(1));
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn is_mock(&self) -> bool {
        self.backend.is_mock()
    }

    pub fn model_tag(&self, capability: Capability) -> String {
        self.backend.model_tag(capability)
    }

    pub fn stats(&self) -> CallStats {
        CallStats {
            upstream_calls: self.counters.upstream.load(Ordering::SeqCst),
            cache_hits: self.counters.hits.load(Ordering::SeqCst),
            retries: self.counters.retries.load(Ordering::SeqCst),
        }
    }

    /// Runs `call` under the concurrency bound, retrying transient failures.
    fn upstream<T>(
        &self,
        mut call: impl FnMut() -> Result<T, ProviderError>,
    ) -> Result<T, ProviderError> {
        let mut attempt = 1;
        loop {
            let result = {
                let _permit = self.limiter.acquire();
                self.counters.upstream.fetch_add(1, Ordering::SeqCst);
                call()
            };
            match result {
                Err(e) if e.is_retryable() && attempt < self.retry.max_attempts => {
                    let delay = self.retry.delay(attempt);
                    tracing::warn!(attempt, ?delay, error = %e, "retrying provider request");
                    self.counters.retries.fetch_add(1, Ordering::SeqCst);
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn cached(&self, capability: Capability, request: &Value) -> Option<Value> {
        let hit = self.cache.as_ref()?.get(capability, request)?;
        self.counters.hits.fetch_add(1, Ordering::SeqCst);
        Some(hit)
    }

    fn store(&self, capability: Capability, request: &Value, response: &Value) -> Result<(), ProviderError> {
        match &self.cache {
            Some(cache) => cache.put(capability, request, response),
            None => Ok(()),
        }
    }

    fn check_dim(&self, tag: &str, got: usize) -> Result<(), ProviderError> {
        let mut dims = self.dims.lock().expect("dims poisoned");
        let expected = *dims.entry(tag.to_string()).or_insert(got);
        if expected != got {
            return Err(ProviderError::DimensionMismatch {
                model_tag: tag.to_string(),
                expected,
                got,
            });
        }
        Ok(())
    }

    /// Embeds `texts`, one vector per input in the same order.
    ///
    /// Each text is cached separately, so a batch with partial hits only
    /// sends the misses upstream, and duplicates within a batch are sent once.
    pub fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        if texts.is_empty() {
            return Err(ProviderError::InvalidRequest("empty embedding batch".into()));
        }
        if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(ProviderError::InvalidRequest(format!("text {i} is empty")));
        }
        let tag = self.model_tag(Capability::Embedding);
        let request = |text: &str| json!({ "model": tag, "input": text });

        let mut out: Vec<Option<Vec<f64>>> = vec![None; texts.len()];
        let mut pending: Vec<&str> = Vec::new();
        let mut waiting: HashMap<&str, Vec<usize>> = HashMap::new();
        for (i, text) in texts.iter().enumerate() {
            if let Some(waiters) = waiting.get_mut(text.as_str()) {
                waiters.push(i);
                continue;
            }
            match self.cached(Capability::Embedding, &request(text)) {
                Some(hit) => out[i] = Some(parse_cached_embedding(&hit)?),
                None => {
                    waiting.insert(text, vec![i]);
                    pending.push(text);
                }
            }
        }

        for chunk in pending.chunks(self.embed_batch_size) {
            let owned: Vec<String> = chunk.iter().map(|s| s.to_string()).collect();
            let vectors = self.upstream(|| self.backend.embed(&owned))?;
            if vectors.len() != chunk.len() {
                return Err(ProviderError::InvalidResponse(format!(
                    "{} embeddings for {} inputs",
                    vectors.len(),
                    chunk.len()
                )));
            }
            for (text, values) in chunk.iter().zip(vectors) {
                let checked = EmbeddingVector::new(values, tag.clone())?;
                self.check_dim(&tag, checked.dim())?;
                self.store(
                    Capability::Embedding,
                    &request(text),
                    &json!({ "embedding": checked.values() }),
                )?;
                let values = checked.into_values();
                for &i in &waiting[text] {
                    out[i] = Some(values.clone());
                }
            }
        }

        out.into_iter()
            .map(|v| {
                let values = v.expect("every slot filled");
                self.check_dim(&tag, values.len())?;
                EmbeddingVector::new(values, tag.clone())
            })
            .collect()
    }

    /// Completes `prompt`. Only temperature-0 completions are cached.
    pub fn complete(&self, prompt: &str, options: &CompletionOptions) -> Result<String, ProviderError> {
        if prompt.is_empty() {
            return Err(ProviderError::InvalidRequest("empty prompt".into()));
        }
        if !(options.temperature >= 0.0) {
            return Err(ProviderError::InvalidRequest("temperature must be >= 0".into()));
        }
        let request = json!({
            "model": self.model_tag(Capability::Completion),
            "prompt": prompt,
            "temperature": options.temperature,
            "max_tokens": options.max_tokens,
        });
        let cacheable = options.temperature == 0.0;
        if cacheable {
            if let Some(hit) = self.cached(Capability::Completion, &request) {
                return hit
                    .get("text")
                    .and_then(Value::as_str)
                    .map(str::to_string)
                    .ok_or_else(|| ProviderError::Cache("completion entry lacks `text`".into()));
            }
        }
        let text = self.upstream(|| self.backend.complete(prompt, options))?;
        if cacheable {
            self.store(Capability::Completion, &request, &json!({ "text": text }))?;
        }
        Ok(text)
    }

    /// Log-probability of `target` following `prefix`.
    pub fn score_output(&self, prefix: &str, target: &str) -> Result<ScoreResult, ProviderError> {
        if prefix.is_empty() || target.is_empty() {
            return Err(ProviderError::InvalidRequest("prefix and target must be non-empty".into()));
        }
        let request = json!({
            "model": self.model_tag(Capability::Scoring),
            "prompt": prefix,
            "target": target,
        });
        if let Some(hit) = self.cached(Capability::Scoring, &request) {
            return serde_json::from_value(hit).map_err(|e| ProviderError::Cache(e.to_string()));
        }
        let result = self.upstream(|| self.backend.score(prefix, target))?;
        if result.token_count == 0 || !result.total_logprob.is_finite() {
            return Err(ProviderError::InvalidResponse(format!("bad score {result:?}")));
        }
        self.store(
            Capability::Scoring,
            &request,
            &serde_json::to_value(result).expect("score serializes"),
        )?;
        Ok(result)
    }

    /// Scalar score under the client's configured mode.
    pub fn scalar_score(&self, result: &ScoreResult) -> f64 {
        if self.length_normalized {
            result.per_token()
        } else {
            result.total_logprob
        }
    }
}

fn parse_cached_embedding(v: &Value) -> Result<Vec<f64>, ProviderError> {
    v.get("embedding")
        .and_then(Value::as_array)
        .ok_or_else(|| ProviderError::Cache("embedding entry lacks `embedding`".into()))?
        .iter()
        .map(|x| {
            x.as_f64()
                .ok_or_else(|| ProviderError::Cache("non-numeric embedding component".into()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::mock::{HashEmbedder, ScriptedCompleter};
    use super::*;
    use std::sync::atomic::AtomicBool;

    struct Flaky {
        fail_first: AtomicUsize,
        calls: AtomicUsize,
    }

    impl Backend for Flaky {
        fn model_tag(&self, _: Capability) -> String {
            "flaky".into()
        }

        fn complete(&self, _: &str, _: &CompletionOptions) -> Result<String, ProviderError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if self.fail_first.load(Ordering::SeqCst) > 0 {
                self.fail_first.fetch_sub(1, Ordering::SeqCst);
                return Err(ProviderError::Transport {
                    message: "503".into(),
                    retryable: true,
                });
            }
            Ok("ok".into())
        }
    }

    fn fast_retry(max_attempts: u32) -> RetryPolicy {
        RetryPolicy {
            max_attempts,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    #[test]
    fn retries_transient_failures() {
        let backend = Arc::new(Flaky {
            fail_first: AtomicUsize::new(2),
            calls: AtomicUsize::new(0),
        });
        let client = ProviderClient::new(backend.clone()).with_retry(fast_retry(3));
        assert_eq!(client.complete("p", &CompletionOptions::default()).unwrap(), "ok");
        assert_eq!(backend.calls.load(Ordering::SeqCst), 3);
        assert_eq!(client.stats().retries, 2);

        backend.fail_first.store(5, Ordering::SeqCst);
        let client = ProviderClient::new(backend.clone()).with_retry(fast_retry(2));
        let err = client.complete("p", &CompletionOptions::default()).unwrap_err();
        assert!(err.is_retryable());
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy {
            max_attempts: 5,
            base_delay_ms: 100,
            max_delay_ms: 350,
        };
        assert_eq!(p.delay(1), Duration::from_millis(100));
        assert_eq!(p.delay(2), Duration::from_millis(200));
        assert_eq!(p.delay(3), Duration::from_millis(350));
        assert_eq!(p.delay(80), Duration::from_millis(350));
    }

    #[test]
    fn refusal_is_not_retried() {
        struct Refuser(AtomicBool);
        impl Backend for Refuser {
            fn model_tag(&self, _: Capability) -> String {
                "r".into()
            }
            fn complete(&self, _: &str, _: &CompletionOptions) -> Result<String, ProviderError> {
                assert!(!self.0.swap(true, Ordering::SeqCst), "called twice");
                Err(ProviderError::Refusal("policy".into()))
            }
        }
        let client = ProviderClient::new(Arc::new(Refuser(AtomicBool::new(false))));
        let err = client.complete("p", &CompletionOptions::default()).unwrap_err();
        assert!(matches!(err, ProviderError::Refusal(_)));
    }

    #[test]
    fn missing_capability_is_reported() {
        let client = ProviderClient::new(Arc::new(ScriptedCompleter::new("x")));
        let err = client.score_output("a", "b").unwrap_err();
        assert!(matches!(err, ProviderError::CapabilityUnsupported(Capability::Scoring)));
    }

    #[test]
    fn embed_rejects_empty_inputs() {
        let client = ProviderClient::new(Arc::new(HashEmbedder::new(8, 0)));
        assert!(client.embed_batch(&[]).is_err());
        assert!(client.embed_batch(&["ok".into(), "  ".into()]).is_err());
    }

    #[test]
    fn dimension_changes_are_rejected() {
        struct Shifty(AtomicUsize);
        impl Backend for Shifty {
            fn model_tag(&self, _: Capability) -> String {
                "shifty".into()
            }
            fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
                let dim = 3 + self.0.fetch_add(1, Ordering::SeqCst);
                Ok(texts.iter().map(|_| vec![1.0; dim]).collect())
            }
        }
        let client = ProviderClient::new(Arc::new(Shifty(AtomicUsize::new(0))));
        client.embed_batch(&["a".into()]).unwrap();
        let err = client.embed_batch(&["b".into()]).unwrap_err();
        assert!(matches!(err, ProviderError::DimensionMismatch { expected: 3, got: 4, .. }));
    }

    #[test]
    fn duplicate_texts_in_a_batch_are_sent_once() {
        let embedder = Arc::new(HashEmbedder::new(16, 1));
        let client = ProviderClient::new(embedder.clone());
        let out = client
            .embed_batch(&["x".into(), "y".into(), "x".into()])
            .unwrap();
        assert_eq!(out[0], out[2]);
        assert_ne!(out[0], out[1]);
        assert_eq!(embedder.texts_seen(), 2);
    }
}
