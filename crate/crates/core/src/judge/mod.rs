//! Pluggable multimodal judge: request/response types, a content-addressed
//! response cache, retry with backoff, and an in-flight limit per backend.

mod backends;
mod cache;
mod http;

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use chrono::Utc;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::model::ImageRef;

pub use backends::{MockBackend, ReplayBackend};
pub use cache::{CacheEntry, DiskCache, ReplayRecord};
pub use http::{HttpChatBackend, ImageTransport};
pub(crate) use http::mime_for;

/// Upper bound on a single backoff sleep.
const MAX_BACKOFF: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, PartialEq)]
pub struct JudgeRequest {
    pub judge_id: String,
    pub prompt: String,
    /// Order is significant: scoring sends `[source, edited]`.
    pub images: Vec<ImageRef>,
    pub max_tokens: u32,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AttemptRecord {
    pub attempt: u32,
    /// `None` on success.
    pub error: Option<String>,
    pub backoff_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JudgeResponse {
    pub raw_text: String,
    pub latency_ms: u64,
    pub from_cache: bool,
    /// Empty for cache hits.
    pub attempts: Vec<AttemptRecord>,
}

/// Failure reported by a backend for one attempt.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    /// Timeouts, 5xx and 429: worth retrying.
    #[error("transient: {message}")]
    Transient { message: String, retry_after: Option<Duration> },
    #[error("{0}")]
    Fatal(String),
    #[error("no recorded response for key {0}")]
    CacheMiss(String),
}

impl BackendError {
    pub fn transient(message: impl Into<String>) -> Self {
        Self::Transient { message: message.into(), retry_after: None }
    }
}

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("judge configuration: {0}")]
    Config(String),
    #[error("judge input: {0}")]
    Input(String),
    #[error("judge transport failed after {} attempt(s): {last}", attempts.len())]
    Transport { last: String, attempts: Vec<AttemptRecord> },
    #[error("replay backend has no response for key {0}")]
    ReplayMiss(String),
    #[error("cache i/o: {0}")]
    Cache(#[from] std::io::Error),
}

#[async_trait]
pub trait JudgeBackend: Send + Sync {
    /// Performs one attempt. Retrying and caching are the client's job.
    async fn complete(&self, request: &JudgeRequest, key: &CacheKey) -> Result<String, BackendError>;
}

/// SHA-256 over the request fields that determine a response.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey(String);

impl CacheKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn from_hex(hex: &str) -> Option<Self> {
        (hex.len() == 64 && hex.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase()))
            .then(|| Self(hex.to_string()))
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Fields are length-prefixed so distinct requests can never serialize to the same byte stream.
pub fn cache_key(request: &JudgeRequest, model_name: &str) -> CacheKey {
    let mut h = Sha256::new();
    let mut field = |bytes: &[u8]| {
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    };
    field(request.judge_id.as_bytes());
    field(model_name.as_bytes());
    field(request.prompt.as_bytes());
    field(&(request.images.len() as u64).to_le_bytes());
    for img in &request.images {
        field(img.sha256.as_bytes());
    }
    field(&request.max_tokens.to_le_bytes());
    field(&request.temperature.to_bits().to_le_bytes());
    CacheKey(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    HttpChat,
    Mock,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 4, base_backoff_ms: 500 }
    }
}

impl RetryPolicy {
    fn backoff(&self, attempt: u32, hint: Option<Duration>) -> Duration {
        if let Some(hint) = hint {
            return hint.min(MAX_BACKOFF);
        }
        let exp = self.base_backoff_ms.saturating_mul(1u64 << (attempt - 1).min(20));
        let jitter = if self.base_backoff_ms > 0 { rand::rng().random_range(0..self.base_backoff_ms) } else { 0 };
        Duration::from_millis(exp.saturating_add(jitter)).min(MAX_BACKOFF)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Defaults to `model_name`.
    #[serde(default)]
    pub judge_id: Option<String>,
    #[serde(default)]
    pub endpoint: Option<String>,
    pub model_name: String,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_concurrency")]
    pub concurrency_limit: usize,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// `base64` (data URLs) or a URL prefix to which image file names are appended.
    #[serde(default)]
    pub image_transport: ImageTransport,
    /// Replay backend input.
    #[serde(default)]
    pub replay_file: Option<PathBuf>,
    /// Fixed reply of the `mock` backend.
    #[serde(default)]
    pub mock_reply: Option<String>,
}

fn default_concurrency() -> usize {
    4
}
fn default_max_tokens() -> u32 {
    512
}
fn default_timeout_ms() -> u64 {
    120_000
}

impl BackendConfig {
    pub fn mock(model_name: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::Mock,
            judge_id: None,
            endpoint: None,
            model_name: model_name.into(),
            api_key_env: None,
            retry: RetryPolicy::default(),
            concurrency_limit: default_concurrency(),
            max_tokens: default_max_tokens(),
            temperature: 0.0,
            timeout_ms: default_timeout_ms(),
            image_transport: ImageTransport::default(),
            replay_file: None,
            mock_reply: None,
        }
    }

    pub fn judge_id(&self) -> &str {
        self.judge_id.as_deref().unwrap_or(&self.model_name)
    }

    pub fn validate(&self) -> Result<(), JudgeError> {
        if self.concurrency_limit < 1 {
            return Err(JudgeError::Config("concurrency_limit must be at least 1".into()));
        }
        if self.retry.max_attempts < 1 {
            return Err(JudgeError::Config("retry.max_attempts must be at least 1".into()));
        }
        if self.max_tokens < 1 {
            return Err(JudgeError::Config("max_tokens must be positive".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(JudgeError::Config("temperature must be nonnegative".into()));
        }
        Ok(())
    }

    /// Resolves relative file paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        if let Some(p) = &self.replay_file {
            self.replay_file = Some(base.join(p));
        }
    }
}

/// A backend plus cache, retry policy and in-flight limit.
pub struct JudgeClient {
    backend: Arc<dyn JudgeBackend>,
    cache: Option<Arc<DiskCache>>,
    retry: RetryPolicy,
    permits: Arc<Semaphore>,
    judge_id: String,
    model_name: String,
    max_tokens: u32,
    temperature: f64,
    requests: AtomicU64,
}

impl fmt::Debug for JudgeClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("JudgeClient").field("judge_id", &self.judge_id).field("model_name", &self.model_name).finish()
    }
}

impl JudgeClient {
    pub fn new(backend: Arc<dyn JudgeBackend>, config: &BackendConfig, cache: Option<Arc<DiskCache>>) -> Result<Self, JudgeError> {
        config.validate()?;
        Ok(Self {
            backend,
            cache,
            retry: config.retry.clone(),
            permits: Arc::new(Semaphore::new(config.concurrency_limit)),
            judge_id: config.judge_id().to_string(),
            model_name: config.model_name.clone(),
            max_tokens: config.max_tokens,
            temperature: config.temperature,
            requests: AtomicU64::new(0),
        })
    }

    /// Builds the backend named by `config.kind`.
    pub fn from_config(config: &BackendConfig, cache: Option<Arc<DiskCache>>) -> Result<Self, JudgeError> {
        config.validate()?;
        let backend: Arc<dyn JudgeBackend> = match config.kind {
            BackendKind::HttpChat => Arc::new(HttpChatBackend::from_config(config)?),
            BackendKind::Mock => Arc::new(MockBackend::fixed(config.mock_reply.clone().unwrap_or_else(|| "Yes".into()))),
            BackendKind::Replay => {
                let path = config
                    .replay_file
                    .as_ref()
                    .ok_or_else(|| JudgeError::Config("replay backend needs replay_file".into()))?;
                Arc::new(ReplayBackend::load(path)?)
            }
        };
        Self::new(backend, config, cache)
    }

    pub fn judge_id(&self) -> &str {
        &self.judge_id
    }

    pub fn model_name(&self) -> &str {
        &self.model_name
    }

    /// Number of backend attempts made so far (cache hits excluded).
    pub fn request_count(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    /// A request carrying this client's judge id and decoding defaults.
    pub fn request(&self, prompt: impl Into<String>, images: Vec<ImageRef>) -> JudgeRequest {
        JudgeRequest {
            judge_id: self.judge_id.clone(),
            prompt: prompt.into(),
            images,
            max_tokens: self.max_tokens,
            temperature: self.temperature,
        }
    }

    pub fn cache_key(&self, request: &JudgeRequest) -> CacheKey {
        cache_key(request, &self.model_name)
    }

    pub async fn submit(&self, request: &JudgeRequest) -> Result<JudgeResponse, JudgeError> {
        for img in &request.images {
            std::fs::File::open(&img.path)
                .map_err(|e| JudgeError::Input(format!("unreadable image {}: {e}", img.path.display())))?;
        }
        let key = self.cache_key(request);
        let started = Instant::now();
        if let Some(entry) = self.cache.as_ref().and_then(|c| c.get(&key)) {
            return Ok(JudgeResponse {
                raw_text: entry.raw_text,
                latency_ms: started.elapsed().as_millis() as u64,
                from_cache: true,
                attempts: Vec::new(),
            });
        }

        let _permit = self.permits.acquire().await.expect("semaphore never closed");
        let mut attempts = Vec::new();
        let mut backoff_ms = 0;
        for attempt in 1..=self.retry.max_attempts {
            self.requests.fetch_add(1, Ordering::Relaxed);
            match self.backend.complete(request, &key).await {
                Ok(raw_text) => {
                    attempts.push(AttemptRecord { attempt, error: None, backoff_ms });
                    if let Some(cache) = &self.cache {
                        cache.put(
                            &key,
                            &CacheEntry {
                                raw_text: raw_text.clone(),
                                created_at: Utc::now(),
                                judge_id: self.judge_id.clone(),
                                model_name: self.model_name.clone(),
                            },
                        )?;
                    }
                    return Ok(JudgeResponse {
                        raw_text,
                        latency_ms: started.elapsed().as_millis() as u64,
                        from_cache: false,
                        attempts,
                    });
                }
                Err(BackendError::CacheMiss(k)) => return Err(JudgeError::ReplayMiss(k)),
                Err(BackendError::Fatal(message)) => {
                    attempts.push(AttemptRecord { attempt, error: Some(message.clone()), backoff_ms });
                    return Err(JudgeError::Transport { last: message, attempts });
                }
                Err(BackendError::Transient { message, retry_after }) => {
                    log::debug!("judge {} attempt {attempt} failed: {message}", self.judge_id);
                    attempts.push(AttemptRecord { attempt, error: Some(message.clone()), backoff_ms });
                    if attempt == self.retry.max_attempts {
                        return Err(JudgeError::Transport { last: message, attempts });
                    }
                    let wait = self.retry.backoff(attempt, retry_after);
                    backoff_ms = wait.as_millis() as u64;
                    tokio::time::sleep(wait).await;
                }
            }
        }
        unreachable!("max_attempts >= 1 is validated")
    }
}

pub fn prompt_hash(prompt: &str) -> String {
    crate::model::sha256_hex(prompt.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(path: &Path, bytes: &[u8]) -> ImageRef {
        std::fs::write(path, bytes).unwrap();
        ImageRef::from_path(path).unwrap()
    }

    fn request(prompt: &str, images: Vec<ImageRef>) -> JudgeRequest {
        JudgeRequest { judge_id: "j".into(), prompt: prompt.into(), images, max_tokens: 16, temperature: 0.0 }
    }

    fn fast_config(max_attempts: u32) -> BackendConfig {
        let mut cfg = BackendConfig::mock("mock-model");
        cfg.retry = RetryPolicy { max_attempts, base_backoff_ms: 1 };
        cfg
    }

    #[test]
    fn key_properties() {
        let dir = tempfile::tempdir().unwrap();
        let a = img(&dir.path().join("a.png"), b"a");
        let b = img(&dir.path().join("b.png"), b"b");
        let r1 = request("Is it red?", vec![a.clone(), b.clone()]);
        assert_eq!(cache_key(&r1, "m"), cache_key(&r1.clone(), "m"));
        let swapped = request("Is it red?", vec![b, a]);
        assert_ne!(cache_key(&r1, "m"), cache_key(&swapped, "m"));
        assert_ne!(cache_key(&r1, "m"), cache_key(&r1, "other-model"));
        let mut hot = r1.clone();
        hot.temperature = 0.7;
        assert_ne!(cache_key(&r1, "m"), cache_key(&hot, "m"));
        let mut longer = r1.clone();
        longer.max_tokens = 17;
        assert_ne!(cache_key(&r1, "m"), cache_key(&longer, "m"));
    }

    proptest! {
        #[test]
        fn one_byte_prompt_change_changes_key(prompt in "[ -~]{0,64}", pos in any::<prop::sample::Index>(), byte in 0x20u8..0x7f) {
            let mut other = prompt.clone().into_bytes();
            if other.is_empty() {
                other.push(byte);
            } else {
                let i = pos.index(other.len());
                prop_assume!(other[i] != byte);
                other[i] = byte;
            }
            let other = String::from_utf8(other).unwrap();
            prop_assert_ne!(cache_key(&request(&prompt, vec![]), "m"), cache_key(&request(&other, vec![]), "m"));
        }
    }

    #[tokio::test]
    async fn scripted_mock_returns_text() {
        let client = JudgeClient::new(Arc::new(MockBackend::fixed("Yes")), &fast_config(1), None).unwrap();
        let resp = client.submit(&request("q?", vec![])).await.unwrap();
        assert_eq!(resp.raw_text, "Yes");
        assert!(!resp.from_cache);
    }

    #[tokio::test]
    async fn second_identical_request_hits_cache() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(DiskCache::open(dir.path().join("cache")).unwrap());
        let mock = Arc::new(MockBackend::fixed("Yes, clearly."));
        let client = JudgeClient::new(mock.clone(), &fast_config(1), Some(cache)).unwrap();
        let req = request("q?", vec![img(&dir.path().join("a.png"), b"a")]);
        let first = client.submit(&req).await.unwrap();
        let second = client.submit(&req).await.unwrap();
        assert!(!first.from_cache);
        assert!(second.from_cache);
        assert_eq!(first.raw_text.as_bytes(), second.raw_text.as_bytes());
        assert_eq!(mock.calls(), 1);
    }

    #[tokio::test]
    async fn retries_transient_failures() {
        let mock = Arc::new(MockBackend::script(vec![
            Err(BackendError::transient("503")),
            Err(BackendError::Transient { message: "429".into(), retry_after: Some(Duration::from_millis(2)) }),
            Ok("Yes".into()),
        ]));
        let client = JudgeClient::new(mock.clone(), &fast_config(3), None).unwrap();
        let resp = client.submit(&request("q?", vec![])).await.unwrap();
        assert_eq!(resp.raw_text, "Yes");
        assert_eq!(resp.attempts.len(), 3);
        assert_eq!(resp.attempts[2].backoff_ms, 2);
        assert!(resp.attempts[..2].iter().all(|a| a.error.is_some()));
        assert_eq!(client.request_count(), 3);
    }

    #[tokio::test]
    async fn exhausted_retries_carry_attempt_log() {
        let mock = Arc::new(MockBackend::script(vec![Err(BackendError::transient("timeout"))]));
        let client = JudgeClient::new(mock, &fast_config(2), None).unwrap();
        match client.submit(&request("q?", vec![])).await {
            Err(JudgeError::Transport { attempts, .. }) => assert_eq!(attempts.len(), 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[tokio::test]
    async fn fatal_errors_do_not_retry() {
        let mock = Arc::new(MockBackend::script(vec![Err(BackendError::Fatal("400 bad request".into()))]));
        let client = JudgeClient::new(mock.clone(), &fast_config(5), None).unwrap();
        assert!(matches!(client.submit(&request("q?", vec![])).await, Err(JudgeError::Transport { .. })));
        assert_eq!(mock.calls(), 1);
    }

    #[tokio::test]
    async fn unreadable_image_is_input_error() {
        let client = JudgeClient::new(Arc::new(MockBackend::fixed("Yes")), &fast_config(1), None).unwrap();
        let ghost = ImageRef { path: "/definitely/not/here.png".into(), sha256: "00".into() };
        assert!(matches!(client.submit(&request("q?", vec![ghost])).await, Err(JudgeError::Input(_))));
    }

    #[tokio::test(flavor = "multi_thread", worker_threads = 4)]
    async fn in_flight_requests_are_bounded() {
        let mock = Arc::new(MockBackend::fixed("Yes").with_delay(Duration::from_millis(5)));
        let mut cfg = fast_config(1);
        cfg.concurrency_limit = 3;
        let client = Arc::new(JudgeClient::new(mock.clone(), &cfg, None).unwrap());
        let mut tasks = Vec::new();
        for i in 0..40 {
            let client = client.clone();
            tasks.push(tokio::spawn(async move { client.submit(&request(&format!("q{i}?"), vec![])).await.unwrap() }));
        }
        for t in tasks {
            t.await.unwrap();
        }
        assert_eq!(mock.calls(), 40);
        assert!(mock.max_in_flight() <= 3, "peak {}", mock.max_in_flight());
        assert!(mock.max_in_flight() >= 2, "limit never exercised");
    }

    #[test]
    fn config_validation() {
        let mut cfg = BackendConfig::mock("m");
        cfg.concurrency_limit = 0;
        assert!(matches!(cfg.validate(), Err(JudgeError::Config(_))));
        let mut cfg = BackendConfig::mock("m");
        cfg.retry.max_attempts = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = BackendConfig::mock("m");
        cfg.kind = BackendKind::Replay;
        assert!(JudgeClient::from_config(&cfg, None).is_err());
    }

    #[test]
    fn backoff_grows_and_honors_hint() {
        let p = RetryPolicy { max_attempts: 5, base_backoff_ms: 100 };
        let d1 = p.backoff(1, None).as_millis();
        let d3 = p.backoff(3, None).as_millis();
        assert!((100..200).contains(&d1));
        assert!((400..500).contains(&d3));
        assert_eq!(p.backoff(2, Some(Duration::from_secs(7))), Duration::from_secs(7));
        assert_eq!(p.backoff(2, Some(Duration::from_secs(600))), MAX_BACKOFF);
    }
}
