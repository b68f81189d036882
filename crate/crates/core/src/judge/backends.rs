//! Offline backends: a scriptable mock and a replay of recorded responses.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use async_trait::async_trait;

use super::cache::ReplayRecord;
use super::{BackendError, CacheKey, JudgeBackend, JudgeError, JudgeRequest};
use crate::jsonl;

type Responder = Box<dyn Fn(&JudgeRequest) -> Result<String, BackendError> + Send + Sync>;

/// Deterministic in-process judge. Records call count and peak concurrency.
pub struct MockBackend {
    responder: Responder,
    script: Option<Mutex<Vec<Result<String, BackendError>>>>,
    delay: Option<Duration>,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

impl MockBackend {
    pub fn from_fn(f: impl Fn(&JudgeRequest) -> Result<String, BackendError> + Send + Sync + 'static) -> Self {
        Self {
            responder: Box::new(f),
            script: None,
            delay: None,
            calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
        }
    }

    pub fn fixed(reply: impl Into<String>) -> Self {
        let reply = reply.into();
        Self::from_fn(move |_| Ok(reply.clone()))
    }

    /// Replies in order; the last entry repeats once the script runs out.
    pub fn script(steps: Vec<Result<String, BackendError>>) -> Self {
        assert!(!steps.is_empty(), "empty mock script");
        let mut steps = steps;
        steps.reverse();
        let mut mock = Self::from_fn(|_| unreachable!("scripted"));
        mock.script = Some(Mutex::new(steps));
        mock
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = Some(delay);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl JudgeBackend for MockBackend {
    async fn complete(&self, request: &JudgeRequest, _key: &CacheKey) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        if let Some(d) = self.delay {
            tokio::time::sleep(d).await;
        }
        let result = match &self.script {
            Some(script) => {
                let mut steps = script.lock().unwrap_or_else(|e| e.into_inner());
                if steps.len() > 1 {
                    steps.pop().expect("nonempty")
                } else {
                    steps[0].clone()
                }
            }
            None => (self.responder)(request),
        };
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        result
    }
}

/// Serves responses recorded under their cache keys; any unknown key is an error.
#[derive(Debug, Default)]
pub struct ReplayBackend {
    responses: HashMap<String, String>,
}

impl ReplayBackend {
    pub fn new(records: impl IntoIterator<Item = ReplayRecord>) -> Self {
        Self { responses: records.into_iter().map(|r| (r.key, r.raw_text)).collect() }
    }

    pub fn load(path: &Path) -> Result<Self, JudgeError> {
        let records: Vec<ReplayRecord> =
            jsonl::read_jsonl(path).map_err(|e| JudgeError::Config(format!("replay file: {e}")))?;
        Ok(Self::new(records))
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

#[async_trait]
impl JudgeBackend for ReplayBackend {
    async fn complete(&self, _request: &JudgeRequest, key: &CacheKey) -> Result<String, BackendError> {
        self.responses.get(key.as_str()).cloned().ok_or_else(|| BackendError::CacheMiss(key.to_string()))
    }
}
