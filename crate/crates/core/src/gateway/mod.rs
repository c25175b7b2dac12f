//! Completion gateway: one interface over the remote chat endpoint and the
//! offline mock, with a content-addressed response cache, single-flight
//! de-duplication and bounded batch concurrency.

mod cache;
mod http;
mod mock;

use std::collections::HashMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::{CacheRecord, ResponseCache};
pub use http::OpenAiBackend;
pub use mock::{MockBackend, MockRule, MockScript};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("request rejected with HTTP {status}: {body}")]
    Request { status: u16, body: String },
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("malformed response: {0}")]
    Response(String),
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("cache: {0}")]
    Cache(String),
    #[error("cancelled after an earlier failure in the batch")]
    Cancelled,
}

/// Which pipeline stage issued a request. Carried for routing and audit; it
/// is not part of the cache key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    OpenInference,
    Aggregation,
    FinalPrediction,
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageTag::OpenInference => "open_inference",
            StageTag::Aggregation => "aggregation",
            StageTag::FinalPrediction => "final_prediction",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub prompt_text: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub stage_tag: StageTag,
}

impl CompletionRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.prompt_text.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("prompt_text is empty".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature must be a finite value >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON encoding of the fields that determine
    /// the response.
    pub fn fingerprint(&self, backend_id: &str) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            backend_id: &'a str,
            model: &'a str,
            prompt_text: &'a str,
            temperature: f64,
            max_tokens: u32,
        }
        let key = Key {
            backend_id,
            model: &self.model,
            prompt_text: &self.prompt_text,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        };
        let bytes = serde_json::to_vec(&key).expect("key serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Model and decoding settings for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageParams {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl StageParams {
    pub fn new(model: impl Into<String>, temperature: f64, max_tokens: u32) -> Self {
        StageParams {
            model: model.into(),
            temperature,
            max_tokens,
        }
    }

    pub fn request(&self, prompt_text: String, stage_tag: StageTag) -> CompletionRequest {
        CompletionRequest {
            model: self.model.clone(),
            prompt_text,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            stage_tag,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub request_fingerprint: String,
    pub backend_id: String,
    pub cached: bool,
}

/// Something that turns a prompt into text.
pub trait Backend: Send + Sync {
    /// Stable identifier; part of every cache key.
    fn id(&self) -> String;

    fn complete(&self, req: &CompletionRequest) -> Result<String, GatewayError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub base_url: String,
    /// Name of the environment variable holding the API key. Empty means the
    /// endpoint needs no key.
    pub api_key_env: String,
    pub max_parallel: usize,
    pub retry_max: u32,
    pub timeout_secs: u64,
    /// Base delay of the exponential backoff between retries.
    pub backoff_ms: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            base_url: "http://localhost:8000/v1".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            max_parallel: 8,
            retry_max: 3,
            timeout_secs: 120,
            backoff_ms: 500,
        }
    }
}

impl BackendConfig {
    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_parallel == 0 {
            return Err(GatewayError::Config("max_parallel must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GatewayStats {
    pub backend_calls: usize,
    pub cache_hits: usize,
}

#[derive(Serialize)]
struct AuditLine<'a> {
    fingerprint: &'a str,
    stage: StageTag,
    backend_id: &'a str,
    cached: bool,
    ok: bool,
}

pub struct Gateway {
    backend: Arc<dyn Backend>,
    backend_id: String,
    cache: ResponseCache,
    max_parallel: usize,
    inflight: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    audit: Option<Mutex<BufWriter<File>>>,
    backend_calls: AtomicUsize,
    cache_hits: AtomicUsize,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, cache: ResponseCache, max_parallel: usize) -> Self {
        let backend_id = backend.id();
        Gateway {
            backend,
            backend_id,
            cache,
            max_parallel: max_parallel.max(1),
            inflight: Mutex::new(HashMap::new()),
            audit: None,
            backend_calls: AtomicUsize::new(0),
            cache_hits: AtomicUsize::new(0),
        }
    }

    /// Gateway over the offline mock with an in-memory cache.
    pub fn mock(script: MockScript) -> Self {
        Gateway::new(Arc::new(MockBackend::new(script)), ResponseCache::in_memory(), 8)
    }

    /// Appends one JSON line per completion (fingerprint, stage, cache hit).
    pub fn with_audit_log(mut self, path: &Path) -> std::io::Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        self.audit = Some(Mutex::new(BufWriter::new(file)));
        Ok(self)
    }

    pub fn backend_id(&self) -> &str {
        &self.backend_id
    }

    pub fn max_parallel(&self) -> usize {
        self.max_parallel
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            backend_calls: self.backend_calls.load(Ordering::SeqCst),
            cache_hits: self.cache_hits.load(Ordering::SeqCst),
        }
    }

    fn audit(&self, fingerprint: &str, stage: StageTag, cached: bool, ok: bool) {
        if let Some(audit) = &self.audit {
            let line = AuditLine {
                fingerprint,
                stage,
                backend_id: &self.backend_id,
                cached,
                ok,
            };
            let mut w = audit.lock().unwrap_or_else(|e| e.into_inner());
            let _ = serde_json::to_writer(&mut *w, &line);
            let _ = w.write_all(b"\n");
            let _ = w.flush();
        }
    }

    fn hit(&self, fingerprint: String, text: String, stage: StageTag) -> CompletionResult {
        self.cache_hits.fetch_add(1, Ordering::SeqCst);
        self.audit(&fingerprint, stage, true, true);
        CompletionResult {
            text,
            request_fingerprint: fingerprint,
            backend_id: self.backend_id.clone(),
            cached: true,
        }
    }

    pub fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        req.validate()?;
        let fingerprint = req.fingerprint(&self.backend_id);
        if let Some(text) = self.cache.get(&fingerprint)? {
            return Ok(self.hit(fingerprint, text, req.stage_tag));
        }

        // Single flight: concurrent callers with the same fingerprint wait
        // here and then find the response in the cache.
        let slot = {
            let mut inflight = self.inflight.lock().unwrap_or_else(|e| e.into_inner());
            inflight.entry(fingerprint.clone()).or_default().clone()
        };
        let result = {
            let _guard = slot.lock().unwrap_or_else(|e| e.into_inner());
            match self.cache.get(&fingerprint)? {
                Some(text) => Ok(self.hit(fingerprint.clone(), text, req.stage_tag)),
                None => {
                    self.backend_calls.fetch_add(1, Ordering::SeqCst);
                    let outcome = self.backend.complete(req);
                    self.audit(&fingerprint, req.stage_tag, false, outcome.is_ok());
                    match outcome {
                        Ok(text) => {
                            self.cache.put(&fingerprint, req, &self.backend_id, &text)?;
                            Ok(CompletionResult {
                                text,
                                request_fingerprint: fingerprint.clone(),
                                backend_id: self.backend_id.clone(),
                                cached: false,
                            })
                        }
                        Err(e) => Err(e),
                    }
                }
            }
        };
        let mut inflight = self.inflight.lock().unwrap_or_else(|e| e.into_inner());
        if Arc::strong_count(&slot) == 2 {
            inflight.remove(&fingerprint);
        }
        result
    }

    /// Runs every request with at most `max_parallel` in flight. Results are
    /// positionally aligned with `reqs`. With `fail_fast`, the first error
    /// stops new work and the untouched positions report `Cancelled`.
    pub fn complete_batch(
        &self,
        reqs: &[CompletionRequest],
        fail_fast: bool,
    ) -> Vec<Result<CompletionResult, GatewayError>> {
        let n = reqs.len();
        if n == 0 {
            return Vec::new();
        }
        let next = AtomicUsize::new(0);
        let stop = AtomicBool::new(false);
        let workers = self.max_parallel.min(n);
        let mut slots: Vec<Option<Result<CompletionResult, GatewayError>>> = vec![None; n];

        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|_| {
                    scope.spawn(|| {
                        let mut done = Vec::new();
                        loop {
                            if stop.load(Ordering::SeqCst) {
                                break;
                            }
                            let i = next.fetch_add(1, Ordering::SeqCst);
                            if i >= n {
                                break;
                            }
                            let r = self.complete(&reqs[i]);
                            if r.is_err() && fail_fast {
                                stop.store(true, Ordering::SeqCst);
                            }
                            done.push((i, r));
                        }
                        done
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("batch worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });

        slots
            .into_iter()
            .map(|s| s.unwrap_or(Err(GatewayError::Cancelled)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    struct Counting {
        calls: AtomicUsize,
        current: AtomicUsize,
        peak: AtomicUsize,
        delay: Duration,
    }

    impl Counting {
        fn new(delay: Duration) -> Self {
            Counting {
                calls: AtomicUsize::new(0),
                current: AtomicUsize::new(0),
                peak: AtomicUsize::new(0),
                delay,
            }
        }
    }

    impl Backend for Counting {
        fn id(&self) -> String {
            "counting".into()
        }

        fn complete(&self, req: &CompletionRequest) -> Result<String, GatewayError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            if !self.delay.is_zero() {
                std::thread::sleep(self.delay);
            }
            self.current.fetch_sub(1, Ordering::SeqCst);
            if req.prompt_text.contains("FAIL") {
                return Err(GatewayError::Transport {
                    attempts: 1,
                    message: "scripted failure".into(),
                });
            }
            Ok(format!("echo:{}", req.prompt_text.len()))
        }
    }

    fn req(prompt: &str) -> CompletionRequest {
        CompletionRequest {
            model: "m".into(),
            prompt_text: prompt.into(),
            temperature: 0.0,
            max_tokens: 16,
            stage_tag: StageTag::OpenInference,
        }
    }

    #[test]
    fn second_identical_request_is_cached() {
        let g = Gateway::mock(MockScript::with_default("hello"));
        let a = g.complete(&req("p")).unwrap();
        let b = g.complete(&req("p")).unwrap();
        assert!(!a.cached);
        assert!(b.cached);
        assert_eq!(a.text, b.text);
        assert_eq!(a.request_fingerprint, b.request_fingerprint);
        assert_eq!(g.stats(), GatewayStats { backend_calls: 1, cache_hits: 1 });
    }

    #[test]
    fn fingerprint_covers_every_keyed_field() {
        let base = req("p");
        let mut variants = vec![base.fingerprint("b")];
        variants.push(base.fingerprint("b2"));
        variants.push(CompletionRequest { model: "m2".into(), ..base.clone() }.fingerprint("b"));
        variants.push(CompletionRequest { prompt_text: "q".into(), ..base.clone() }.fingerprint("b"));
        variants.push(CompletionRequest { temperature: 0.5, ..base.clone() }.fingerprint("b"));
        variants.push(CompletionRequest { max_tokens: 17, ..base.clone() }.fingerprint("b"));
        let distinct: HashSet<_> = variants.iter().collect();
        assert_eq!(distinct.len(), variants.len());
        let other_stage = CompletionRequest { stage_tag: StageTag::Aggregation, ..base.clone() };
        assert_eq!(other_stage.fingerprint("b"), base.fingerprint("b"));
    }

    #[test]
    fn identical_batch_hits_backend_once() {
        let backend = Arc::new(Counting::new(Duration::from_millis(2)));
        let g = Gateway::new(backend.clone(), ResponseCache::in_memory(), 8);
        let reqs = vec![req("same"); 100];
        let out = g.complete_batch(&reqs, false);
        assert!(out.iter().all(|r| r.is_ok()));
        assert_eq!(backend.calls.load(Ordering::SeqCst), 1);
        assert_eq!(out.iter().filter(|r| r.as_ref().unwrap().cached).count(), 99);
    }

    #[test]
    fn malformed_request_fails_in_place() {
        let g = Gateway::mock(MockScript::with_default("ok"));
        let mut reqs: Vec<_> = (0..100).map(|i| req(&format!("p{i}"))).collect();
        reqs[42].prompt_text = "   ".into();
        let out = g.complete_batch(&reqs, false);
        assert_eq!(out.iter().filter(|r| r.is_ok()).count(), 99);
        assert!(matches!(out[42], Err(GatewayError::InvalidRequest(_))));
    }

    #[test]
    fn fail_fast_cancels_remaining_work() {
        let backend = Arc::new(Counting::new(Duration::ZERO));
        let g = Gateway::new(backend, ResponseCache::in_memory(), 1);
        let mut reqs: Vec<_> = (0..10).map(|i| req(&format!("p{i}"))).collect();
        reqs[3].prompt_text = "FAIL".into();
        let out = g.complete_batch(&reqs, true);
        assert!(out[..3].iter().all(|r| r.is_ok()));
        assert!(matches!(out[3], Err(GatewayError::Transport { .. })));
        assert!(out[4..].iter().all(|r| matches!(r, Err(GatewayError::Cancelled))));
    }

    #[test]
    fn in_flight_never_exceeds_max_parallel() {
        let backend = Arc::new(Counting::new(Duration::from_micros(50)));
        let g = Gateway::new(backend.clone(), ResponseCache::in_memory(), 8);
        let reqs: Vec<_> = (0..10_000).map(|i| req(&format!("prompt {i}"))).collect();
        let out = g.complete_batch(&reqs, false);
        assert_eq!(out.len(), 10_000);
        assert!(backend.peak.load(Ordering::SeqCst) <= 8);
        assert!(backend.peak.load(Ordering::SeqCst) >= 2);
        assert_eq!(backend.calls.load(Ordering::SeqCst), 10_000);
    }

    #[test]
    fn batch_matches_sequential_completion() {
        let script: MockScript = serde_json::from_str(
            r#"{"default":"other","rules":[{"contains":["7"],"response":"seven"}]}"#,
        )
        .unwrap();
        let batch_gw = Gateway::mock(script.clone());
        let seq_gw = Gateway::mock(script);
        let reqs: Vec<_> = (0..50).map(|i| req(&format!("n{i}"))).collect();
        let batch: Vec<_> = batch_gw
            .complete_batch(&reqs, false)
            .into_iter()
            .map(|r| r.unwrap().text)
            .collect();
        let seq: Vec<_> = reqs.iter().map(|r| seq_gw.complete(r).unwrap().text).collect();
        assert_eq!(batch, seq);
    }

    #[test]
    fn audit_log_records_each_completion() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("logs/completions.jsonl");
        let g = Gateway::mock(MockScript::with_default("x")).with_audit_log(&log).unwrap();
        g.complete(&req("a")).unwrap();
        g.complete(&req("a")).unwrap();
        let lines: Vec<serde_json::Value> = std::fs::read_to_string(&log)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0]["cached"], false);
        assert_eq!(lines[1]["cached"], true);
        assert_eq!(lines[0]["fingerprint"], lines[1]["fingerprint"]);
    }

    #[test]
    fn rejects_negative_temperature() {
        let g = Gateway::mock(MockScript::default());
        let r = CompletionRequest { temperature: -0.1, ..req("p") };
        assert!(matches!(g.complete(&r), Err(GatewayError::InvalidRequest(_))));
    }
}
