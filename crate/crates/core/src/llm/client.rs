//! Chat-completion client with retries, a shared token bucket, an in-flight
//! limit, a response cache and an append-only audit log.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LlmError;
use crate::hashing::{derive_seed, sha256_hex};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// Wire request: `{"model", "messages": [{"role", "content"}], "temperature"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

impl ChatRequest {
    pub fn user(model: &str, prompt: &str, temperature: f64) -> Self {
        ChatRequest {
            model: model.to_string(),
            messages: vec![ChatMessage {
                role: "user".into(),
                content: prompt.to_string(),
            }],
            temperature,
        }
    }

    pub fn prompt(&self) -> &str {
        self.messages.last().map_or("", |m| m.content.as_str())
    }
}

/// One call as seen by a provider. `sequence` is the request's position in
/// its stage and `ask` counts re-asks of the same prompt.
#[derive(Debug, Clone, Copy)]
pub struct ChatCall<'a> {
    pub request: &'a ChatRequest,
    pub prompt_hash: &'a str,
    pub sequence: usize,
    pub ask: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProviderErrorKind {
    Status,
    Timeout,
    Transport,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProviderError {
    pub kind: ProviderErrorKind,
    pub status: Option<u16>,
    pub message: String,
}

impl ProviderError {
    pub fn status(status: u16, message: impl Into<String>) -> Self {
        ProviderError {
            kind: ProviderErrorKind::Status,
            status: Some(status),
            message: message.into(),
        }
    }

    pub fn timeout() -> Self {
        ProviderError {
            kind: ProviderErrorKind::Timeout,
            status: None,
            message: "timed out".into(),
        }
    }

    pub fn retryable(&self) -> bool {
        match self.kind {
            ProviderErrorKind::Timeout | ProviderErrorKind::Transport => true,
            ProviderErrorKind::Status => self.status.is_some_and(|s| s == 429 || s >= 500),
        }
    }
}

pub trait ChatProvider: Send + Sync {
    fn complete(&self, call: &ChatCall<'_>) -> Result<String, ProviderError>;
}

/// Retry, pacing and timeout settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmPolicy {
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub backoff_cap_ms: u64,
    pub requests_per_minute: f64,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
}

impl Default for LlmPolicy {
    fn default() -> Self {
        LlmPolicy {
            max_retries: 4,
            backoff_base_ms: 500,
            backoff_cap_ms: 30_000,
            requests_per_minute: 3_000.0,
            timeout_ms: 60_000,
            max_in_flight: 8,
        }
    }
}

impl LlmPolicy {
    pub fn validate(&self) -> Result<(), LlmError> {
        if self.backoff_base_ms == 0 || self.backoff_cap_ms == 0 {
            return Err(LlmError::Policy("backoff durations must be positive".into()));
        }
        if !(self.requests_per_minute > 0.0) {
            return Err(LlmError::Policy("requests_per_minute must be positive".into()));
        }
        if self.timeout_ms == 0 || self.max_in_flight == 0 {
            return Err(LlmError::Policy(
                "timeout and max_in_flight must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Exponential backoff with jitter in `[d/2, d]`, where `d = min(cap, base * 2^attempt)`.
    /// The jitter stream is seeded from the prompt hash so retries are reproducible.
    pub fn backoff(&self, attempt: u32, seed: u64) -> Duration {
        let exp = self
            .backoff_base_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.backoff_cap_ms);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, attempt as u64));
        let jitter: f64 = rng.random_range(0.5..=1.0);
        Duration::from_secs_f64(exp as f64 * jitter / 1000.0)
    }
}

struct TokenBucket {
    capacity: f64,
    tokens: f64,
    per_sec: f64,
    last: Instant,
}

impl TokenBucket {
    fn new(rpm: f64) -> Self {
        let capacity = (rpm / 60.0).max(1.0);
        TokenBucket {
            capacity,
            tokens: capacity,
            per_sec: rpm / 60.0,
            last: Instant::now(),
        }
    }

    /// Takes a token, or returns how long to wait for one.
    fn try_take(&mut self) -> Result<(), Duration> {
        let now = Instant::now();
        let elapsed = now.duration_since(self.last).as_secs_f64();
        self.last = now;
        self.tokens = (self.tokens + elapsed * self.per_sec).min(self.capacity);
        if self.tokens >= 1.0 {
            self.tokens -= 1.0;
            Ok(())
        } else {
            Err(Duration::from_secs_f64((1.0 - self.tokens) / self.per_sec))
        }
    }
}

struct InFlight {
    count: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.count.lock().unwrap();
        while *n >= self.limit {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.count.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

/// Audit log line: `{"prompt_hash","request","response","ts","attempt"}` plus
/// the re-ask ordinal. Failed attempts carry an `error` and no response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub prompt_hash: String,
    pub request: ChatRequest,
    pub response: Option<String>,
    pub ts: u64,
    pub attempt: u32,
    #[serde(default)]
    pub ask: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

struct AuditLog {
    path: PathBuf,
    file: Mutex<File>,
}

/// A raw reply and how it was obtained.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LlmResponse {
    pub raw: String,
    pub from_cache: bool,
    pub attempts: u32,
}

pub struct LlmClient {
    provider: Box<dyn ChatProvider>,
    policy: LlmPolicy,
    model: String,
    temperature: f64,
    bucket: Mutex<TokenBucket>,
    in_flight: InFlight,
    cache: Mutex<HashMap<(String, u32), String>>,
    audit: Option<AuditLog>,
}

impl LlmClient {
    pub fn new(
        provider: Box<dyn ChatProvider>,
        policy: LlmPolicy,
        model: impl Into<String>,
        temperature: f64,
    ) -> Result<Self, LlmError> {
        policy.validate()?;
        Ok(LlmClient {
            provider,
            bucket: Mutex::new(TokenBucket::new(policy.requests_per_minute)),
            in_flight: InFlight {
                count: Mutex::new(0),
                freed: Condvar::new(),
                limit: policy.max_in_flight,
            },
            policy,
            model: model.into(),
            temperature,
            cache: Mutex::new(HashMap::new()),
            audit: None,
        })
    }

    /// Attaches an audit log. Successful responses already recorded there are
    /// loaded as a cache, so a rerun replays them without provider calls. A
    /// torn final line from an interrupted run is cut off.
    pub fn with_audit_log(mut self, path: &Path) -> Result<Self, LlmError> {
        let audit_err = |source| LlmError::Audit {
            path: path.to_path_buf(),
            source,
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(audit_err)?;
        }
        if let Ok(bytes) = fs::read(path) {
            let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
            if keep < bytes.len() {
                let f = OpenOptions::new().write(true).open(path).map_err(audit_err)?;
                f.set_len(keep as u64).map_err(audit_err)?;
            }
            let mut cache = self.cache.lock().unwrap();
            for line in BufReader::new(&bytes[..keep]).lines().map_while(Result::ok) {
                if let Ok(rec) = serde_json::from_str::<AuditRecord>(&line) {
                    if let Some(resp) = rec.response {
                        cache.insert((rec.prompt_hash, rec.ask), resp);
                    }
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(audit_err)?;
        self.audit = Some(AuditLog {
            path: path.to_path_buf(),
            file: Mutex::new(file),
        });
        Ok(self)
    }

    pub fn policy(&self) -> &LlmPolicy {
        &self.policy
    }

    pub fn prompt_hash(prompt: &str) -> String {
        sha256_hex(prompt.as_bytes())
    }

    fn audit(&self, rec: &AuditRecord) -> Result<(), LlmError> {
        let Some(log) = &self.audit else {
            return Ok(());
        };
        let mut line = serde_json::to_string(rec).expect("serializable");
        line.push('\n');
        let mut f = log.file.lock().unwrap();
        f.write_all(line.as_bytes())
            .and_then(|_| f.flush())
            .map_err(|source| LlmError::Audit {
                path: log.path.clone(),
                source,
            })
    }

    fn wait_for_token(&self) {
        loop {
            let wait = self.bucket.lock().unwrap().try_take();
            match wait {
                Ok(()) => return,
                Err(d) => std::thread::sleep(d),
            }
        }
    }

    /// Sends `prompt`, retrying transient failures with backoff.
    ///
    /// A response cached under `(prompt hash, ask)` is returned without any
    /// provider call. Non-retryable provider errors pass through immediately.
    pub fn request_with_retry(
        &self,
        prompt: &str,
        sequence: usize,
        ask: u32,
    ) -> Result<LlmResponse, LlmError> {
        let hash = Self::prompt_hash(prompt);
        if let Some(raw) = self.cache.lock().unwrap().get(&(hash.clone(), ask)) {
            return Ok(LlmResponse {
                raw: raw.clone(),
                from_cache: true,
                attempts: 0,
            });
        }
        let request = ChatRequest::user(&self.model, prompt, self.temperature);
        let call = ChatCall {
            request: &request,
            prompt_hash: &hash,
            sequence,
            ask,
        };
        let jitter_seed = u64::from_str_radix(&hash[..16], 16).unwrap_or(0);
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            self.wait_for_token();
            let result = {
                let _permit = self.in_flight.acquire();
                self.provider.complete(&call)
            };
            let ts = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs());
            match result {
                Ok(raw) => {
                    self.audit(&AuditRecord {
                        prompt_hash: hash.clone(),
                        request: request.clone(),
                        response: Some(raw.clone()),
                        ts,
                        attempt,
                        ask,
                        error: None,
                    })?;
                    self.cache
                        .lock()
                        .unwrap()
                        .insert((hash.clone(), ask), raw.clone());
                    return Ok(LlmResponse {
                        raw,
                        from_cache: false,
                        attempts: attempt,
                    });
                }
                Err(err) => {
                    self.audit(&AuditRecord {
                        prompt_hash: hash.clone(),
                        request: request.clone(),
                        response: None,
                        ts,
                        attempt,
                        ask,
                        error: Some(format!("{:?} {:?}: {}", err.kind, err.status, err.message)),
                    })?;
                    if !err.retryable() {
                        return Err(LlmError::Provider {
                            status: err.status,
                            message: err.message,
                            attempts: attempt,
                        });
                    }
                    if attempt > self.policy.max_retries {
                        return Err(if err.kind == ProviderErrorKind::Timeout {
                            LlmError::Timeout { attempts: attempt }
                        } else {
                            LlmError::RetriesExhausted {
                                attempts: attempt,
                                status: err.status,
                                message: err.message,
                            }
                        });
                    }
                    std::thread::sleep(self.policy.backoff(attempt - 1, jitter_seed));
                }
            }
        }
    }
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChatMessage,
}

/// HTTP chat-completion provider. Reads `choices[0].message.content`.
pub struct HttpChatProvider {
    agent: ureq::Agent,
    endpoint: String,
    api_key: Option<String>,
}

impl HttpChatProvider {
    /// `api_key_env` names the environment variable holding the bearer token.
    pub fn new(endpoint: impl Into<String>, api_key_env: &str, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpChatProvider {
            agent,
            endpoint: endpoint.into(),
            api_key: std::env::var(api_key_env).ok(),
        }
    }
}

impl ChatProvider for HttpChatProvider {
    fn complete(&self, call: &ChatCall<'_>) -> Result<String, ProviderError> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(call.request).map_err(|e| match e {
            ureq::Error::Timeout(_) => ProviderError::timeout(),
            other => ProviderError {
                kind: ProviderErrorKind::Transport,
                status: None,
                message: other.to_string(),
            },
        })?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(ProviderError::status(status, body));
        }
        let parsed: CompletionResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| ProviderError::status(status, format!("bad completion body: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| ProviderError::status(status, "completion has no choices"))
    }
}
