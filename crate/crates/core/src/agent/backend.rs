use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::AgentRole;
use crate::error::{Error, Result};
use crate::manifest::read_jsonl;

/// Which candidate a call is about. Backends may use it to select responses;
/// the HTTP backend ignores it.
#[derive(Debug, Clone, Copy)]
pub struct InvocationContext<'a> {
    pub query_id: &'a str,
    pub item_id: &'a str,
    /// 1-based interaction round.
    pub round: u32,
}

/// Something that answers agent prompts about an image.
pub trait AgentBackend: Send + Sync {
    fn invoke(&self, ctx: &InvocationContext<'_>, role: AgentRole, image_ref: &str, prompt: &str) -> Result<String>;
}

/// One line of a scripted fixture file. `query_id` and `round` narrow the
/// match; the most specific entry wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedResponse {
    pub role: AgentRole,
    pub image_ref: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<u32>,
}

type ScriptKey = (AgentRole, String, Option<String>, Option<u32>);

/// Replays canned responses and counts every call.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    responses: HashMap<ScriptKey, String>,
    calls: [AtomicUsize; 3],
}

impl ScriptedBackend {
    pub fn new(entries: impl IntoIterator<Item = ScriptedResponse>) -> Self {
        let responses = entries
            .into_iter()
            .map(|e| ((e.role, e.image_ref, e.query_id, e.round), e.response))
            .collect();
        Self {
            responses,
            calls: Default::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let entries = read_jsonl::<ScriptedResponse>(path)?.into_iter().map(|(_, e)| e);
        Ok(Self::new(entries))
    }

    pub fn calls(&self, role: AgentRole) -> usize {
        self.calls[role as usize].load(Ordering::SeqCst)
    }

    pub fn total_calls(&self) -> usize {
        AgentRole::ALL.iter().map(|r| self.calls(*r)).sum()
    }

    pub fn reset_counters(&self) {
        for c in &self.calls {
            c.store(0, Ordering::SeqCst);
        }
    }

    fn lookup(&self, ctx: &InvocationContext<'_>, role: AgentRole, image_ref: &str) -> Option<&String> {
        let q = Some(ctx.query_id.to_string());
        let r = Some(ctx.round);
        [(q.clone(), r), (q, None), (None, r), (None, None)]
            .into_iter()
            .find_map(|(q, r)| self.responses.get(&(role, image_ref.to_string(), q, r)))
    }
}

impl AgentBackend for ScriptedBackend {
    fn invoke(&self, ctx: &InvocationContext<'_>, role: AgentRole, image_ref: &str, _prompt: &str) -> Result<String> {
        self.calls[role as usize].fetch_add(1, Ordering::SeqCst);
        self.lookup(ctx, role, image_ref)
            .cloned()
            .ok_or_else(|| Error::FixtureMiss {
                role,
                image_ref: image_ref.to_string(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Scripted,
    Http,
}

fn default_timeout_ms() -> u64 {
    60_000
}
fn default_max_retries() -> u32 {
    2
}
fn default_backoff_ms() -> u64 {
    250
}
fn default_concurrency() -> usize {
    4
}
fn default_auth_env() -> String {
    "SQUADRANK_API_KEY".into()
}

/// Backend selection as written in a run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentBackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model_name: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// First retry delay; doubles on every further attempt.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    /// Upper bound on in-flight HTTP requests.
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    /// Environment variable holding the bearer token.
    #[serde(default = "default_auth_env")]
    pub auth_env: String,
    #[serde(default)]
    pub fixture_path: Option<PathBuf>,
}

impl AgentBackendConfig {
    pub fn scripted(fixture_path: impl Into<PathBuf>) -> Self {
        Self {
            kind: BackendKind::Scripted,
            endpoint: None,
            model_name: None,
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            backoff_ms: default_backoff_ms(),
            concurrency: default_concurrency(),
            auth_env: default_auth_env(),
            fixture_path: Some(fixture_path.into()),
        }
    }

    pub fn http(endpoint: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::Http,
            endpoint: Some(endpoint.into()),
            model_name: Some(model_name.into()),
            fixture_path: None,
            ..Self::scripted("")
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            BackendKind::Scripted if self.fixture_path.is_none() => {
                Err(Error::InvalidConfig("scripted backend requires fixture_path".into()))
            }
            BackendKind::Http if self.endpoint.is_none() || self.model_name.is_none() => Err(Error::InvalidConfig(
                "http backend requires endpoint and model_name".into(),
            )),
            BackendKind::Http if self.concurrency == 0 => Err(Error::InvalidConfig(
                "http backend concurrency must be at least 1".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn connect(&self) -> Result<Box<dyn AgentBackend>> {
        self.validate()?;
        Ok(match self.kind {
            BackendKind::Scripted => Box::new(ScriptedBackend::load(self.fixture_path.as_deref().expect("validated"))?),
            BackendKind::Http => Box::new(HttpBackend::new(self)?),
        })
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Permits);

impl Permits {
    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

enum Attempt {
    Retry(Error),
    Fatal(Error),
}

/// OpenAI-compatible `/chat/completions` client.
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    url: String,
    model: String,
    token: Option<String>,
    max_retries: u32,
    backoff: Duration,
    permits: Permits,
}

impl HttpBackend {
    pub fn new(cfg: &AgentBackendConfig) -> Result<Self> {
        cfg.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| Error::InvalidConfig(format!("http client: {e}")))?;
        let base = cfg.endpoint.as_deref().expect("validated").trim_end_matches('/');
        Ok(Self {
            client,
            url: format!("{base}/chat/completions"),
            model: cfg.model_name.clone().expect("validated"),
            token: std::env::var(&cfg.auth_env).ok().filter(|t| !t.is_empty()),
            max_retries: cfg.max_retries,
            backoff: Duration::from_millis(cfg.backoff_ms),
            permits: Permits {
                free: Mutex::new(cfg.concurrency),
                cv: Condvar::new(),
            },
        })
    }

    /// Request body: one user message holding the prompt and the image.
    pub fn request_body(&self, image_ref: &str, prompt: &str) -> serde_json::Value {
        json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "text", "text": prompt},
                    {"type": "image_url", "image_url": {"url": image_ref}},
                ],
            }],
        })
    }

    fn attempt(&self, body: &serde_json::Value) -> std::result::Result<String, Attempt> {
        let mut req = self.client.post(&self.url).json(body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                Attempt::Retry(Error::BackendTimeout { attempts: 0 })
            } else {
                Attempt::Retry(Error::BackendUnavailable {
                    attempts: 0,
                    message: e.to_string(),
                })
            }
        })?;
        let status = resp.status();
        if !status.is_success() {
            let err = Error::BackendUnavailable {
                attempts: 0,
                message: format!("HTTP {status}"),
            };
            return Err(if status.is_server_error() || status.as_u16() == 429 {
                Attempt::Retry(err)
            } else {
                Attempt::Fatal(err)
            });
        }
        let value: serde_json::Value = resp.json().map_err(|e| {
            Attempt::Fatal(Error::BackendUnavailable {
                attempts: 0,
                message: format!("malformed response: {e}"),
            })
        })?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| {
                Attempt::Fatal(Error::BackendUnavailable {
                    attempts: 0,
                    message: "response has no choices[0].message.content".into(),
                })
            })
    }
}

fn with_attempts(err: Error, n: u32) -> Error {
    match err {
        Error::BackendTimeout { .. } => Error::BackendTimeout { attempts: n },
        Error::BackendUnavailable { message, .. } => Error::BackendUnavailable { attempts: n, message },
        other => other,
    }
}

impl AgentBackend for HttpBackend {
    fn invoke(&self, ctx: &InvocationContext<'_>, role: AgentRole, image_ref: &str, prompt: &str) -> Result<String> {
        let body = self.request_body(image_ref, prompt);
        let _permit = self.permits.acquire();
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fatal(e)) => return Err(with_attempts(e, attempts)),
                Err(Attempt::Retry(e)) if attempts > self.max_retries => return Err(with_attempts(e, attempts)),
                Err(Attempt::Retry(e)) => {
                    tracing::debug!(%role, query = ctx.query_id, item = ctx.item_id, attempt = attempts, error = %e, "retrying");
                    std::thread::sleep(self.backoff * 2u32.saturating_pow(attempts - 1));
                }
            }
        }
    }
}
