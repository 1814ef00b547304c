//! Chat-completion backend over HTTP.
//!
//! Speaks the widely used `{"model", "messages", "temperature", "max_tokens"}`
//! request body and reads `choices[0].message.content` plus optional `usage`.
//! Rate limits (429), server errors (5xx), request timeouts (408) and
//! transport failures are retried with exponential backoff.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{ChatBackend, ChatRequest, ChatResponse, LlmError, Usage};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 4,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Sleep durations before each retry: `base * 2^n`, capped.
    pub fn delays(&self) -> impl Iterator<Item = Duration> {
        let policy = *self;
        (0..policy.max_retries).map(move |n| {
            let factor = 1u32.checked_shl(n).unwrap_or(u32::MAX);
            policy
                .base_delay
                .checked_mul(factor)
                .unwrap_or(policy.max_delay)
                .min(policy.max_delay)
        })
    }

    pub fn is_retryable_status(status: u16) -> bool {
        status == 408 || status == 429 || (500..=599).contains(&status)
    }
}

fn is_retryable_transport(err: &ureq::Error) -> bool {
    matches!(
        err,
        ureq::Error::Timeout(_) | ureq::Error::Io(_) | ureq::Error::ConnectionFailed | ureq::Error::Protocol(_)
    )
}

#[derive(Deserialize)]
struct CompletionBody {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<UsageBody>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct UsageBody {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

pub struct RemoteBackend {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    wire_log: Option<Mutex<BufWriter<File>>>,
}

impl RemoteBackend {
    pub fn new(endpoint: &str, model: &str, api_key: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        RemoteBackend {
            agent,
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            api_key,
            retry: RetryPolicy::default(),
            wire_log: None,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Append every request and response body to `path` as JSON lines.
    /// The API key travels in a header and never reaches the log.
    pub fn with_wire_log(mut self, path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        self.wire_log = Some(Mutex::new(BufWriter::new(file)));
        Ok(self)
    }

    fn log_wire(&self, entry: serde_json::Value) {
        if let Some(log) = &self.wire_log {
            let mut w = log.lock().expect("wire log lock");
            let res = writeln!(w, "{entry}").and_then(|_| w.flush());
            if let Err(e) = res {
                log::warn!("cannot append to wire log: {e}");
            }
        }
    }

    /// One HTTP exchange. `Err((retryable, error))` on failure.
    fn exchange(&self, body: &serde_json::Value) -> Result<(u16, String), (bool, LlmError)> {
        let mut req = self.agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| {
            (
                is_retryable_transport(&e),
                LlmError::Backend {
                    status: None,
                    body: e.to_string(),
                },
            )
        })?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| {
            (
                true,
                LlmError::Backend {
                    status: Some(status),
                    body: e.to_string(),
                },
            )
        })?;
        Ok((status, text))
    }
}

impl ChatBackend for RemoteBackend {
    fn name(&self) -> &str {
        &self.model
    }

    fn send(&self, request: &ChatRequest, prompt: &str) -> Result<ChatResponse, LlmError> {
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let mut delays = self.retry.delays();
        let mut retries = 0u32;
        loop {
            let outcome = self.exchange(&body);
            let err = match outcome {
                Ok((status, text)) => {
                    self.log_wire(json!({"template": request.template, "request": body, "status": status, "response": text}));
                    if status == 200 {
                        let parsed: CompletionBody = serde_json::from_str(&text).map_err(|e| LlmError::Backend {
                            status: Some(status),
                            body: format!("unreadable completion ({e}): {text}"),
                        })?;
                        let usage = parsed.usage.map_or(Usage::default(), |u| Usage {
                            prompt_tokens: u.prompt_tokens,
                            completion_tokens: u.completion_tokens,
                        });
                        let text = parsed
                            .choices
                            .into_iter()
                            .next()
                            .and_then(|c| c.message.content)
                            .unwrap_or_default();
                        return Ok(ChatResponse {
                            text,
                            usage,
                            backend: self.model.clone(),
                            retries,
                        });
                    }
                    (
                        RetryPolicy::is_retryable_status(status),
                        LlmError::Backend {
                            status: Some(status),
                            body: text,
                        },
                    )
                }
                Err(e) => {
                    self.log_wire(json!({"template": request.template, "request": body, "error": e.1.to_string()}));
                    e
                }
            };
            match (err, delays.next()) {
                ((true, e), Some(delay)) => {
                    log::warn!("{} call failed ({e}); retry {} in {delay:?}", request.template, retries + 1);
                    std::thread::sleep(delay);
                    retries += 1;
                }
                ((_, e), _) => return Err(e),
            }
        }
    }
}
