use std::fmt;
use std::time::{Duration, Instant};

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::Serialize;
use serde_json::Value;

use super::{ChatMessage, ChatProvider, Completion, ProviderConfig, ProviderError};

const MAX_BACKOFF: Duration = Duration::from_secs(30);

struct ApiKey(String);

impl fmt::Debug for ApiKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ApiKey(<redacted>)")
    }
}

/// OpenAI-style `/chat/completions` client with retry on timeouts, 429 and
/// 5xx responses.
#[derive(Debug)]
pub struct HttpProvider {
    config: ProviderConfig,
    url: String,
    key: ApiKey,
    client: Client,
}

#[derive(Serialize)]
struct RequestBody<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
}

enum Attempt {
    Done(String),
    Retry(ProviderError),
    Fatal(ProviderError),
}

impl HttpProvider {
    /// Reads the credential from `config.api_key_env`.
    pub fn from_env(config: &ProviderConfig) -> Result<Self, ProviderError> {
        let key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| ProviderError::MissingCredential {
                var: config.api_key_env.clone(),
            })?;
        Self::with_key(config, key)
    }

    pub fn with_key(config: &ProviderConfig, key: String) -> Result<Self, ProviderError> {
        let client = Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        Ok(Self {
            url: format!("{}/chat/completions", config.endpoint.trim_end_matches('/')),
            config: config.clone(),
            key: ApiKey(key),
            client,
        })
    }

    fn attempt(&self, body: &RequestBody<'_>) -> Attempt {
        let response = match self.client.post(&self.url).bearer_auth(&self.key.0).json(body).send() {
            Ok(r) => r,
            Err(e) if e.is_timeout() => return Attempt::Retry(ProviderError::Timeout { attempts: 1 }),
            Err(e) if e.is_connect() => return Attempt::Retry(ProviderError::Transport(e.without_url().to_string())),
            Err(e) => return Attempt::Fatal(ProviderError::Transport(e.without_url().to_string())),
        };
        let status = response.status();
        let text = match response.text() {
            Ok(t) => t,
            Err(e) if e.is_timeout() => return Attempt::Retry(ProviderError::Timeout { attempts: 1 }),
            Err(e) => return Attempt::Retry(ProviderError::Transport(e.without_url().to_string())),
        };
        if !status.is_success() {
            let error = ProviderError::Status {
                status: status.as_u16(),
                message: error_message(&text),
            };
            return if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
                Attempt::Retry(error)
            } else {
                Attempt::Fatal(error)
            };
        }
        match parse_content(&text) {
            Ok(content) => Attempt::Done(content),
            Err(e) => Attempt::Fatal(e),
        }
    }
}

impl ChatProvider for HttpProvider {
    fn complete(&self, messages: &[ChatMessage], temperature: f64) -> Result<Completion, ProviderError> {
        let body = RequestBody {
            model: &self.config.model,
            messages,
            temperature,
            max_tokens: self.config.max_tokens,
        };
        let started = Instant::now();
        let mut retries = 0;
        loop {
            match self.attempt(&body) {
                Attempt::Done(text) => {
                    return Ok(Completion {
                        text,
                        retries,
                        latency: started.elapsed(),
                    })
                }
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(e) => {
                    if retries >= self.config.retry_limit {
                        return Err(match e {
                            ProviderError::Timeout { .. } => ProviderError::Timeout { attempts: retries + 1 },
                            other => other,
                        });
                    }
                    std::thread::sleep(backoff(self.config.backoff_ms, retries));
                    retries += 1;
                }
            }
        }
    }

    fn model(&self) -> &str {
        &self.config.model
    }
}

/// Delay before retry number `retry + 1`.
pub(crate) fn backoff(base_ms: u64, retry: u32) -> Duration {
    let factor = 1u64.checked_shl(retry.min(32)).unwrap_or(u64::MAX);
    Duration::from_millis(base_ms.saturating_mul(factor)).min(MAX_BACKOFF)
}

fn error_message(body: &str) -> String {
    serde_json::from_str::<Value>(body)
        .ok()
        .and_then(|v| v.pointer("/error/message").and_then(Value::as_str).map(str::to_string))
        .unwrap_or_else(|| body.chars().take(500).collect())
}

fn parse_content(body: &str) -> Result<String, ProviderError> {
    let value: Value = serde_json::from_str(body).map_err(|e| ProviderError::Malformed(e.to_string()))?;
    value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| ProviderError::Malformed("missing choices[0].message.content".into()))
}
