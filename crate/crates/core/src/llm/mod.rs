//! Chat-completion providers (HTTP and scripted mock), prompt templates, and
//! extraction of reward source from model responses.

mod http;
mod mock;
mod prompt;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use http::HttpProvider;
pub use mock::{MockEntry, MockProvider, MockScript};
pub use prompt::{
    reflection_guidance, render_initial, render_reflection, EnvironmentDescription, PromptTemplate, TemplateError,
    DEFAULT_GUIDELINES, DEFAULT_TASK, GRAMMAR_REFERENCE, REDESIGN_BELOW,
};

pub const DEFAULT_API_KEY_VAR: &str = "REWARD_FORGE_API_KEY";

pub const SYSTEM_PROMPT: &str = "You write reward functions in a small expression language. \
Reply with one program in a fenced code block.";

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("environment variable {var} is not set; it must hold the provider API key")]
    MissingCredential { var: String },
    #[error("request timed out after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("provider returned HTTP {status}: {message}")]
    Status { status: u16, message: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("mock script exhausted after {calls} calls")]
    MockExhausted { calls: usize },
    #[error("invalid mock script: {0}")]
    MockScript(String),
}

impl ProviderError {
    /// Failures that further calls cannot fix: missing or rejected
    /// credentials, bad requests, and an exhausted or broken mock script.
    /// Timeouts, transport errors, rate limits and server errors are not.
    pub fn is_fatal(&self) -> bool {
        match self {
            ProviderError::MissingCredential { .. }
            | ProviderError::MockExhausted { .. }
            | ProviderError::MockScript(_) => true,
            ProviderError::Status { status, .. } => (400..500).contains(status) && *status != 408 && *status != 429,
            ProviderError::Timeout { .. } | ProviderError::Transport(_) | ProviderError::Malformed(_) => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExtractError {
    #[error("response is empty")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

/// A successful exchange.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    /// Attempts beyond the first.
    pub retries: u32,
    pub latency: Duration,
}

/// One chat round trip. Implementations must be safe to share across threads.
pub trait ChatProvider: Send + Sync {
    fn complete(&self, messages: &[ChatMessage], temperature: f64) -> Result<Completion, ProviderError>;

    /// Model identifier for logs.
    fn model(&self) -> &str;
}

/// Endpoint and sampling settings. Holds the name of the credential
/// variable, never the credential itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProviderConfig {
    /// Base URL; requests go to `{endpoint}/chat/completions`.
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub reflection_temperature: f64,
    pub max_tokens: u32,
    pub timeout_secs: f64,
    pub retry_limit: u32,
    /// First backoff delay; doubles on each retry.
    pub backoff_ms: u64,
    pub api_key_env: String,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1".into(),
            model: "gpt-4o".into(),
            temperature: 1.0,
            reflection_temperature: 0.7,
            max_tokens: 1024,
            timeout_secs: 60.0,
            retry_limit: 3,
            backoff_ms: 500,
            api_key_env: DEFAULT_API_KEY_VAR.into(),
        }
    }
}

impl ProviderConfig {
    /// Returns the offending field name and reason.
    pub fn validate(&self) -> Result<(), (&'static str, &'static str)> {
        if !(self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://")) {
            return Err(("endpoint", "must be an http(s) URL"));
        }
        if self.model.trim().is_empty() {
            return Err(("model", "must not be empty"));
        }
        for (field, t) in [
            ("temperature", self.temperature),
            ("reflection_temperature", self.reflection_temperature),
        ] {
            if !(0.0..=2.0).contains(&t) {
                return Err((field, "must be in [0, 2]"));
            }
        }
        if self.max_tokens == 0 {
            return Err(("max_tokens", "must be positive"));
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(("timeout_secs", "must be positive"));
        }
        if self.api_key_env.trim().is_empty() {
            return Err(("api_key_env", "must name an environment variable"));
        }
        Ok(())
    }
}

/// Lowercase hex SHA-256 of the concatenated message contents.
pub fn prompt_hash(messages: &[ChatMessage]) -> String {
    let mut hasher = Sha256::new();
    for m in messages {
        hasher.update(m.role.as_bytes());
        hasher.update([0]);
        hasher.update(m.content.as_bytes());
        hasher.update([0]);
    }
    hex::encode(hasher.finalize())
}

/// Reward source from a model response: the body of the first fenced code
/// block if there is one, else the whole response trimmed.
pub fn extract_reward_source(response: &str) -> Result<String, ExtractError> {
    let mut lines = response.lines();
    let mut in_block = None;
    for line in lines.by_ref() {
        if line.trim_start().starts_with("```") {
            in_block = Some(Vec::new());
            break;
        }
    }
    let source = match in_block {
        Some(mut body) => {
            for line in lines {
                if line.trim_start().starts_with("```") {
                    break;
                }
                body.push(line);
            }
            body.join("\n")
        }
        None => response.trim().to_string(),
    };
    if source.trim().is_empty() {
        return Err(ExtractError::Empty);
    }
    Ok(source)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extracts_fenced_block() {
        let text = "Here you go:\n```\nego_speed / speed_max\n```";
        assert_eq!(extract_reward_source(text).unwrap(), "ego_speed / speed_max");
    }

    #[test]
    fn unfenced_response_is_returned_trimmed() {
        assert_eq!(
            extract_reward_source("  0.5 * ego_speed \n").unwrap(),
            "0.5 * ego_speed"
        );
    }

    #[test]
    fn first_block_wins_and_content_is_untouched() {
        let text = "Intro.\n```dsl\n# keep me\n  let a = 1 in\n  a\n```\nThen an alternative:\n```\n2\n```\n";
        assert_eq!(extract_reward_source(text).unwrap(), "# keep me\n  let a = 1 in\n  a");
    }

    #[test]
    fn empty_is_an_error() {
        assert_eq!(extract_reward_source("   \n"), Err(ExtractError::Empty));
        assert_eq!(extract_reward_source("```\n```"), Err(ExtractError::Empty));
    }

    #[test]
    fn hash_depends_on_roles_and_content() {
        let a = [ChatMessage::system("x"), ChatMessage::user("y")];
        let b = [ChatMessage::system("xy"), ChatMessage::user("")];
        assert_ne!(prompt_hash(&a), prompt_hash(&b));
        assert_eq!(prompt_hash(&a).len(), 64);
    }

    #[test]
    fn default_config_is_valid() {
        assert!(ProviderConfig::default().validate().is_ok());
        let bad = ProviderConfig {
            endpoint: "ftp://x".into(),
            ..ProviderConfig::default()
        };
        assert_eq!(bad.validate().unwrap_err().0, "endpoint");
    }
}
