use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{ChatMessage, ChatProvider, Completion, ProviderError};

/// One canned response, optionally gated on a prompt substring. An entry
/// with `fail` set replays a transport failure instead of returning text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub when: Option<String>,
    #[serde(default)]
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail: Option<String>,
}

/// Ordered responses. On disk this is TOML:
///
/// ~~~toml
/// [[response]]
/// text = "ego_speed / speed_max"
///
/// [[response]]
/// when = "improve"
/// text = """
/// ```
/// 0.5
/// ```
/// """
/// ~~~
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    #[serde(rename = "response", default)]
    pub responses: Vec<MockEntry>,
}

impl MockScript {
    pub fn new<S: Into<String>>(texts: impl IntoIterator<Item = S>) -> Self {
        Self {
            responses: texts
                .into_iter()
                .map(|t| MockEntry {
                    when: None,
                    text: t.into(),
                    fail: None,
                })
                .collect(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, ProviderError> {
        toml::from_str(text).map_err(|e| ProviderError::MockScript(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ProviderError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ProviderError::MockScript(format!("reading {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("mock script serializes")
    }
}

struct MockState {
    used: Vec<bool>,
    calls: usize,
}

/// Replays a [`MockScript`]. Each call consumes the earliest unused entry
/// whose `when` substring (if any) occurs in the prompt.
pub struct MockProvider {
    script: MockScript,
    state: Mutex<MockState>,
}

impl MockProvider {
    pub fn new(script: MockScript) -> Self {
        let used = vec![false; script.responses.len()];
        Self {
            script,
            state: Mutex::new(MockState { used, calls: 0 }),
        }
    }

    /// Calls made so far, including failed ones.
    pub fn calls(&self) -> usize {
        self.state.lock().unwrap().calls
    }

    pub fn remaining(&self) -> usize {
        self.state.lock().unwrap().used.iter().filter(|u| !**u).count()
    }
}

impl ChatProvider for MockProvider {
    fn complete(&self, messages: &[ChatMessage], _temperature: f64) -> Result<Completion, ProviderError> {
        let mut state = self.state.lock().unwrap();
        state.calls += 1;
        let matches = |entry: &MockEntry| match &entry.when {
            None => true,
            Some(needle) => messages.iter().any(|m| m.content.contains(needle.as_str())),
        };
        let pick = (0..self.script.responses.len()).find(|&i| !state.used[i] && matches(&self.script.responses[i]));
        match pick {
            Some(i) => {
                state.used[i] = true;
                if let Some(reason) = &self.script.responses[i].fail {
                    return Err(ProviderError::Transport(reason.clone()));
                }
                Ok(Completion {
                    text: self.script.responses[i].text.clone(),
                    retries: 0,
                    latency: Duration::ZERO,
                })
            }
            None => Err(ProviderError::MockExhausted { calls: state.calls }),
        }
    }

    fn model(&self) -> &str {
        "mock"
    }
}
