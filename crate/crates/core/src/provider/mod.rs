//! Chat-completion backends behind one streaming interface.
//!
//! [`Provider::Http`] speaks a JSON request / server-sent-events response
//! protocol; [`Provider::Mock`] replays a TOML script and is what the tests,
//! the benchmark and offline runs use.

use std::path::PathBuf;
use std::pin::Pin;
use std::sync::Arc;

use futures::Stream;
use serde::{Deserialize, Serialize};

use crate::prompt::PromptBundle;

pub mod http;
pub mod mock;
pub mod sse;

pub use http::HttpProvider;
pub use mock::{MockProvider, MockScript, RecordedRequest, ScriptError};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Http,
    #[default]
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub endpoint_url: Option<String>,
    /// Name of the environment variable holding the API key. The key itself
    /// is never stored.
    pub api_key_env_var_name: Option<String>,
    pub model_id: String,
    pub max_output_tokens: u32,
    pub temperature: f64,
    pub script_path: Option<PathBuf>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Mock,
            endpoint_url: None,
            api_key_env_var_name: None,
            model_id: "default".to_string(),
            max_output_tokens: 4096,
            temperature: 0.2,
            script_path: None,
        }
    }
}

impl ProviderConfig {
    pub fn mock(script_path: impl Into<PathBuf>) -> Self {
        Self {
            script_path: Some(script_path.into()),
            ..Self::default()
        }
    }

    pub fn http(endpoint_url: impl Into<String>, api_key_env_var_name: impl Into<String>, model_id: impl Into<String>) -> Self {
        Self {
            kind: ProviderKind::Http,
            endpoint_url: Some(endpoint_url.into()),
            api_key_env_var_name: Some(api_key_env_var_name.into()),
            model_id: model_id.into(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        let bad = |msg: String| Err(ProviderError::Config(msg));
        if !(0.0..=1.0).contains(&self.temperature) {
            return bad(format!("temperature must be in [0, 1], got {}", self.temperature));
        }
        if self.max_output_tokens == 0 {
            return bad("max_output_tokens must be positive".into());
        }
        if self.model_id.trim().is_empty() {
            return bad("model_id must not be empty".into());
        }
        match self.kind {
            ProviderKind::Http => {
                match self.endpoint_url.as_deref() {
                    Some(u) if u.starts_with("http://") || u.starts_with("https://") => {}
                    Some(u) => return bad(format!("endpoint_url must be an http(s) URL, got {u:?}")),
                    None => return bad("http provider requires endpoint_url".into()),
                }
                if self.api_key_env_var_name.as_deref().is_none_or(|n| n.trim().is_empty()) {
                    return bad("http provider requires api_key_env_var_name".into());
                }
            }
            ProviderKind::Mock => {
                if self.script_path.is_none() {
                    return bad("mock provider requires script_path".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl std::ops::AddAssign for Usage {
    fn add_assign(&mut self, rhs: Self) {
        self.input_tokens += rhs.input_tokens;
        self.output_tokens += rhs.output_tokens;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenChunk {
    pub text: String,
    pub is_final: bool,
    /// Present only on the final chunk.
    pub usage: Option<Usage>,
}

impl TokenChunk {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            is_final: false,
            usage: None,
        }
    }

    pub fn last(text: impl Into<String>, usage: Usage) -> Self {
        Self {
            text: text.into(),
            is_final: true,
            usage: Some(usage),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[serde(tag = "kind", content = "message", rename_all = "snake_case")]
pub enum ProviderError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("generation cancelled")]
    Cancelled,
    #[error("provider configuration error: {0}")]
    Config(String),
}

impl ProviderError {
    pub fn kind(&self) -> &'static str {
        match self {
            ProviderError::Auth(_) => "auth",
            ProviderError::Transport(_) => "transport",
            ProviderError::Protocol(_) => "protocol",
            ProviderError::Cancelled => "cancelled",
            ProviderError::Config(_) => "config",
        }
    }
}

pub type ChunkStream = Pin<Box<dyn Stream<Item = Result<TokenChunk, ProviderError>> + Send>>;

/// A backend handle. Cloning shares state (the mock's consumed entries and
/// request log).
#[derive(Debug, Clone)]
pub enum Provider {
    Http(HttpProvider),
    Mock(Arc<MockProvider>),
}

impl Provider {
    pub fn from_config(cfg: &ProviderConfig) -> Result<Self, ProviderError> {
        cfg.validate()?;
        match cfg.kind {
            ProviderKind::Http => Ok(Provider::Http(HttpProvider::new()?)),
            ProviderKind::Mock => {
                let path = cfg.script_path.as_deref().unwrap_or_else(|| std::path::Path::new(""));
                let script = MockScript::load(path).map_err(|e| ProviderError::Config(e.to_string()))?;
                Ok(Provider::Mock(Arc::new(MockProvider::new(script))))
            }
        }
    }

    pub fn mock(&self) -> Option<&Arc<MockProvider>> {
        match self {
            Provider::Mock(m) => Some(m),
            Provider::Http(_) => None,
        }
    }

    /// Starts one completion. Dropping the returned stream cancels it.
    pub async fn send(&self, cfg: &ProviderConfig, bundle: &PromptBundle) -> Result<ChunkStream, ProviderError> {
        match self {
            Provider::Http(h) => h.send(cfg, bundle).await,
            Provider::Mock(m) => m.send(cfg, bundle),
        }
    }
}
