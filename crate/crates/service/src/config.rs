//! Service configuration: a TOML file, then `DRAWGEN_*` environment overrides.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use drawgen_core::layout::LayoutConfig;
use drawgen_core::provider::{ProviderConfig, ProviderKind};
use serde::{Deserialize, Serialize};

pub const DEFAULT_MAX_SESSIONS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    /// Per-session history lives under `<data_dir>/sessions/<id>`. Without a
    /// data directory everything is in memory.
    pub data_dir: Option<PathBuf>,
    pub max_sessions: usize,
    /// Origin allowed for cross-origin browser requests.
    pub ui_origin: Option<String>,
    pub provider: ProviderConfig,
    pub layout: LayoutConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 8787)),
            data_dir: None,
            max_sessions: DEFAULT_MAX_SESSIONS,
            ui_origin: None,
            provider: ProviderConfig::default(),
            layout: LayoutConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid value for {var}: {message}")]
    Env { var: &'static str, message: String },
}

impl ServiceConfig {
    /// Reads `path` (if any) and applies the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.to_path_buf(),
                    source,
                })?;
                let mut cfg: ServiceConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
                    path: p.to_path_buf(),
                    message: e.to_string(),
                })?;
                // A relative mock script is relative to the config file.
                if let (Some(script), Some(dir)) = (cfg.provider.script_path.as_mut(), p.parent()) {
                    if script.is_relative() {
                        *script = dir.join(&*script);
                    }
                }
                cfg
            }
            None => ServiceConfig::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(v) = get("DRAWGEN_BIND") {
            self.bind = v.parse().map_err(|e: std::net::AddrParseError| ConfigError::Env {
                var: "DRAWGEN_BIND",
                message: e.to_string(),
            })?;
        }
        if let Some(v) = get("DRAWGEN_DATA_DIR") {
            self.data_dir = Some(PathBuf::from(v));
        }
        if let Some(v) = get("DRAWGEN_MAX_SESSIONS") {
            self.max_sessions = v.parse().map_err(|_| ConfigError::Env {
                var: "DRAWGEN_MAX_SESSIONS",
                message: format!("expected a positive integer, got {v:?}"),
            })?;
        }
        if let Some(v) = get("DRAWGEN_UI_ORIGIN") {
            self.ui_origin = Some(v);
        }
        if let Some(v) = get("DRAWGEN_PROVIDER") {
            self.provider.kind = match v.as_str() {
                "http" => ProviderKind::Http,
                "mock" => ProviderKind::Mock,
                _ => {
                    return Err(ConfigError::Env {
                        var: "DRAWGEN_PROVIDER",
                        message: format!("expected http or mock, got {v:?}"),
                    })
                }
            };
        }
        if let Some(v) = get("DRAWGEN_ENDPOINT_URL") {
            self.provider.endpoint_url = Some(v);
        }
        if let Some(v) = get("DRAWGEN_API_KEY_ENV") {
            self.provider.api_key_env_var_name = Some(v);
        }
        if let Some(v) = get("DRAWGEN_MODEL") {
            self.provider.model_id = v;
        }
        if let Some(v) = get("DRAWGEN_MOCK_SCRIPT") {
            self.provider.script_path = Some(PathBuf::from(v));
        }
        Ok(())
    }
}
