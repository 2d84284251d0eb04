use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use drawgen_core::history::{HistoryError, HistoryStore, Origin, MANIFEST_FILE};
use drawgen_core::layout::LayoutConfig;
use drawgen_core::pipeline::PipelineConfig;
use drawgen_core::prompt::{ChatTurn, PromptConfig};
use drawgen_core::provider::{HttpProvider, Provider, ProviderConfig, ProviderError, ProviderKind};
use drawgen_core::Diagram;
use serde::Serialize;
use tokio_util::sync::CancellationToken;

use crate::config::ServiceConfig;

pub const EMPTY_DIAGRAM_SUMMARY: &str = "new empty diagram";

#[derive(Debug, thiserror::Error)]
pub enum StateError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("session limit of {0} reached")]
    SessionLimit(usize),
    #[error("a generation is already running for this session")]
    Busy,
    #[error(transparent)]
    History(#[from] HistoryError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("invalid layout config: {0}")]
    Layout(String),
}

#[derive(Debug)]
struct SessionInner {
    history: HistoryStore,
    chat: Vec<ChatTurn>,
    active: Option<CancellationToken>,
}

#[derive(Debug)]
pub struct Session {
    pub id: String,
    inner: Mutex<SessionInner>,
}

/// Clears the session's active generation when dropped.
#[derive(Debug)]
pub struct ActiveGuard(Arc<Session>);

impl Drop for ActiveGuard {
    fn drop(&mut self) {
        self.0.lock().active = None;
    }
}

impl Session {
    fn lock(&self) -> MutexGuard<'_, SessionInner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Marks a generation as running. Fails if one already is.
    pub fn begin(self: &Arc<Self>, token: CancellationToken) -> Result<ActiveGuard, StateError> {
        let mut inner = self.lock();
        if inner.active.is_some() {
            return Err(StateError::Busy);
        }
        inner.active = Some(token);
        Ok(ActiveGuard(self.clone()))
    }

    /// Cancels the running generation; false if there is none.
    pub fn stop(&self) -> bool {
        match &self.lock().active {
            Some(t) => {
                t.cancel();
                true
            }
            None => false,
        }
    }

    pub fn is_generating(&self) -> bool {
        self.lock().active.is_some()
    }

    pub fn chat_history(&self) -> Vec<ChatTurn> {
        self.lock().chat.clone()
    }

    pub fn push_turns(&self, turns: impl IntoIterator<Item = ChatTurn>) {
        self.lock().chat.extend(turns);
    }

    pub fn with_history<T>(&self, f: impl FnOnce(&mut HistoryStore) -> T) -> T {
        f(&mut self.lock().history)
    }

    pub fn head_diagram(&self) -> Option<Diagram> {
        self.with_history(|h| h.head_diagram())
    }
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub provider_config: ProviderConfig,
    pub layout: LayoutConfig,
    api_key: Option<String>,
    provider: Provider,
}

/// What GET /api/settings shows. Key material is never included.
#[derive(Debug, Clone, Serialize)]
pub struct SettingsView {
    pub provider: ProviderConfig,
    pub layout: LayoutConfig,
    pub api_key_set: bool,
}

impl Settings {
    pub fn view(&self) -> SettingsView {
        SettingsView {
            provider: self.provider_config.clone(),
            layout: self.layout.clone(),
            api_key_set: self.api_key.is_some(),
        }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        let mut cfg = PipelineConfig::new(self.provider_config.clone());
        cfg.prompt = PromptConfig {
            alignment: self.layout.orientation,
            ..PromptConfig::default()
        };
        cfg.layout = self.layout.clone();
        cfg
    }

    pub fn provider(&self) -> Provider {
        self.provider.clone()
    }
}

fn build_provider(cfg: &ProviderConfig, api_key: Option<&str>) -> Result<Provider, ProviderError> {
    match (cfg.kind, api_key) {
        (ProviderKind::Http, Some(key)) => {
            cfg.validate()?;
            Ok(Provider::Http(HttpProvider::new()?.with_api_key(key)))
        }
        _ => Provider::from_config(cfg),
    }
}

#[derive(Debug)]
struct Shared {
    sessions: RwLock<HashMap<String, Arc<Session>>>,
    settings: RwLock<Settings>,
    max_sessions: usize,
    data_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct AppState(Arc<Shared>);

fn new_session_id() -> String {
    format!("{:032x}", rand::random::<u128>())
}

fn is_session_id(s: &str) -> bool {
    s.len() == 32 && s.bytes().all(|b| b.is_ascii_hexdigit())
}

impl AppState {
    /// Builds the provider from `cfg` and reloads persisted sessions.
    pub fn new(cfg: &ServiceConfig) -> Result<Self, StateError> {
        let provider = build_provider(&cfg.provider, None)?;
        Self::with_provider(cfg, provider)
    }

    /// Uses `provider` as given; tests hand in a mock they keep a handle to.
    pub fn with_provider(cfg: &ServiceConfig, provider: Provider) -> Result<Self, StateError> {
        cfg.provider.validate()?;
        cfg.layout.validate().map_err(|e| StateError::Layout(e.to_string()))?;
        let settings = Settings {
            provider_config: cfg.provider.clone(),
            layout: cfg.layout.clone(),
            api_key: None,
            provider,
        };
        let state = AppState(Arc::new(Shared {
            sessions: RwLock::new(HashMap::new()),
            settings: RwLock::new(settings),
            max_sessions: cfg.max_sessions,
            data_dir: cfg.data_dir.clone(),
        }));
        state.reload()?;
        Ok(state)
    }

    fn sessions_dir(&self) -> Option<PathBuf> {
        self.0.data_dir.as_ref().map(|d| d.join("sessions"))
    }

    fn reload(&self) -> Result<(), StateError> {
        let Some(dir) = self.sessions_dir() else {
            return Ok(());
        };
        let Ok(read) = std::fs::read_dir(&dir) else {
            return Ok(());
        };
        let mut sessions = self.0.sessions.write().unwrap();
        for entry in read.flatten() {
            let id = entry.file_name().to_string_lossy().into_owned();
            if !is_session_id(&id) || !entry.path().join(MANIFEST_FILE).is_file() {
                continue;
            }
            let history = HistoryStore::open(&entry.path())?;
            sessions.insert(id.clone(), Arc::new(Session::from_history(id, history)));
        }
        Ok(())
    }

    pub fn create_session(&self) -> Result<Arc<Session>, StateError> {
        let mut sessions = self.0.sessions.write().unwrap();
        if sessions.len() >= self.0.max_sessions {
            return Err(StateError::SessionLimit(self.0.max_sessions));
        }
        let mut id = new_session_id();
        while sessions.contains_key(&id) {
            id = new_session_id();
        }
        let mut history = match self.sessions_dir() {
            Some(d) => HistoryStore::open(&d.join(&id))?,
            None => HistoryStore::new(),
        };
        history.append(&Diagram::new_empty("Page-1"), EMPTY_DIAGRAM_SUMMARY, Origin::Import)?;
        let session = Arc::new(Session::from_history(id.clone(), history));
        sessions.insert(id, session.clone());
        Ok(session)
    }

    pub fn session(&self, id: &str) -> Result<Arc<Session>, StateError> {
        self.0
            .sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| StateError::UnknownSession(id.to_string()))
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.0.sessions.read().unwrap().keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn settings(&self) -> Settings {
        self.0.settings.read().unwrap().clone()
    }

    /// Applies new settings. The provider is rebuilt only when the backend
    /// itself changes, so a mock keeps its position in the script.
    pub fn update_settings(
        &self,
        provider_config: ProviderConfig,
        layout: LayoutConfig,
        api_key: Option<String>,
    ) -> Result<SettingsView, StateError> {
        provider_config.validate()?;
        layout.validate().map_err(|e| StateError::Layout(e.to_string()))?;
        let mut settings = self.0.settings.write().unwrap();
        let key = match api_key {
            Some(k) if k.is_empty() => None,
            Some(k) => Some(k),
            None => settings.api_key.clone(),
        };
        let old = &settings.provider_config;
        let backend_changed = old.kind != provider_config.kind
            || old.script_path != provider_config.script_path
            || key != settings.api_key;
        if backend_changed {
            settings.provider = build_provider(&provider_config, key.as_deref())?;
        }
        settings.provider_config = provider_config;
        settings.layout = layout;
        settings.api_key = key;
        Ok(settings.view())
    }
}

impl Session {
    fn from_history(id: String, history: HistoryStore) -> Self {
        Session {
            id,
            inner: Mutex::new(SessionInner {
                history,
                chat: Vec::new(),
                active: None,
            }),
        }
    }
}
