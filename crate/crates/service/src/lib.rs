//! HTTP service: sessions, streamed chat rounds, history and settings.
//!
//! SSE events on `POST /api/sessions/{id}/chat`, in order:
//! `text`* (JSON string fragment), `phase`? (`visual`), `repair`? (JSON
//! issue list), then `diagram` (XML) or `error` (JSON), then `done` (JSON).

pub mod api;
pub mod config;
pub mod state;

pub use api::{router, ApiError, RoundStatus};
pub use config::{ConfigError, ServiceConfig};
pub use state::{AppState, Session, SettingsView, StateError};

/// Serves `state` on `listener` until the future is dropped or fails.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState, ui_origin: Option<&str>) -> std::io::Result<()> {
    axum::serve(listener, router(state, ui_origin)).await
}
