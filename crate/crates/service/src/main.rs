use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use drawgen_service::{AppState, ServiceConfig};
use tracing_subscriber::EnvFilter;

#[derive(Debug, Parser)]
#[command(name = "drawgen-service", about = "Chat-driven diagram generation over HTTP and SSE")]
struct Args {
    /// TOML config file. DRAWGEN_* environment variables override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    let args = Args::parse();
    let cfg = match ServiceConfig::load(args.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            tracing::error!("{e}");
            return ExitCode::from(2);
        }
    };
    let state = match AppState::new(&cfg) {
        Ok(s) => s,
        Err(e) => {
            tracing::error!("cannot start: {e}");
            return ExitCode::from(2);
        }
    };
    let listener = match tokio::net::TcpListener::bind(cfg.bind).await {
        Ok(l) => l,
        Err(e) => {
            tracing::error!("cannot bind {}: {e}", cfg.bind);
            return ExitCode::from(2);
        }
    };
    tracing::info!(addr = %cfg.bind, sessions = state.session_ids().len(), "listening");
    let server = drawgen_service::serve(listener, state, cfg.ui_origin.as_deref());
    tokio::select! {
        r = server => {
            if let Err(e) = r {
                tracing::error!("server error: {e}");
                return ExitCode::FAILURE;
            }
        }
        _ = tokio::signal::ctrl_c() => tracing::info!("shutting down"),
    }
    ExitCode::SUCCESS
}
