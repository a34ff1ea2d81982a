//! Session-oriented HTTP service for interactive forecast correction:
//! upload, optimize with live episode events, steer with feedback, then
//! finalize once against the held-out test split.

mod api;
mod app;
mod config;
mod error;
mod llm;
mod session;
mod store;

use std::future::{Future, IntoFuture};
use std::time::Duration;

pub use api::router;
pub use app::AppState;
pub use config::{ConfigError, ServiceConfig};
pub use error::ApiError;
pub use llm::HttpTransport;
pub use session::{SessionDoc, SessionState};

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("cannot listen on {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot open store: {0}")]
    Store(#[source] std::io::Error),
    #[error("server error: {0}")]
    Io(#[from] std::io::Error),
}

/// Grace period for open connections (event streams) after shutdown starts.
const DRAIN: Duration = Duration::from_secs(5);

/// Binds, restores sessions and serves until `shutdown` resolves.
pub async fn serve<F>(cfg: ServiceConfig, shutdown: F) -> Result<(), ServeError>
where
    F: Future<Output = ()> + Send + 'static,
{
    let listener = tokio::net::TcpListener::bind(&cfg.listen)
        .await
        .map_err(|source| ServeError::Bind {
            addr: cfg.listen.clone(),
            source,
        })?;
    let state = AppState::open(cfg).await.map_err(ServeError::Store)?;
    serve_on(listener, state, shutdown).await
}

pub async fn serve_on<F>(listener: tokio::net::TcpListener, state: AppState, shutdown: F) -> Result<(), ServeError>
where
    F: Future<Output = ()> + Send + 'static,
{
    if let Ok(addr) = listener.local_addr() {
        log::info!("listening on {addr}");
    }
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let signal = async move {
        shutdown.await;
        let _ = tx.send(());
    };
    let server = axum::serve(listener, router(state))
        .with_graceful_shutdown(signal)
        .into_future();
    tokio::select! {
        r = server => r.map_err(ServeError::Io),
        _ = async {
            if rx.await.is_ok() {
                tokio::time::sleep(DRAIN).await;
            } else {
                std::future::pending::<()>().await;
            }
        } => Ok(()),
    }
}
