//! HTTP service for human receivers: sessions of sketch games, durable answers
//! and per-session summaries.

pub mod api;
pub mod error;
pub mod source;
pub mod store;

use std::net::SocketAddr;

pub use api::{router, AppState};
pub use error::{Result, ServiceError};
pub use source::{CheckpointSource, GameSource};
pub use store::{Store, HUMAN_K, SESSION_GAMES};

/// Serves `state` on `addr` until Ctrl-C.
pub async fn serve(state: AppState, addr: SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
