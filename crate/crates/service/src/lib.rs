//! HTTP facade over loaded embedding volumes and 3D maps.
//!
//! Routes: `GET /session`, `POST /load`, `POST /query`, `POST /segment`,
//! `GET /image/{id}`. Requests read an immutable session snapshot; loads build a
//! new snapshot and swap it in.

pub mod embedder;
pub mod error;
pub mod handlers;
pub mod routes;
pub mod session;

use std::net::SocketAddr;

pub use embedder::{embed_prompt, EmbedderConfig};
pub use error::ServiceError;
pub use handlers::{
    handle_query, handle_segment, query_with_vectors, QueryArtifact, QueryRequest, SegmentArtifact, SegmentMode,
    SegmentRequest,
};
pub use routes::{router, AppState};
pub use session::{LoadRequest, Session, SessionStore};

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state)).await
}
