//! HTTP + server-sent-event service over a market session.
//!
//! Participants enroll to take over a Type-2 crowdsourcee, follow their
//! offers on the event stream and answer them; the operator advances the
//! session step by step or lets a timed driver do it. All routes live under
//! `/api`; errors are JSON `{code, message}` with the codes of
//! [`ErrorCode`].

pub mod driver;
pub mod error;
pub mod routes;
pub mod state;

use std::net::SocketAddr;

use axum::routing::{get, post};
use axum::Router;

pub use driver::{spawn_driver, step, Step};
pub use error::{ApiError, ErrorCode};
pub use state::{ApiState, Credential, ServiceOptions};

pub fn router(state: ApiState) -> Router {
    Router::new()
        .route("/api/enroll", post(routes::enroll))
        .route("/api/offers", get(routes::offers))
        .route("/api/offers/{offer_id}/respond", post(routes::respond))
        .route("/api/preferences", get(routes::get_preferences).put(routes::put_preferences))
        .route("/api/events", get(routes::events))
        .route("/api/network", get(routes::network))
        .route("/api/dlmp", get(routes::dlmp))
        .route("/api/dlmp/{period}", get(routes::dlmp_period))
        .route("/api/status", get(routes::status))
        .route("/api/report", get(routes::report))
        .route("/api/ledger/blocks", get(routes::blocks))
        .route("/api/ledger/blocks/{height}", get(routes::block))
        .route("/api/ledger/state", get(routes::world_state))
        .route("/api/ledger/verify", get(routes::verify))
        .route("/api/operator/step", post(routes::operator_step))
        .with_state(state)
}

/// Serves the API on `addr` until the process ends.
pub async fn serve(state: ApiState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
