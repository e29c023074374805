use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lnlab_core::dataset::Image;
use lnlab_core::dedup::Verdict;
use lnlab_core::Error;
use serde::Deserialize;
use serde_json::json;
use tower_http::services::ServeDir;

use crate::session::ReviewSession;

pub const DEFAULT_PORT: u16 = 7878;

const PLACEHOLDER: &str = "<!doctype html>\n<title>pair review</title>\n<p>No review UI directory was configured. \
The JSON API is available under <code>/api/</code>.</p>\n";

pub struct AppState {
    pub session: ReviewSession,
    /// Images addressable by record id.
    pub images: HashMap<String, Image>,
    pub ui_dir: Option<PathBuf>,
}

#[derive(Deserialize)]
struct NextQuery {
    reviewer: Option<String>,
}

#[derive(Deserialize)]
struct DecisionBody {
    pair_id: String,
    verdict: String,
    #[serde(default)]
    reviewer: Option<String>,
}

fn client_error(message: impl Into<String>) -> Response {
    (StatusCode::BAD_REQUEST, Json(json!({ "error": message.into() }))).into_response()
}

async fn next_pair(State(state): State<Arc<AppState>>, Query(q): Query<NextQuery>) -> Response {
    let reviewer = q.reviewer.unwrap_or_else(|| "anonymous".to_string());
    match state.session.next_pair(&reviewer) {
        Some(p) => Json(json!({
            "pair_id": p.pair_id,
            "test_id": p.test_id,
            "train_id": p.train_id,
            "l2": p.l2_distance,
            "ssim": p.ssim,
        }))
        .into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn image(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    match state.images.get(&id) {
        Some(img) => ([(header::CONTENT_TYPE, "image/png")], img.to_png()).into_response(),
        None => StatusCode::NOT_FOUND.into_response(),
    }
}

async fn decision(State(state): State<Arc<AppState>>, body: Result<Json<DecisionBody>, JsonRejection>) -> Response {
    let Json(body) = match body {
        Ok(b) => b,
        Err(e) => return client_error(e.body_text()),
    };
    let verdict: Verdict = match body.verdict.parse() {
        Ok(v) => v,
        Err(e) => return client_error(e.to_string()),
    };
    let reviewer = body.reviewer.unwrap_or_else(|| "anonymous".to_string());
    match state.session.record_decision(&body.pair_id, verdict, &reviewer) {
        Ok(d) => (StatusCode::CREATED, Json(d)).into_response(),
        Err(e @ Error::UnknownPair(_)) => client_error(e.to_string()),
        Err(e) => {
            log::error!("failed to record decision: {e}");
            (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({ "error": e.to_string() }))).into_response()
        }
    }
}

async fn progress(State(state): State<Arc<AppState>>) -> Response {
    Json(state.session.progress()).into_response()
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/api/pairs/next", get(next_pair))
        .route("/api/images/{id}", get(image))
        .route("/api/decisions", post(decision))
        .route("/api/progress", get(progress));
    let api = match &state.ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(|| async { Html(PLACEHOLDER) })),
    };
    api.with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("review service listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
