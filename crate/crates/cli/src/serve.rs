//! HTTP front end: `POST /v1/price`, `GET /v1/healthz`, `GET /v1/index/info`.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use pricer_core::catalog::Listing;
use pricer_core::pricer::{PriceSuggestion, Pricer, SuggestionStatus};
use pricer_core::vecindex::{build_index, IndexSnapshot, Refresher, VecIndexError};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::Config;
use crate::{io, pricer_from};

/// Listing fields the pipeline reads. Marketplace metadata is optional since
/// a seller asking for a price has not published yet.
#[derive(Debug, Deserialize)]
pub struct PriceRequest {
    #[serde(default)]
    pub id: Option<String>,
    pub title: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub condition: String,
    #[serde(default)]
    pub category: String,
    #[serde(default)]
    pub segment: Option<String>,
}

impl PriceRequest {
    fn into_listing(self) -> Listing {
        Listing {
            id: self.id.unwrap_or_else(|| "request".into()),
            title: self.title,
            description: self.description,
            condition: self.condition,
            category: self.category,
            price: 0.0,
            listed_at: Utc::now(),
            click_count: 0,
            flags: Default::default(),
            segment: self.segment,
        }
    }
}

#[derive(Debug, Serialize)]
struct IndexInfo {
    entries: usize,
    dimension: usize,
    built_at: DateTime<Utc>,
    age_secs: i64,
    has_graph: bool,
    model_id: String,
}

type AppState = Arc<Pricer>;

pub fn router(pricer: Pricer) -> Router {
    Router::new()
        .route("/v1/price", post(price))
        .route("/v1/healthz", get(healthz))
        .route("/v1/index/info", get(index_info))
        .with_state(Arc::new(pricer))
}

async fn price(State(pricer): State<AppState>, Json(req): Json<PriceRequest>) -> (StatusCode, Json<Value>) {
    let listing = req.into_listing();
    // The pipeline blocks on HTTP calls to the model endpoint.
    let joined = tokio::task::spawn_blocking(move || pricer.suggest_price(&listing)).await;
    match joined {
        Ok(s) => (status_code(&s), Json(json!(s))),
        Err(e) => (
            StatusCode::INTERNAL_SERVER_ERROR,
            Json(json!({ "status": "error", "error": e.to_string() })),
        ),
    }
}

/// Priced and abstained answers are successful responses; a failed pipeline
/// run means an upstream (embedding or model) call misbehaved.
fn status_code(s: &PriceSuggestion) -> StatusCode {
    match s.status {
        SuggestionStatus::Error => StatusCode::BAD_GATEWAY,
        _ => StatusCode::OK,
    }
}

async fn healthz() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

async fn index_info(State(pricer): State<AppState>) -> Json<IndexInfo> {
    let snapshot = pricer.store().current();
    Json(IndexInfo {
        entries: snapshot.len(),
        dimension: snapshot.dimension(),
        built_at: snapshot.built_at(),
        age_secs: (Utc::now() - snapshot.built_at()).num_seconds(),
        has_graph: snapshot.graph().is_some(),
        model_id: pricer.gateway().model_id().to_string(),
    })
}

pub fn run(cfg: Config, snapshot: IndexSnapshot, pool: Option<PathBuf>, addr: SocketAddr, theta: Option<f64>) -> Result<()> {
    let graph = snapshot.graph().map(|g| g.params());
    // Clients with blocking internals must be built outside the runtime.
    let pricer = pricer_from(&cfg, snapshot, theta, None)?;
    let _refresher = match pool {
        Some(path) => {
            let embedder = cfg.embedder.build()?;
            Some(Refresher::spawn(
                pricer.store().clone(),
                Duration::from_secs(cfg.service.refresh_secs.max(1)),
                move || {
                    let pool = io::read_pool(&path).map_err(|e| VecIndexError::Snapshot(format!("{e:#}")))?;
                    build_index(&pool, embedder.as_ref(), graph, Utc::now())
                },
            ))
        }
        None => None,
    };
    let app = router(pricer);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting runtime")?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        let local = listener.local_addr()?;
        println!("listening on http://{local}");
        tracing::info!(%local, "serving");
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .context("server error")
    })
}
