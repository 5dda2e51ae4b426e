//! HTTP JSON front end over the reference interval library.
//!
//! Routes live under `/v1`; see `openapi.yaml` next to this crate for the
//! request and response schemas.

pub mod api;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use norma_core::analytes::AnalyteTable;
use norma_core::model::{Checkpoint, CheckpointError, ModelError};

pub use api::{interpret, sweep, InterpretRequest, InterpretResponse, SweepRequest, SweepResponse};

pub const CKPT_ENV: &str = "NORMA_CKPT";
pub const PORT_ENV: &str = "NORMA_PORT";
pub const DEFAULT_PORT: u16 = 8080;

/// Machine-readable failure carried in the response body.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{code}: {message}")]
pub struct ApiError {
    pub status: u16,
    pub code: String,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status: status.as_u16(),
            code: code.into(),
            message: message.into(),
        }
    }

    pub fn bad_request(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }

    pub fn not_found(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, message)
    }

    pub fn unprocessable(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, message)
    }

    pub fn unavailable(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, code, message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let body = ErrorBody {
            error: ErrorDetail {
                code: self.code,
                message: self.message,
            },
        };
        (status, Json(body)).into_response()
    }
}

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("checkpoint {path}: {source}")]
    Checkpoint { path: PathBuf, source: CheckpointError },
    #[error("checkpoint {path}: {source}")]
    Untrained { path: PathBuf, source: ModelError },
    #[error("invalid {PORT_ENV} {0:?}")]
    Port(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Shared read-only state: the analyte table and an optional checkpoint.
#[derive(Debug, Clone)]
pub struct AppState {
    pub table: &'static AnalyteTable,
    pub checkpoint: Option<Arc<Checkpoint>>,
}

impl AppState {
    pub fn new(checkpoint: Option<Checkpoint>) -> Self {
        Self {
            table: AnalyteTable::shipped(),
            checkpoint: checkpoint.map(Arc::new),
        }
    }

    /// Loads a trained checkpoint from `path`.
    pub fn load(path: impl Into<PathBuf>) -> Result<Self, ServeError> {
        let path = path.into();
        let ckpt = Checkpoint::load(&path).map_err(|source| ServeError::Checkpoint {
            path: path.clone(),
            source,
        })?;
        ckpt.require_trained()
            .map_err(|source| ServeError::Untrained { path: path.clone(), source })?;
        Ok(Self::new(Some(ckpt)))
    }

    /// Reads `NORMA_CKPT`; without it the service runs and answers model
    /// requests with 503.
    pub fn from_env() -> Result<Self, ServeError> {
        match std::env::var_os(CKPT_ENV) {
            Some(p) => Self::load(PathBuf::from(p)),
            None => {
                log::warn!("{CKPT_ENV} not set; model intervals are unavailable");
                Ok(Self::new(None))
            }
        }
    }

    fn ckpt(&self) -> Option<&Checkpoint> {
        self.checkpoint.as_deref()
    }
}

/// `NORMA_PORT`, or the default port.
pub fn port_from_env() -> Result<u16, ServeError> {
    match std::env::var(PORT_ENV) {
        Ok(s) => s.trim().parse().map_err(|_| ServeError::Port(s)),
        Err(_) => Ok(DEFAULT_PORT),
    }
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request("invalid_request", e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub checkpoint_loaded: bool,
}

async fn health(State(s): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        checkpoint_loaded: s.checkpoint.is_some(),
    })
}

async fn list_analytes(State(s): State<AppState>) -> Json<Vec<api::AnalyteInfo>> {
    Json(api::analytes(s.table))
}

async fn get_analyte(State(s): State<AppState>, Path(code): Path<String>) -> Result<Json<api::AnalyteInfo>, ApiError> {
    api::analyte(s.table, &code).map(Json)
}

async fn post_interpret(State(s): State<AppState>, body: Bytes) -> Result<Json<InterpretResponse>, ApiError> {
    let req: InterpretRequest = parse_body(&body)?;
    interpret(s.table, s.ckpt(), &req).map(Json)
}

async fn post_sweep(State(s): State<AppState>, body: Bytes) -> Result<Json<SweepResponse>, ApiError> {
    let req: SweepRequest = parse_body(&body)?;
    sweep(s.table, s.ckpt(), &req).map(Json)
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/analytes", get(list_analytes))
        .route("/v1/analytes/{code}", get(get_analyte))
        .route("/v1/interpret", post(post_interpret))
        .route("/v1/sweep", post(post_sweep))
        .with_state(state)
}

pub async fn serve(state: AppState, addr: SocketAddr) -> Result<(), ServeError> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}

/// Runs the service on its own runtime until the process is stopped.
pub fn serve_blocking(state: AppState, addr: SocketAddr) -> Result<(), ServeError> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build()?.block_on(serve(state, addr))
}
