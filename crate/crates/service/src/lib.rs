//! HTTP/JSON front end for the experiment runners.
//!
//! Every route takes a JSON body and answers with the runner's report. Numerical work
//! runs on the blocking pool so the reactor stays responsive. Failures come back as
//! [`ErrorBody`] with status 400 for bad requests and 500 otherwise.

use axum::extract::Json;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::Serialize;

use mirage_core::harness::{self, DataRequest, ErrorBody, RunRequest};
use mirage_core::Error;

/// Failure of one request.
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = if e.is_client_error() {
            StatusCode::BAD_REQUEST
        } else {
            StatusCode::INTERNAL_SERVER_ERROR
        };
        ApiError {
            status,
            body: ErrorBody::from(&e),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

async fn blocking<T, F>(f: F) -> Result<Json<T>, ApiError>
where
    T: Serialize + Send + 'static,
    F: FnOnce() -> mirage_core::Result<T> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map(Json).map_err(ApiError::from),
        Err(e) => Err(ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            body: ErrorBody::new("internal", format!("worker failed: {e}")),
        }),
    }
}

macro_rules! run_route {
    ($name:ident, $runner:path) => {
        async fn $name(Json(req): Json<RunRequest>) -> Result<impl IntoResponse, ApiError> {
            blocking(move || $runner(&req.config)).await
        }
    };
}

run_route!(modes, harness::run_modes);
run_route!(mirage, harness::run_mirage);
run_route!(sweep_distance, harness::run_distance_sweep);
run_route!(sweep_noise, harness::run_noise_sweep);
run_route!(mode_table, harness::run_mode_table);
run_route!(forward, harness::run_forward);

async fn image(Json(req): Json<DataRequest>) -> Result<impl IntoResponse, ApiError> {
    blocking(move || harness::run_image(&req.config, &req.data)).await
}

async fn localize(Json(req): Json<DataRequest>) -> Result<impl IntoResponse, ApiError> {
    blocking(move || harness::run_localize(&req.config, &req.data)).await
}

async fn health() -> &'static str {
    "ok"
}

/// All routes under `/v1`.
pub fn router() -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/modes", post(modes))
        .route("/v1/mirage", post(mirage))
        .route("/v1/sweep-distance", post(sweep_distance))
        .route("/v1/sweep-noise", post(sweep_noise))
        .route("/v1/mode-table", post(mode_table))
        .route("/v1/forward", post(forward))
        .route("/v1/image", post(image))
        .route("/v1/localize", post(localize))
}

/// Serves [`router`] on `listener` until the future is dropped.
pub async fn serve(listener: tokio::net::TcpListener) -> std::io::Result<()> {
    tracing::info!(addr = ?listener.local_addr().ok(), "serving");
    axum::serve(listener, router()).await
}
