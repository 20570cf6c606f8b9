//! axum service. Handlers parse bodies themselves so that any malformed or
//! mistyped body is a 400 with the parser's message, and run the numeric work
//! on the blocking pool.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::runs::{RunError, RunKind, RunRegistry};
use super::{
    bundle_summary, deactivate, feature_scores, flow_artifact, generate_text, run_config, steer,
    to_json_bytes, DeactivateRequest, FlowRequest, GenerateRequest, SteerRequest,
};
use crate::error::Error;
use crate::flowgraph::ExportFormat;
use crate::steering::{steering_sweep, Scorer, SweepSpec};
use crate::tensors::{FeatureId, ModelBundle, SitePosition};

/// Shared, read-only service state. The scorer is `'static` because a judge
/// client owns a blocking HTTP client, which must never be dropped on an
/// async worker.
#[derive(Clone)]
pub struct AppState {
    pub bundle: Arc<ModelBundle>,
    pub runs: Arc<RunRegistry>,
    pub scorer: &'static dyn Scorer,
    pub fold_corpus: Option<Arc<Vec<Vec<u32>>>>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::MissingDictionary(_) | Error::OutOfRange { .. } => StatusCode::NOT_FOUND,
            Error::Judge(_) => StatusCode::SERVICE_UNAVAILABLE,
            Error::Io { .. } | Error::MissingFile(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        Self::new(status, e.to_string())
    }
}

impl From<RunError> for ApiError {
    fn from(e: RunError) -> Self {
        let status = match &e {
            RunError::Conflict(_) | RunError::Finished(_) => StatusCode::CONFLICT,
            RunError::NotFound(_) => StatusCode::NOT_FOUND,
            RunError::InvalidId(_) => StatusCode::BAD_REQUEST,
            RunError::Io(_) | RunError::Json(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = to_json_bytes(&ErrorBody { error: &self.message }).unwrap_or_default();
        (self.status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

fn json_response(status: StatusCode, bytes: Vec<u8>, run_id: Option<&str>) -> Response {
    let mut resp = (status, [(header::CONTENT_TYPE, "application/json")], bytes).into_response();
    if let Some(id) = run_id.and_then(|id| HeaderValue::from_str(id).ok()) {
        resp.headers_mut().insert("x-run-id", id);
    }
    resp
}

fn json<T: Serialize>(status: StatusCode, value: &T, run_id: Option<&str>) -> ApiResult {
    Ok(json_response(status, to_json_bytes(value)?, run_id))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")))?
}

/// Run `work` inside a registered run: failures are recorded, successes
/// persist `artifacts(output)` and complete the run.
fn within_run<T>(
    runs: &RunRegistry,
    kind: RunKind,
    run_id: Option<&str>,
    config: serde_json::Value,
    work: impl FnOnce() -> Result<T, ApiError>,
    artifacts: impl FnOnce(&T) -> Result<Vec<(&'static str, Vec<u8>)>, ApiError>,
) -> Result<(String, T), ApiError> {
    let rec = runs.create(kind, run_id, &config)?;
    let out = work().and_then(|out| artifacts(&out).map(|a| (out, a)));
    match out {
        Ok((out, files)) => {
            let refs: Vec<(&str, &[u8])> = files.iter().map(|(n, b)| (*n, b.as_slice())).collect();
            runs.complete(&rec.id, &refs)?;
            Ok((rec.id, out))
        }
        Err(e) => {
            runs.fail(&rec.id, &e.message)?;
            Err(e)
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/bundle", get(get_bundle))
        .route("/api/features/{layer}/{site}/{index}/scores", get(get_feature_scores))
        .route("/api/flowgraph", post(post_flowgraph))
        .route("/api/deactivate", post(post_deactivate))
        .route("/api/steer", post(post_steer))
        .route("/api/generate", post(post_generate))
        .route("/api/sweep", post(post_sweep))
        .route("/api/runs", get(get_runs))
        .route("/api/runs/{id}", get(get_run))
        .with_state(state)
}

async fn get_bundle(State(st): State<AppState>) -> ApiResult {
    json(StatusCode::OK, &bundle_summary(&st.bundle), None)
}

async fn get_feature_scores(
    State(st): State<AppState>,
    Path((layer, site, index)): Path<(String, String, String)>,
) -> ApiResult {
    let not_found = || ApiError::new(StatusCode::NOT_FOUND, format!("unknown feature {layer}/{site}/{index}"));
    let layer: usize = layer.parse().map_err(|_| not_found())?;
    let index: usize = index.parse().map_err(|_| not_found())?;
    let site = site.parse().map_err(|_| not_found())?;
    let feature = FeatureId::new(SitePosition::new(layer, site), index);
    let scores = blocking(move || Ok(feature_scores(&st.bundle, feature)?)).await?;
    json(StatusCode::OK, &scores, None)
}

async fn post_flowgraph(State(st): State<AppState>, body: Bytes) -> ApiResult {
    let req: FlowRequest = parse(&body)?;
    let (id, bytes) = blocking(move || {
        let config = run_config(&req)?;
        let ext = match req.format {
            ExportFormat::Json => "graph.json",
            ExportFormat::Dot => "graph.dot",
        };
        within_run(
            &st.runs,
            RunKind::Flow,
            req.run_id.as_deref(),
            config,
            || Ok(flow_artifact(&st.bundle, &req)?),
            |bytes| Ok(vec![(ext, bytes.clone())]),
        )
    })
    .await?;
    let content_type = if bytes.first() == Some(&b'{') { "application/json" } else { "text/vnd.graphviz" };
    let mut resp = (StatusCode::OK, [(header::CONTENT_TYPE, content_type)], bytes).into_response();
    if let Ok(v) = HeaderValue::from_str(&id) {
        resp.headers_mut().insert("x-run-id", v);
    }
    Ok(resp)
}

async fn post_deactivate(State(st): State<AppState>, body: Bytes) -> ApiResult {
    let req: DeactivateRequest = parse(&body)?;
    let (id, bytes) = blocking(move || {
        let config = run_config(&req)?;
        within_run(
            &st.runs,
            RunKind::Deactivate,
            req.run_id.as_deref(),
            config,
            || Ok(to_json_bytes(&deactivate(&st.bundle, &req)?)?),
            |bytes| Ok(vec![("report.json", bytes.clone())]),
        )
    })
    .await?;
    Ok(json_response(StatusCode::OK, bytes, Some(&id)))
}

async fn post_steer(State(st): State<AppState>, body: Bytes) -> ApiResult {
    let req: SteerRequest = parse(&body)?;
    let (id, resp) = blocking(move || {
        let config = run_config(&req)?;
        let corpus = st.fold_corpus.clone();
        within_run(
            &st.runs,
            RunKind::Steer,
            req.run_id.as_deref(),
            config,
            || Ok(steer(&st.bundle, &req, st.scorer, corpus.as_ref().map(|c| c.as_slice()))?),
            |resp| Ok(vec![("steer.json", to_json_bytes(resp)?)]),
        )
    })
    .await?;
    let status = if resp.degraded { StatusCode::SERVICE_UNAVAILABLE } else { StatusCode::OK };
    json(status, &resp, Some(&id))
}

async fn post_generate(State(st): State<AppState>, body: Bytes) -> ApiResult {
    let req: GenerateRequest = parse(&body)?;
    let resp = blocking(move || Ok(generate_text(&st.bundle, &req)?)).await?;
    json(StatusCode::OK, &resp, None)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SweepRequest {
    #[serde(flatten)]
    spec: SweepSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    run_id: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Accepted {
    pub run_id: String,
    pub status_url: String,
}

/// Sweeps are batch work: register the run, answer 202 at once and let the
/// client poll `GET /api/runs/{id}`.
async fn post_sweep(State(st): State<AppState>, body: Bytes) -> ApiResult {
    let req: SweepRequest = parse(&body)?;
    if req.spec.n_generations == 0 {
        return Err(ApiError::bad_request("n_generations must be >= 1"));
    }
    let config = run_config(&req.spec)?;
    let rec = st.runs.create(RunKind::Sweep, req.run_id.as_deref(), &config)?;
    let id = rec.id.clone();
    tokio::task::spawn_blocking(move || {
        let corpus = st.fold_corpus.clone();
        let result = steering_sweep(&st.bundle, &req.spec, st.scorer, corpus.as_ref().map(|c| c.as_slice()))
            .and_then(|report| Ok((to_json_bytes(&report)?, report.to_jsonl()?)));
        let outcome = match result {
            Ok((json, jsonl)) => st
                .runs
                .complete(&id, &[("sweep.json", &json), ("sweep.jsonl", jsonl.as_bytes())])
                .map(|_| ()),
            Err(e) => st.runs.fail(&id, &e.to_string()).map(|_| ()),
        };
        if let Err(e) = outcome {
            tracing::error!(run = %id, "could not finalize sweep run: {e}");
        }
    });
    let accepted = Accepted {
        status_url: format!("/api/runs/{}", rec.id),
        run_id: rec.id.clone(),
    };
    json(StatusCode::ACCEPTED, &accepted, Some(&rec.id))
}

async fn get_runs(State(st): State<AppState>) -> ApiResult {
    let runs = blocking(move || Ok(st.runs.list()?)).await?;
    json(StatusCode::OK, &runs, None)
}

async fn get_run(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let rec = blocking(move || Ok(st.runs.get(&id)?)).await?;
    json(StatusCode::OK, &rec, None)
}

/// Bind and serve until Ctrl-C.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
