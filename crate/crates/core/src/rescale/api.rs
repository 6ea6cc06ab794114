//! HTTP/JSON interface used by the review front end.
//!
//! Every JSON body carries `schema_version`. Reviewers identify themselves
//! with the `X-Reviewer-Id` header.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};

use super::{
    export_pairs, ExportConfig, RescaleWorkspace, SelectionRecord, SelectionStatus, SelectionStore, VideoCandidates,
};
use crate::error::{Error, Result};
use crate::media::read_clip;
use crate::vsr::Generator;

pub const SCHEMA_VERSION: u32 = 1;
pub const REVIEWER_HEADER: &str = "x-reviewer-id";

pub struct ApiState {
    pub workspace: RescaleWorkspace,
    pub store: SelectionStore,
    /// Model used by the export endpoint; exports answer 503 without one.
    pub model: Option<Arc<Generator>>,
    pub export: ExportConfig,
}

impl ApiState {
    pub fn open(workspace: RescaleWorkspace, model: Option<Generator>, export: ExportConfig) -> Result<Self> {
        let store = SelectionStore::open(&workspace.selections_dir())?;
        Ok(Self {
            workspace,
            store,
            model: model.map(Arc::new),
            export,
        })
    }
}

struct ApiError(Error, Option<Value>);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e, None)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            Error::InvalidArgument(_) | Error::InvalidShape(_) | Error::Config(_) | Error::Json(_) => {
                StatusCode::BAD_REQUEST
            }
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Conflict(_) => StatusCode::CONFLICT,
            Error::Environment(_) => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let mut body = json!({
            "schema_version": SCHEMA_VERSION,
            "error": { "class": self.0.class(), "message": self.0.to_string() },
        });
        if let Some(current) = self.1 {
            body["current"] = current;
        }
        (status, Json(body)).into_response()
    }
}

type ApiResult = std::result::Result<Json<Value>, ApiError>;

fn status_name(s: Option<SelectionStatus>) -> &'static str {
    match s {
        None | Some(SelectionStatus::Pending) => "pending",
        Some(SelectionStatus::Approved) => "approved",
        Some(SelectionStatus::Rejected) => "rejected",
    }
}

async fn list_videos(State(st): State<Arc<ApiState>>) -> ApiResult {
    let mut videos = Vec::new();
    for id in st.workspace.video_ids()? {
        let vc = st.workspace.load_candidates(&id)?;
        let cur = st.store.current(&id);
        videos.push(json!({
            "video_id": id,
            "status": status_name(cur.as_ref().map(|r| r.status)),
            "factors": vc.factors(),
            "selection": cur.map(|r| json!({ "id": r.id(), "factor": r.factor, "reviewer_id": r.reviewer_id })),
        }));
    }
    Ok(Json(json!({ "schema_version": SCHEMA_VERSION, "videos": videos })))
}

fn patch_url(id: &str) -> String {
    format!("/patches/{id}.png")
}

fn candidates_body(vc: &VideoCandidates) -> Value {
    let patch = |p: &super::CandidatePatch| {
        json!({
            "patch_id": p.patch_id,
            "url": patch_url(&p.patch_id),
            "y": p.window.y,
            "x": p.window.x,
            "size": p.window.size,
            "statistic": p.statistic,
        })
    };
    json!({
        "schema_version": SCHEMA_VERSION,
        "video_id": vc.video_id,
        "lq_dims": vc.lq_dims,
        "reference_frame": vc.reference_frame,
        "reference": vc.reference.iter().map(patch).collect::<Vec<_>>(),
        "candidates": vc.candidates.iter().map(|c| json!({
            "factor": c.factor,
            "rank": c.rank,
            "statistic": c.statistic,
            "sr_dims": c.sr_dims,
            "patches": c.patches.iter().map(patch).collect::<Vec<_>>(),
        })).collect::<Vec<_>>(),
        "default_ranking": vc.ranking(),
    })
}

async fn candidates(State(st): State<Arc<ApiState>>, UrlPath(id): UrlPath<String>) -> ApiResult {
    Ok(Json(candidates_body(&st.workspace.load_candidates(&id)?)))
}

async fn patch(State(st): State<Arc<ApiState>>, UrlPath(file): UrlPath<String>) -> Response {
    let id = match file.strip_suffix(".png") {
        Some(id) if !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') => id,
        _ => return ApiError::from(Error::NotFound(format!("patch `{file}`"))).into_response(),
    };
    match std::fs::read(st.workspace.patch_path(id)) {
        Ok(bytes) => ([(header::CONTENT_TYPE, "image/png")], bytes).into_response(),
        Err(_) => ApiError::from(Error::NotFound(format!("patch `{id}`"))).into_response(),
    }
}

fn approved() -> SelectionStatus {
    SelectionStatus::Approved
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SelectionRequest {
    factor: f64,
    #[serde(default)]
    approvals: BTreeMap<String, bool>,
    #[serde(default = "approved")]
    status: SelectionStatus,
    #[serde(default)]
    reviewer_id: Option<String>,
    #[serde(default)]
    timestamp: Option<String>,
    #[serde(default)]
    video_id: Option<String>,
}

async fn select(
    State(st): State<Arc<ApiState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult {
    let vc = st.workspace.load_candidates(&id)?;
    let req: SelectionRequest =
        serde_json::from_slice(&body).map_err(|e| Error::InvalidArgument(format!("selection body: {e}")))?;
    if req.video_id.as_deref().is_some_and(|v| v != id) {
        return Err(Error::InvalidArgument("body video_id does not match the URL".into()).into());
    }
    let header_reviewer = headers.get(REVIEWER_HEADER).and_then(|v| v.to_str().ok()).map(str::to_string);
    let reviewer_id = header_reviewer
        .or(req.reviewer_id)
        .ok_or_else(|| Error::InvalidArgument("missing X-Reviewer-Id header".into()))?;
    let known: Vec<&str> = vc
        .candidates
        .iter()
        .flat_map(|c| &c.patches)
        .chain(&vc.reference)
        .map(|p| p.patch_id.as_str())
        .collect();
    if let Some(bad) = req.approvals.keys().find(|k| !known.contains(&k.as_str())) {
        return Err(Error::InvalidArgument(format!("unknown patch `{bad}`")).into());
    }
    let rec = SelectionRecord {
        video_id: id.clone(),
        factor: req.factor,
        reviewer_id,
        timestamp: req.timestamp.unwrap_or_else(|| chrono::Utc::now().to_rfc3339()),
        approvals: req.approvals,
        status: req.status,
    };
    match st.store.record(rec, &vc.factors()) {
        Ok(sid) => {
            let stored = st.store.get(&sid);
            Ok(Json(json!({ "schema_version": SCHEMA_VERSION, "id": sid, "record": stored })))
        }
        Err(e @ Error::Conflict(_)) => {
            let cur = st.store.current(&id).map(|r| json!({ "id": r.id(), "record": r }));
            Err(ApiError(e, cur))
        }
        Err(e) => Err(e.into()),
    }
}

async fn export(State(st): State<Arc<ApiState>>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let vc = st.workspace.load_candidates(&id)?;
    let rec = st
        .store
        .current(&id)
        .ok_or_else(|| Error::InvalidArgument(format!("video `{id}` has no selection yet")))?;
    let model = st
        .model
        .clone()
        .ok_or_else(|| Error::Environment("server started without a model; pass --model to enable exports".into()))?;
    let source = vc
        .source
        .clone()
        .ok_or_else(|| Error::InvalidArgument(format!("video `{id}` has no recorded source clip")))?;
    let out_dir = st.workspace.exports_dir(&id);
    let cfg = st.export.clone();
    let manifest = tokio::task::spawn_blocking(move || -> Result<_> {
        let lq = read_clip(&source)?;
        export_pairs(&rec, &lq, &model, &cfg, &out_dir)?;
        Ok(out_dir.join(super::EXPORT_FILE))
    })
    .await
    .map_err(|e| Error::Training(format!("export task panicked: {e}")))??;
    let pairs = super::ExportManifest::load(&manifest)?.pairs.len();
    Ok(Json(json!({
        "schema_version": SCHEMA_VERSION,
        "manifest": manifest.display().to_string(),
        "pairs": pairs,
    })))
}

pub fn router(state: Arc<ApiState>) -> Router {
    Router::new()
        .route("/videos", get(list_videos))
        .route("/videos/{id}/candidates", get(candidates))
        .route("/patches/{file}", get(patch))
        .route("/videos/{id}/selection", post(select))
        .route("/videos/{id}/export", post(export))
        .with_state(state)
}

/// Serves the API until the process receives Ctrl-C.
pub async fn serve(state: Arc<ApiState>, addr: SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::io(format!("binding {addr}"), e))?;
    log::info!("rescale review API listening on http://{}", listener.local_addr().map_err(|e| Error::io("local address", e))?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::io("serving", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::write_clip;
    use crate::rescale::tests::{lq_video, trained_tiny};
    use crate::rescale::{generate_candidates, RescaleConfig};
    use axum::body::{to_bytes, Body};
    use axum::http::Request;
    use tower::ServiceExt;

    fn setup(dir: &std::path::Path) -> Arc<ApiState> {
        let ws = RescaleWorkspace::new(dir.join("ws"));
        let lq = lq_video(3, 16, 16);
        let src = dir.join("src");
        write_clip(&lq, &src).unwrap();
        let cfg = RescaleConfig {
            factors: vec![1.0, 0.5],
            patch_size: 8,
            patches_per_video: 1,
            ..RescaleConfig::default()
        };
        generate_candidates(&lq, "v1", Some(&src), &trained_tiny(), &cfg, &ws).unwrap();
        Arc::new(ApiState::open(ws, Some(trained_tiny()), ExportConfig::default()).unwrap())
    }

    async fn call(st: &Arc<ApiState>, req: Request<Body>) -> (StatusCode, Vec<u8>) {
        let resp = router(st.clone()).oneshot(req).await.unwrap();
        let status = resp.status();
        (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
    }

    fn post_json(uri: &str, reviewer: Option<&str>, body: Value) -> Request<Body> {
        let mut b = Request::post(uri).header(header::CONTENT_TYPE, "application/json");
        if let Some(r) = reviewer {
            b = b.header("X-Reviewer-Id", r);
        }
        b.body(Body::from(body.to_string())).unwrap()
    }

    fn get_req(uri: &str) -> Request<Body> {
        Request::get(uri).body(Body::empty()).unwrap()
    }

    fn parse(b: &[u8]) -> Value {
        serde_json::from_slice(b).unwrap()
    }

    #[tokio::test]
    async fn review_flow() {
        let dir = tempfile::tempdir().unwrap();
        let st = setup(dir.path());

        let (s, b) = call(&st, get_req("/videos")).await;
        assert_eq!(s, StatusCode::OK);
        let v = parse(&b);
        assert_eq!(v["schema_version"], SCHEMA_VERSION);
        assert_eq!(v["videos"][0]["status"], "pending");

        let (s, b) = call(&st, get_req("/videos/v1/candidates")).await;
        assert_eq!(s, StatusCode::OK);
        let v = parse(&b);
        assert_eq!(v["candidates"].as_array().unwrap().len(), 2);
        let url = v["candidates"][1]["patches"][0]["url"].as_str().unwrap().to_string();
        let pid = v["candidates"][1]["patches"][0]["patch_id"].as_str().unwrap().to_string();

        let resp = router(st.clone()).oneshot(get_req(&url)).await.unwrap();
        assert_eq!(resp.status(), StatusCode::OK);
        assert_eq!(resp.headers()[header::CONTENT_TYPE], "image/png");

        let (s, _) = call(&st, post_json("/videos/v1/selection", None, json!({ "factor": 0.5 }))).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "reviewer header is required");

        let body = json!({ "factor": 0.5, "approvals": { pid.clone(): true } });
        let (s, b) = call(&st, post_json("/videos/v1/selection", Some("ann"), body.clone())).await;
        assert_eq!(s, StatusCode::OK);
        let id = parse(&b)["id"].as_str().unwrap().to_string();
        let (s, b) = call(&st, post_json("/videos/v1/selection", Some("ann"), body)).await;
        assert_eq!((s, parse(&b)["id"].as_str().unwrap()), (StatusCode::OK, id.as_str()));

        let (s, b) = call(&st, post_json("/videos/v1/selection", Some("bob"), json!({ "factor": 1.0 }))).await;
        assert_eq!(s, StatusCode::CONFLICT);
        let v = parse(&b);
        assert_eq!(v["current"]["record"]["factor"], 0.5);
        assert_eq!(v["schema_version"], SCHEMA_VERSION);

        let (s, b) = call(&st, post_json("/videos/v1/export", Some("ann"), json!({}))).await;
        assert_eq!(s, StatusCode::OK, "{}", String::from_utf8_lossy(&b));
        assert_eq!(parse(&b)["pairs"], 3);

        let (_, b) = call(&st, get_req("/videos")).await;
        assert_eq!(parse(&b)["videos"][0]["status"], "approved");
    }

    #[tokio::test]
    async fn bad_requests() {
        let dir = tempfile::tempdir().unwrap();
        let st = setup(dir.path());
        let (s, _) = call(&st, get_req("/videos/nope/candidates")).await;
        assert_eq!(s, StatusCode::NOT_FOUND);
        let (s, _) = call(&st, get_req("/patches/../x.png")).await;
        assert_ne!(s, StatusCode::OK);
        let (s, b) = call(&st, post_json("/videos/v1/selection", Some("ann"), json!({ "factor": 0.7 }))).await;
        assert_eq!(s, StatusCode::BAD_REQUEST);
        assert_eq!(parse(&b)["error"]["class"], "invalid-argument");
        let (s, _) = call(&st, post_json("/videos/v1/export", Some("ann"), json!({}))).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "no selection yet");
        let (s, _) = call(&st, post_json("/videos/v1/selection", Some("ann"), json!({ "factor": 0.5, "color": 1 }))).await;
        assert_eq!(s, StatusCode::BAD_REQUEST);
    }
}
