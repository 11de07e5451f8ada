//! JSON-over-HTTP query service.
//!
//! | method | path                  | body / reply |
//! |--------|-----------------------|--------------|
//! | GET    | `/health`             | `{status, d, count, fingerprint}` |
//! | GET    | `/behaviors`          | `{behaviors: [{name, description}]}` |
//! | POST   | `/query`              | `{text, k?, behavior_filter?}` → `{results: [..]}` |
//! | GET    | `/clips/{id}`         | entry metadata |
//! | GET    | `/clips/{id}/montage` | PNG strip of the sampled frames |
//!
//! Errors are `{error}` with a 4xx or 5xx status.

use std::io::Cursor;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ethoclip::corpus::FrameSource;
use ethoclip::ethogram::Ethogram;
use ethoclip::model::DualEncoder;
use image::RgbImage;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::oneshot;

use crate::build::{check_compatible, encode_query};
use crate::format::{EntryMeta, Index};
use crate::search::search;
use crate::IndexError;

pub const DEFAULT_K: usize = 10;

/// One loaded index with the encoder that produced it.
pub struct Engine {
    pub index: Index,
    pub model: DualEncoder<f64>,
    pub frames: Option<Arc<dyn FrameSource>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryHit {
    pub clip_id: String,
    pub score: f64,
    pub video_id: String,
    pub t_init: f64,
    pub t_end: f64,
    pub behaviors: Vec<String>,
    pub text: String,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRequest {
    pub text: String,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub behavior_filter: Option<String>,
}

fn default_k() -> usize {
    DEFAULT_K
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QueryResponse {
    pub results: Vec<QueryHit>,
}

impl Engine {
    /// Refuses to pair an index with a checkpoint other than its own.
    pub fn new(index: Index, model: DualEncoder<f64>, frames: Option<Arc<dyn FrameSource>>) -> Result<Self, IndexError> {
        check_compatible(&index, &model)?;
        Ok(Self { index, model, frames })
    }

    pub fn query(&self, text: &str, k: usize, behavior: Option<&str>) -> Result<Vec<QueryHit>, IndexError> {
        if k == 0 {
            return Err(IndexError::Request("k must be at least 1".into()));
        }
        if text.trim().is_empty() {
            return Err(IndexError::Request("query text is empty".into()));
        }
        let q = encode_query(&self.model, text)?;
        let hits = search(&self.index, &q, k, behavior)?;
        Ok(hits
            .into_iter()
            .map(|h| {
                let e = &self.index.entries[h.entry];
                QueryHit {
                    clip_id: e.clip_id.clone(),
                    score: h.score,
                    video_id: e.meta.video_id.clone(),
                    t_init: e.meta.t_init,
                    t_end: e.meta.t_end,
                    behaviors: e.meta.behaviors.clone(),
                    text: e.meta.text.clone(),
                }
            })
            .collect())
    }

    /// Sampled frames side by side at source resolution.
    pub fn montage(&self, clip_id: &str) -> Result<RgbImage, IndexError> {
        let e = self
            .index
            .get(clip_id)
            .ok_or_else(|| IndexError::NotFound(format!("no clip {clip_id}")))?;
        let src = self
            .frames
            .as_ref()
            .ok_or_else(|| IndexError::NotFound("this service has no frame source".into()))?;
        let frames = e
            .meta
            .frame_indices
            .iter()
            .map(|&i| src.frame(&e.meta.video_id, i))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(strip(&frames))
    }
}

fn strip(frames: &[RgbImage]) -> RgbImage {
    let w: u32 = frames.iter().map(|f| f.width()).sum();
    let h = frames.iter().map(|f| f.height()).max().unwrap_or(0);
    let mut out = RgbImage::new(w.max(1), h.max(1));
    let mut x = 0i64;
    for f in frames {
        image::imageops::replace(&mut out, f, x, 0);
        x += i64::from(f.width());
    }
    out
}

/// Shared state: the current engine behind a lock that is only held to
/// clone or swap the pointer, so a reload never blocks in-flight queries
/// and no reader sees a half-swapped index.
pub struct Service {
    engine: RwLock<Arc<Engine>>,
    ethogram: Ethogram,
}

impl Service {
    pub fn new(engine: Engine, ethogram: Ethogram) -> Arc<Self> {
        Arc::new(Self {
            engine: RwLock::new(Arc::new(engine)),
            ethogram,
        })
    }

    pub fn current(&self) -> Arc<Engine> {
        self.engine.read().clone()
    }

    pub fn reload(&self, engine: Engine) {
        *self.engine.write() = Arc::new(engine);
    }
}

impl IntoResponse for IndexError {
    fn into_response(self) -> Response {
        let status = match &self {
            IndexError::Request(_) => StatusCode::BAD_REQUEST,
            IndexError::NotFound(_) => StatusCode::NOT_FOUND,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({"error": self.to_string()}))).into_response()
    }
}

async fn health(State(svc): State<Arc<Service>>) -> Json<serde_json::Value> {
    let e = svc.current();
    Json(json!({
        "status": "ok",
        "d": e.index.dim,
        "count": e.index.len(),
        "fingerprint": e.index.fingerprint,
    }))
}

async fn behaviors(State(svc): State<Arc<Service>>) -> Json<serde_json::Value> {
    Json(json!({ "behaviors": svc.ethogram.actions() }))
}

async fn query(State(svc): State<Arc<Service>>, body: Bytes) -> Result<Json<QueryResponse>, IndexError> {
    let req: QueryRequest =
        serde_json::from_slice(&body).map_err(|e| IndexError::Request(format!("bad query body: {e}")))?;
    if let Some(b) = &req.behavior_filter {
        if !svc.ethogram.contains(b) {
            return Err(IndexError::Request(format!("unknown behavior {b:?}")));
        }
    }
    let engine = svc.current();
    let results = tokio::task::spawn_blocking(move || engine.query(&req.text, req.k, req.behavior_filter.as_deref()))
        .await
        .map_err(|e| IndexError::Internal(format!("query task: {e}")))??;
    Ok(Json(QueryResponse { results }))
}

#[derive(Serialize)]
struct ClipInfo<'a> {
    clip_id: &'a str,
    #[serde(flatten)]
    meta: &'a EntryMeta,
}

async fn clip(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> Result<Response, IndexError> {
    let e = svc.current();
    let entry = e.index.get(&id).ok_or_else(|| IndexError::NotFound(format!("no clip {id}")))?;
    Ok(Json(ClipInfo {
        clip_id: &entry.clip_id,
        meta: &entry.meta,
    })
    .into_response())
}

async fn montage(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> Result<Response, IndexError> {
    let engine = svc.current();
    let png = tokio::task::spawn_blocking(move || -> Result<Vec<u8>, IndexError> {
        let img = engine.montage(&id)?;
        let mut buf = Cursor::new(Vec::new());
        img.write_to(&mut buf, image::ImageFormat::Png)
            .map_err(|e| IndexError::Internal(format!("encoding montage: {e}")))?;
        Ok(buf.into_inner())
    })
    .await
    .map_err(|e| IndexError::Internal(format!("montage task: {e}")))??;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/behaviors", get(behaviors))
        .route("/query", post(query))
        .route("/clips/{id}", get(clip))
        .route("/clips/{id}/montage", get(montage))
        .with_state(service)
}

/// Serves until the process is stopped.
pub async fn serve(service: Arc<Service>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(service)).await
}

/// A server on its own runtime thread; dropping the handle stops it.
pub struct Running {
    pub addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl Running {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for Running {
    fn drop(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Binds `addr` (port 0 picks a free port) and serves in the background.
pub fn spawn(service: Arc<Service>, addr: SocketAddr) -> std::io::Result<Running> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let listener = rt.block_on(tokio::net::TcpListener::bind(addr))?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        rt.block_on(async move {
            let shutdown = async {
                let _ = rx.await;
            };
            if let Err(e) = axum::serve(listener, router(service)).with_graceful_shutdown(shutdown).await {
                log::error!("server stopped: {e}");
            }
        });
    });
    Ok(Running {
        addr,
        stop: Some(tx),
        thread: Some(thread),
    })
}
