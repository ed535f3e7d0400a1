//! HTTP and WebSocket service over one loaded artifact.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use anyhow::Context;
use apmg_core::render::Field;
use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use futures_util::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::mpsc;

use crate::artifact::{list_artifacts, resolve_under, Artifact, ArtifactEntry, ArtifactMeta};
use crate::commands::ServeArgs;
use crate::render_io::{encode_png, render, render_passes, RenderRequest};

/// Directory levels searched below the root by `/api/models`.
const LIST_DEPTH: usize = 3;

pub struct Loaded {
    pub artifact: Artifact,
    pub meta: ArtifactMeta,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Stats {
    pub frames: u64,
    pub last_frame_ms: f64,
    pub last_points: u64,
    pub points_per_sec: f64,
}

pub struct AppState {
    pub root: PathBuf,
    loaded: RwLock<Option<Arc<Loaded>>>,
    stats: Mutex<Stats>,
}

impl AppState {
    pub fn new(root: impl Into<PathBuf>) -> Arc<Self> {
        Arc::new(AppState {
            root: root.into(),
            loaded: RwLock::new(None),
            stats: Mutex::new(Stats::default()),
        })
    }

    pub fn set_artifact(&self, artifact: Artifact, path: &str) {
        let meta = artifact.meta(path);
        *self.loaded.write().unwrap_or_else(|p| p.into_inner()) = Some(Arc::new(Loaded { artifact, meta }));
    }

    pub fn loaded(&self) -> Option<Arc<Loaded>> {
        self.loaded.read().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn stats(&self) -> Stats {
        self.stats.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    fn record(&self, start: Instant, points: u64) {
        let secs = start.elapsed().as_secs_f64();
        let mut s = self.stats.lock().unwrap_or_else(|p| p.into_inner());
        s.frames += 1;
        s.last_frame_ms = secs * 1e3;
        s.last_points = points;
        s.points_per_sec = if secs > 0.0 { points as f64 / secs } else { 0.0 };
    }
}

/// Counts the points a render queries.
struct Counting<'a> {
    inner: &'a dyn Field,
    points: AtomicU64,
}

impl Field for Counting<'_> {
    fn eval(&self, points: &[[f32; 3]], out: &mut [f32]) {
        self.points.fetch_add(points.len() as u64, Ordering::Relaxed);
        self.inner.eval(points, out);
    }

    fn value_range(&self) -> (f64, f64) {
        self.inner.value_range()
    }
}

pub struct ApiError(StatusCode, String);

impl ApiError {
    fn bad(msg: impl ToString) -> Self {
        ApiError(StatusCode::BAD_REQUEST, msg.to_string())
    }

    fn nothing_loaded() -> Self {
        ApiError(StatusCode::CONFLICT, "no artifact loaded".into())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/models", get(models))
        .route("/api/load", post(load))
        .route("/api/meta", get(meta))
        .route("/api/render", post(render_png))
        .route("/api/progressive", get(progressive))
        .route("/api/stats", get(stats))
        .with_state(state)
}

async fn models(State(st): State<Arc<AppState>>) -> ApiResult<Json<Vec<ArtifactEntry>>> {
    let root = st.root.clone();
    tokio::task::spawn_blocking(move || list_artifacts(&root, LIST_DEPTH))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map(Json)
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, format!("{e:#}")))
}

#[derive(Deserialize)]
struct LoadBody {
    path: String,
}

async fn load(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<ArtifactMeta>> {
    let req: LoadBody = serde_json::from_slice(&body).map_err(ApiError::bad)?;
    let full = resolve_under(&st.root, &req.path).map_err(|e| ApiError::bad(format!("{e:#}")))?;
    if !full.exists() {
        return Err(ApiError(StatusCode::NOT_FOUND, format!("no artifact at {:?}", req.path)));
    }
    let artifact = tokio::task::spawn_blocking(move || Artifact::open(&full, None))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(|e| ApiError::bad(format!("{e:#}")))?;
    st.set_artifact(artifact, &req.path);
    Ok(Json(st.loaded().expect("just loaded").meta.clone()))
}

async fn meta(State(st): State<Arc<AppState>>) -> ApiResult<Json<ArtifactMeta>> {
    st.loaded().map(|l| Json(l.meta.clone())).ok_or_else(ApiError::nothing_loaded)
}

async fn stats(State(st): State<Arc<AppState>>) -> Json<Stats> {
    Json(st.stats())
}

fn parse_request(body: &[u8]) -> ApiResult<RenderRequest> {
    let req: RenderRequest = serde_json::from_slice(body).map_err(ApiError::bad)?;
    req.validate().map_err(ApiError::bad)?;
    Ok(req)
}

async fn render_png(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let loaded = st.loaded().ok_or_else(ApiError::nothing_loaded)?;
    let req = parse_request(&body)?;
    let png = tokio::task::spawn_blocking(move || -> anyhow::Result<Vec<u8>> {
        let start = Instant::now();
        let field = Counting { inner: loaded.artifact.field(), points: AtomicU64::new(0) };
        let img = render(&field, &req)?;
        st.record(start, field.points.load(Ordering::Relaxed));
        encode_png(&img)
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
    .map_err(|e| ApiError::bad(format!("{e:#}")))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn progressive(State(st): State<Arc<AppState>>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| session(socket, st))
}

fn text(v: serde_json::Value) -> Message {
    Message::Text(v.to_string().into())
}

/// Runs one progressive render, streaming a message per pass. A render
/// cancelled at a pass boundary ends with a `cancelled` marker, a finished
/// one with `done`.
fn stream_render(
    st: &AppState,
    loaded: &Loaded,
    req: &RenderRequest,
    cancel: &AtomicBool,
    tx: &mpsc::UnboundedSender<Message>,
) -> anyhow::Result<()> {
    let start = Instant::now();
    let field = Counting { inner: loaded.artifact.field(), points: AtomicU64::new(0) };
    let b64 = base64::engine::general_purpose::STANDARD;
    let id = req.request_id.clone();
    let out = render_passes(&field, req, &|| cancel.load(Ordering::SeqCst), |f| {
        let png = encode_png(f.preview).map_err(|e| apmg_core::Error::Shape(e.to_string()))?;
        let _ = tx.send(text(json!({
            "request_id": id,
            "pass_index": f.pass,
            "passes": f.passes,
            "level": f.level,
            "png": b64.encode(png),
        })));
        Ok(())
    })
    .context("progressive render")?;
    match out {
        Some(_) => {
            st.record(start, field.points.load(Ordering::Relaxed));
            let _ = tx.send(text(json!({ "request_id": id, "done": true })));
        }
        None => {
            let _ = tx.send(text(json!({ "request_id": id, "cancelled": true })));
        }
    }
    Ok(())
}

async fn session(socket: WebSocket, st: Arc<AppState>) {
    let (mut sink, mut stream) = socket.split();
    let (tx, mut rx) = mpsc::unbounded_channel::<Message>();
    let writer = tokio::spawn(async move {
        while let Some(m) = rx.recv().await {
            if sink.send(m).await.is_err() {
                break;
            }
        }
    });
    let mut current: Option<(Arc<AtomicBool>, tokio::task::JoinHandle<()>)> = None;
    while let Some(Ok(msg)) = stream.next().await {
        let body = match msg {
            Message::Text(t) => t.as_str().as_bytes().to_vec(),
            Message::Binary(b) => b.to_vec(),
            Message::Close(_) => break,
            _ => continue,
        };
        // one render in flight per session: stop the previous one at its
        // next pass boundary and let it finish its stream first
        if let Some((cancel, handle)) = current.take() {
            cancel.store(true, Ordering::SeqCst);
            let _ = handle.await;
        }
        let req = match parse_request(&body) {
            Ok(r) => r,
            Err(ApiError(_, e)) => {
                let _ = tx.send(text(json!({ "error": e })));
                continue;
            }
        };
        let Some(loaded) = st.loaded() else {
            let _ = tx.send(text(json!({ "request_id": req.request_id, "error": "no artifact loaded" })));
            continue;
        };
        let cancel = Arc::new(AtomicBool::new(false));
        let (c, st2, tx2) = (cancel.clone(), st.clone(), tx.clone());
        let handle = tokio::task::spawn_blocking(move || {
            if let Err(e) = stream_render(&st2, &loaded, &req, &c, &tx2) {
                let _ = tx2.send(text(json!({ "request_id": req.request_id, "error": format!("{e:#}") })));
            }
        });
        current = Some((cancel, handle));
    }
    if let Some((cancel, handle)) = current {
        cancel.store(true, Ordering::SeqCst);
        let _ = handle.await;
    }
    drop(tx);
    let _ = writer.await;
}

pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

pub fn serve_blocking(a: &ServeArgs) -> anyhow::Result<()> {
    let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
    rt.block_on(async {
        let addr = format!("{}:{}", a.host, a.port);
        let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
        println!("listening on http://{}", listener.local_addr()?);
        serve(listener, AppState::new(&a.root)).await.context("serving")
    })
}
