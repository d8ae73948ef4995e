//! HTTP recognition service for the drawing pad.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::chargraph::{batch_graphs, CharGraph};
use crate::error::{Result, SgcnError};
use crate::ink::{Point, Trajectory};
use crate::network::{prepare_graph, SgcnModel};
use crate::trainer::{checkpoint_id, model_from_checkpoint, Checkpoint};

pub const MAX_BODY_BYTES: usize = 1 << 20;
pub const DEFAULT_TOPK: usize = 5;
pub const DEFAULT_PORT: u16 = 8080;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecognizeRequest {
    pub strokes: Vec<Vec<Point>>,
    #[serde(default)]
    pub topk: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphView {
    pub nodes: Vec<Point>,
    pub edges: Vec<[usize; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecognizeResponse {
    pub predictions: Vec<Prediction>,
    pub graph: GraphView,
    pub latency_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub checkpoint_id: String,
    pub num_classes: usize,
}

/// Read-only model shared by all requests.
pub struct Recognizer {
    pub model: SgcnModel<f32>,
    pub checkpoint_id: String,
    /// Directory with the UI bundle; a built-in page is served without it.
    pub static_dir: Option<PathBuf>,
}

impl Recognizer {
    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let ck = Checkpoint::from_bytes(bytes)?;
        Ok(Recognizer {
            model: model_from_checkpoint(&ck)?,
            checkpoint_id: checkpoint_id(bytes),
            static_dir: None,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Recognizer::from_checkpoint_bytes(&std::fs::read(path)?)
    }

    pub fn num_classes(&self) -> usize {
        self.model.config.num_classes
    }

    pub fn health(&self) -> Health {
        Health {
            status: "ok".into(),
            checkpoint_id: self.checkpoint_id.clone(),
            num_classes: self.num_classes(),
        }
    }

    /// Softmax scores of the `topk` best classes for raw strokes.
    pub fn recognize(&self, req: &RecognizeRequest) -> Result<RecognizeResponse> {
        let start = Instant::now();
        let k = req.topk.unwrap_or(DEFAULT_TOPK.min(self.num_classes()));
        let traj = Trajectory::new(req.strokes.clone())?;
        let (predictions, graph) = top_predictions(&self.model, &traj, k)?;
        Ok(RecognizeResponse {
            predictions,
            graph: GraphView {
                nodes: graph.coords.clone(),
                edges: graph.edges.iter().map(|&(s, d)| [s, d]).collect(),
            },
            latency_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

/// Top-`k` softmax scores for one trajectory, with the graph it was read as.
pub fn top_predictions(model: &SgcnModel<f32>, traj: &Trajectory, k: usize) -> Result<(Vec<Prediction>, CharGraph)> {
    let (top, graph) = top_scores(model, traj, k)?;
    let predictions = top
        .into_iter()
        .map(|(c, score)| Prediction {
            label: model.config.class_name(c),
            score,
        })
        .collect();
    Ok((predictions, graph))
}

/// Class indices and softmax scores of the `k` best classes, best first.
pub fn top_scores(model: &SgcnModel<f32>, traj: &Trajectory, k: usize) -> Result<(Vec<(usize, f64)>, CharGraph)> {
    let classes = model.config.num_classes;
    if k == 0 || k > classes {
        return Err(SgcnError::invalid(format!("topk must lie in [1, {classes}], got {k}")));
    }
    let graph = prepare_graph(traj, &model.config)?;
    let logits = model.predict(&batch_graphs([&graph])?)?;
    let scores = softmax(logits.row(0));
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok((order[..k].iter().map(|&c| (c, scores[c])).collect(), graph))
}

fn softmax(row: &[f32]) -> Vec<f64> {
    let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let e: Vec<f64> = row.iter().map(|&v| (v as f64 - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": message.into() }))).into_response()
}

async fn recognize(State(r): State<Arc<Recognizer>>, body: std::result::Result<Bytes, BytesRejection>) -> Response {
    let body = match body {
        Ok(b) => b,
        Err(e) => return error(e.status(), e.body_text()),
    };
    let req: RecognizeRequest = match serde_json::from_slice(&body) {
        Ok(q) => q,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed request: {e}")),
    };
    let out = tokio::task::spawn_blocking(move || r.recognize(&req)).await;
    match out {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(e)) => error(StatusCode::BAD_REQUEST, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn health(State(r): State<Arc<Recognizer>>) -> Json<Health> {
    Json(r.health())
}

const BUILTIN_PAGE: &str = include_str!("serve_page.html");

async fn index(State(r): State<Arc<Recognizer>>) -> Response {
    static_file(&r, "index.html").await
}

async fn asset(State(r): State<Arc<Recognizer>>, axum::extract::Path(path): axum::extract::Path<String>) -> Response {
    static_file(&r, &path).await
}

fn content_type(path: &str) -> &'static str {
    match path.rsplit('.').next() {
        Some("html") => "text/html; charset=utf-8",
        Some("js") | Some("mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        _ => "application/octet-stream",
    }
}

async fn static_file(r: &Recognizer, path: &str) -> Response {
    let Some(dir) = &r.static_dir else {
        return if path == "index.html" {
            Html(BUILTIN_PAGE).into_response()
        } else {
            error(StatusCode::NOT_FOUND, "not found")
        };
    };
    if path.split('/').any(|c| c == ".." || c.is_empty()) {
        return error(StatusCode::NOT_FOUND, "not found");
    }
    match tokio::fs::read(dir.join(path)).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(path))], bytes).into_response(),
        Err(_) => error(StatusCode::NOT_FOUND, "not found"),
    }
}

fn host_name(s: &str) -> &str {
    let s = s.split("://").last().unwrap_or(s);
    let s = s.split('/').next().unwrap_or(s);
    match s.strip_prefix('[') {
        Some(v6) => v6.split(']').next().unwrap_or(v6),
        None => s.split(':').next().unwrap_or(s),
    }
}

/// Origin of the request when it names the same host as the server.
fn same_host_origin(headers: &HeaderMap) -> Option<HeaderValue> {
    let origin = headers.get(header::ORIGIN)?;
    let host = headers.get(header::HOST)?.to_str().ok()?;
    (host_name(origin.to_str().ok()?) == host_name(host)).then(|| origin.clone())
}

async fn cors(req: Request, next: Next) -> Response {
    let allow = same_host_origin(req.headers());
    let mut resp = if req.method() == Method::OPTIONS {
        StatusCode::NO_CONTENT.into_response()
    } else {
        next.run(req).await
    };
    if let Some(origin) = allow {
        let h = resp.headers_mut();
        h.insert(header::ACCESS_CONTROL_ALLOW_ORIGIN, origin);
        h.insert(header::ACCESS_CONTROL_ALLOW_METHODS, HeaderValue::from_static("GET, POST, OPTIONS"));
        h.insert(header::ACCESS_CONTROL_ALLOW_HEADERS, HeaderValue::from_static("content-type"));
        h.insert(header::VARY, HeaderValue::from_static("origin"));
    }
    resp
}

pub fn router(recognizer: Arc<Recognizer>) -> Router {
    Router::new()
        .route("/api/recognize", post(recognize))
        .route("/api/health", get(health))
        .route("/", get(index))
        .route("/{*path}", get(asset))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .layer(middleware::from_fn(cors))
        .with_state(recognizer)
}

/// Serves until interrupted.
pub async fn serve(recognizer: Arc<Recognizer>, addr: SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(recognizer))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
