//! Serves one model at `POST /v1/query`: the request carries images, the
//! response only the class probabilities.

use std::future::Future;
use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, State};
pub use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use dreamlab_core::probing::wire::{ErrorBody, QueryRequest, QueryResponse, QUERY_PATH};
use dreamlab_core::probing::BlackBox;
use dreamlab_core::Error;
use tokio::sync::oneshot;

const BODY_LIMIT: usize = 256 << 20;

/// Fails the next `count` requests with `status` before they reach the
/// model. Used to exercise client retries.
#[derive(Debug)]
pub struct Faults {
    remaining: AtomicUsize,
    status: StatusCode,
}

impl Faults {
    pub fn none() -> Self {
        Self::fail_next(0, StatusCode::SERVICE_UNAVAILABLE)
    }

    pub fn fail_next(count: usize, status: StatusCode) -> Self {
        Self {
            remaining: AtomicUsize::new(count),
            status,
        }
    }

    fn take(&self) -> Option<StatusCode> {
        self.remaining
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .ok()
            .map(|_| self.status)
    }

    pub fn remaining(&self) -> usize {
        self.remaining.load(Ordering::SeqCst)
    }
}

#[derive(Clone)]
struct AppState {
    model: Arc<dyn BlackBox>,
    faults: Arc<Faults>,
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: msg.into() })).into_response()
}

async fn query(State(state): State<AppState>, body: Result<Json<QueryRequest>, JsonRejection>) -> Response {
    if let Some(status) = state.faults.take() {
        tracing::warn!(%status, "injected fault");
        return error(status, "injected fault");
    }
    let Json(req) = match body {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    let len: usize = req.shape.iter().product();
    if let Some(i) = req.queries.iter().position(|q| q.len() != len) {
        return error(
            StatusCode::BAD_REQUEST,
            format!(
                "query {i} has {} values, shape {:?} needs {len}",
                req.queries[i].len(),
                req.shape
            ),
        );
    }
    if req.queries.iter().flatten().any(|v| !v.is_finite()) {
        return error(StatusCode::BAD_REQUEST, "non-finite pixel value");
    }
    let model = state.model.clone();
    let result = tokio::task::spawn_blocking(move || model.query(&req.queries, req.shape)).await;
    match result {
        Ok(Ok(probs)) => Json(QueryResponse { probs }).into_response(),
        Ok(Err(e @ (Error::ShapeMismatch { .. } | Error::NonFinite(_)))) => {
            error(StatusCode::BAD_REQUEST, e.to_string())
        }
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")),
    }
}

pub fn router(model: Arc<dyn BlackBox>, faults: Faults) -> Router {
    Router::new()
        .route(QUERY_PATH, post(query))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(AppState {
            model,
            faults: Arc::new(faults),
        })
}

/// Serves `app` on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    app: Router,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> io::Result<()> {
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}

/// A server running on its own thread and runtime; stops when dropped.
pub struct ServerHandle {
    pub addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<io::Result<()>>>,
}

impl ServerHandle {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(mut self) -> io::Result<()> {
        self.stop_and_join()
    }

    fn stop_and_join(&mut self) -> io::Result<()> {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().map_err(|_| io::Error::other("server thread panicked"))?,
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.stop_and_join();
    }
}

/// Binds `addr` (port 0 picks a free port) and serves `model` in the
/// background.
pub fn spawn(model: Arc<dyn BlackBox>, faults: Faults, addr: SocketAddr) -> io::Result<ServerHandle> {
    let std_listener = std::net::TcpListener::bind(addr)?;
    std_listener.set_nonblocking(true)?;
    let addr = std_listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let app = router(model, faults);
    let thread = std::thread::Builder::new()
        .name("dreamlab-server".into())
        .spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(1)
                .enable_all()
                .build()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(std_listener)?;
                serve(listener, app, async move {
                    let _ = rx.await;
                })
                .await
            })
        })?;
    Ok(ServerHandle {
        addr,
        stop: Some(tx),
        thread: Some(thread),
    })
}
