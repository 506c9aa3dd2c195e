//! Loopback guidance server speaking the remote wire protocol, for tests and
//! the `serve-mock` command.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

use super::remote::{decode_f32, encode_f32, WireRequest, WireResponse};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MockMode {
    /// Answers with an all-zero epsilon of the request's shape.
    #[default]
    Zeros,
    /// Answers with one extra row.
    WrongShape,
    /// Answers with a body that is not JSON.
    Malformed,
    /// Answers with a different request id.
    WrongId,
}

#[derive(Debug, Clone, Default)]
pub struct MockBehavior {
    pub mode: MockMode,
    /// Delay before every answer.
    pub delay: Duration,
    /// Number of initial requests answered with HTTP 503.
    pub fail_first: usize,
}

#[derive(Clone)]
struct AppState {
    behavior: MockBehavior,
    hits: Arc<AtomicUsize>,
}

async fn predict(State(state): State<AppState>, Json(req): Json<WireRequest>) -> Response {
    let n = state.hits.fetch_add(1, Ordering::SeqCst);
    if n < state.behavior.fail_first {
        return (StatusCode::SERVICE_UNAVAILABLE, "warming up").into_response();
    }
    if !state.behavior.delay.is_zero() {
        tokio::time::sleep(state.behavior.delay).await;
    }
    let [h, w, c] = req.shape;
    match decode_f32(&req.image) {
        Ok(v) if v.len() == h * w * c => {}
        _ => return (StatusCode::BAD_REQUEST, "image does not match shape").into_response(),
    }
    if let Some(depth) = &req.depth {
        match decode_f32(depth) {
            Ok(v) if v.len() == h * w => {}
            _ => return (StatusCode::BAD_REQUEST, "depth does not match shape").into_response(),
        }
    }
    let (shape, id) = match state.behavior.mode {
        MockMode::Malformed => return (StatusCode::OK, "<html>not json</html>").into_response(),
        MockMode::WrongShape => ([h + 1, w, c], req.request_id),
        MockMode::WrongId => (req.shape, format!("{}-other", req.request_id)),
        MockMode::Zeros => (req.shape, req.request_id),
    };
    let [h, w, c] = shape;
    Json(WireResponse {
        request_id: id,
        epsilon: encode_f32(std::iter::repeat_n(0.0, h * w * c)),
        shape,
    })
    .into_response()
}

fn router(behavior: MockBehavior, hits: Arc<AtomicUsize>) -> Router {
    Router::new()
        .route("/predict", post(predict))
        .with_state(AppState { behavior, hits })
}

/// Server running on a background thread until dropped.
pub struct MockServer {
    addr: SocketAddr,
    hits: Arc<AtomicUsize>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl MockServer {
    /// Binds an ephemeral loopback port.
    pub fn spawn(behavior: MockBehavior) -> std::io::Result<Self> {
        Self::bind(SocketAddr::from(([127, 0, 0, 1], 0)), behavior)
    }

    pub fn bind(addr: SocketAddr, behavior: MockBehavior) -> std::io::Result<Self> {
        let listener = std::net::TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let hits = Arc::new(AtomicUsize::new(0));
        let (tx, rx) = oneshot::channel::<()>();
        let app = router(behavior, hits.clone());
        let runtime = tokio::runtime::Builder::new_current_thread()
            .enable_all()
            .build()?;
        let thread = std::thread::spawn(move || {
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener).expect("listener");
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
                    .expect("mock server");
            });
        });
        Ok(Self {
            addr,
            hits,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}/predict", self.addr)
    }

    /// Requests received so far, including rejected ones.
    pub fn requests(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Serves on `addr` until the process is interrupted.
pub async fn serve(addr: SocketAddr, behavior: MockBehavior) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "mock guidance server listening");
    axum::serve(listener, router(behavior, Arc::new(AtomicUsize::new(0)))).await
}
