//! HTTP front end for an [`Instrument`].
//!
//! Connections are handled concurrently but every request waits on one
//! fair (FIFO) mutex, so measurements run strictly one at a time in arrival
//! order and nothing is rejected for being busy.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::sync::{oneshot, Mutex};

use super::{ErrorBody, ExperimentRequest, Health, Instrument, ProtocolError};

type Shared = Arc<Mutex<Instrument>>;

fn error_response(e: &ProtocolError) -> Response {
    let code = match e {
        ProtocolError::Conflict { .. } => StatusCode::CONFLICT,
        _ => StatusCode::BAD_REQUEST,
    };
    (code, Json(ErrorBody::from(e))).into_response()
}

async fn experiment(State(inst): State<Shared>, body: Bytes) -> Response {
    let req: ExperimentRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error_response(&ProtocolError::InvalidRequest(format!("malformed body: {e}"))),
    };
    let mut guard = inst.lock().await;
    match guard.handle(&req) {
        Ok(resp) => Json(resp).into_response(),
        Err(e) => error_response(&e),
    }
}

async fn status(State(inst): State<Shared>) -> Response {
    Json(inst.lock().await.status()).into_response()
}

async fn health(State(inst): State<Shared>) -> Json<Health> {
    let measurements = inst.lock().await.lab().measurements();
    Json(Health { status: "ok".into(), measurements })
}

pub fn router(instrument: Shared) -> Router {
    Router::new()
        .route("/experiment", post(experiment))
        .route("/status", get(status))
        .route("/health", get(health))
        .with_state(instrument)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    instrument: Instrument,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let app = router(Arc::new(Mutex::new(instrument)));
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}

/// A server running on its own runtime thread; stops when dropped.
#[derive(Debug)]
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<std::io::Result<()>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) -> std::io::Result<()> {
        self.shutdown_inner()
    }

    fn shutdown_inner(&mut self) -> std::io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(std::io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.shutdown_inner();
    }
}

/// Binds `bind` (port 0 picks a free port) and serves on a background thread.
pub fn spawn_server(instrument: Instrument, bind: &str) -> std::io::Result<ServerHandle> {
    let std_listener = std::net::TcpListener::bind(bind)?;
    std_listener.set_nonblocking(true)?;
    let addr = std_listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::Builder::new().name(format!("lab-server-{addr}")).spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(std_listener)?;
            serve(instrument, listener, async {
                let _ = rx.await;
            })
            .await
        })
    })?;
    Ok(ServerHandle { addr, shutdown: Some(tx), thread: Some(thread) })
}
