use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde_json::json;
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use crate::runtime::{ExecError, InvocationEnvelope, Invoker, Runtime};
use crate::storage::{Backend, BackendError, DataObject, MemoryStore, QueueStore};
use crate::template::SyncMode;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
}

/// What one tier's service needs: the runtime, the invoker successors go
/// through, and the stores behind the data endpoints.
#[derive(Clone)]
pub struct GatewayState {
    pub runtime: Arc<Runtime>,
    pub invoker: Arc<dyn Invoker>,
    pub data: Arc<MemoryStore>,
    pub queues: Arc<QueueStore>,
}

impl GatewayState {
    pub fn new(runtime: Arc<Runtime>, invoker: Arc<dyn Invoker>) -> Self {
        GatewayState {
            runtime,
            invoker,
            data: Arc::new(MemoryStore::default()),
            queues: Arc::new(QueueStore::new()),
        }
    }
}

pub struct GatewayHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    task: JoinHandle<std::io::Result<()>>,
}

impl GatewayHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting connections and waits for in-flight requests.
    pub async fn shutdown(mut self) -> std::io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        self.task.await.unwrap_or_else(|e| Err(std::io::Error::other(e)))
    }

    /// Serves until the process ends or the service fails.
    pub async fn wait(self) -> std::io::Result<()> {
        let _keep = self.shutdown;
        self.task.await.unwrap_or_else(|e| Err(std::io::Error::other(e)))
    }
}

fn error(status: StatusCode, msg: impl std::fmt::Display) -> Response {
    (status, Json(json!({ "error": msg.to_string() }))).into_response()
}

fn status_of(e: &ExecError) -> StatusCode {
    match e {
        ExecError::UnknownWorkflow(_) | ExecError::UnknownFunction(_) => StatusCode::NOT_FOUND,
        ExecError::InvalidEnvelope(_) => StatusCode::UNPROCESSABLE_ENTITY,
        ExecError::DownstreamTimeout { .. } => StatusCode::GATEWAY_TIMEOUT,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

async fn invoke(State(st): State<GatewayState>, Path(name): Path<String>, body: Bytes) -> Response {
    let known = st.runtime.workflows().any(|g| g.node(&name).is_some());
    if !known {
        return error(StatusCode::NOT_FOUND, format!("unknown function `{name}`"));
    }
    let env: InvocationEnvelope = match serde_json::from_slice(&body) {
        Ok(env) => env,
        Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, e),
    };
    if env.function != name {
        return error(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("envelope names `{}` but was posted to `{name}`", env.function),
        );
    }
    if let Err(e) = env.validate() {
        return error(StatusCode::UNPROCESSABLE_ENTITY, e);
    }
    if st.runtime.workflow(&env.workflow).is_none() {
        return error(StatusCode::NOT_FOUND, format!("unknown workflow `{}`", env.workflow));
    }
    let request_id = env.request_id.clone();
    match env.sync {
        SyncMode::Sync => match st.runtime.execute(env, st.invoker.clone()).await {
            Ok(r) => Json(json!({
                "request_id": request_id,
                "end_to_end_ms": r.end_to_end_ms,
                "outputs": r.outputs,
            }))
            .into_response(),
            Err(e) => error(status_of(&e), e),
        },
        SyncMode::Async => {
            let rt = st.runtime.clone();
            let invoker = st.invoker.clone();
            tokio::spawn(async move {
                let _ = rt.execute(env, invoker).await;
            });
            (StatusCode::ACCEPTED, Json(json!({ "request_id": request_id }))).into_response()
        }
    }
}

async fn metrics(State(st): State<GatewayState>) -> Response {
    Json(st.runtime.collector().snapshot()).into_response()
}

async fn invocations(State(st): State<GatewayState>) -> Response {
    Json(st.runtime.invocation_counts()).into_response()
}

fn stored(r: Result<u64, BackendError>) -> Response {
    match r {
        Ok(size) => Json(json!({ "size": size })).into_response(),
        Err(BackendError::CapacityExceeded { budget }) => error(
            StatusCode::INSUFFICIENT_STORAGE,
            format!("capacity of {budget} bytes exceeded"),
        ),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

fn loaded(r: Result<DataObject, BackendError>) -> Response {
    match r {
        Ok(obj) => (StatusCode::OK, obj.bytes).into_response(),
        Err(BackendError::NotFound) => error(StatusCode::NOT_FOUND, "not found"),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

fn object(key: &str, body: Bytes) -> DataObject {
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64);
    DataObject::new(key, body.to_vec(), now)
}

async fn put_data(State(st): State<GatewayState>, Path(key): Path<String>, body: Bytes) -> Response {
    stored(st.data.store(&key, object(&key, body)).await)
}

async fn get_data(State(st): State<GatewayState>, Path(key): Path<String>) -> Response {
    loaded(st.data.load(&key).await)
}

async fn push_queue(State(st): State<GatewayState>, Path(key): Path<String>, body: Bytes) -> Response {
    stored(st.queues.store(&key, object(&key, body)).await)
}

async fn pop_queue(State(st): State<GatewayState>, Path(key): Path<String>) -> Response {
    loaded(st.queues.load(&key).await)
}

pub fn router(state: GatewayState) -> Router {
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/metrics", get(metrics))
        .route("/invocations", get(invocations))
        .route("/function/{name}", post(invoke))
        .route("/data/{*key}", put(put_data).get(get_data))
        .route("/queue/{*key}", post(push_queue).delete(pop_queue))
        .with_state(state)
}

/// Binds `addr`; port 0 picks a free port.
pub async fn bind(addr: SocketAddr) -> Result<TcpListener, GatewayError> {
    TcpListener::bind(addr)
        .await
        .map_err(|source| GatewayError::Bind { addr, source })
}

/// Serves the tier's endpoints on `listener` in the background.
pub fn serve_on(listener: TcpListener, state: GatewayState) -> std::io::Result<GatewayHandle> {
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let app = router(state);
    let task = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async move {
                let _ = rx.await;
            })
            .await
    });
    Ok(GatewayHandle {
        addr,
        shutdown: Some(tx),
        task,
    })
}

/// Binds `addr` and serves the tier's endpoints in the background.
pub async fn serve(addr: SocketAddr, state: GatewayState) -> Result<GatewayHandle, GatewayError> {
    let listener = bind(addr).await?;
    serve_on(listener, state).map_err(|source| GatewayError::Bind { addr, source })
}
