//! JSON-over-HTTP front end for [`Pipeline`].
//!
//! Handlers call into the pipeline on the blocking pool. Training jobs run on
//! their own OS threads, so recognition keeps being served while a job
//! trains. Queue and model changes are pushed to `/v1/events` as server-sent
//! events.

mod driver;

use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use sentinel_core::config::ServiceConfig;
use sentinel_core::pipeline::{
    AdjudicateRequest, ConfirmRequest, CorrectRequest, CorrectionOutcome, JobTicket, Pipeline, PipelineError,
    PipelineEvent, RecognizeRequest,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::{broadcast, oneshot};

pub use driver::HttpDriver;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("server: {0}")]
    Io(#[from] std::io::Error),
}

/// Error payload of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    /// Per-task outcomes when a correction was rejected.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcomes: Option<Vec<CorrectionOutcome>>,
}

struct ApiError(PipelineError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        if status.is_server_error() {
            log::error!("{}", self.0);
        }
        let outcomes = match &self.0 {
            PipelineError::Rejected { outcomes } => Some(outcomes.clone()),
            _ => None,
        };
        (status, Json(ErrorBody { error: self.0.to_string(), outcomes })).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Clone)]
struct AppState {
    pipeline: Arc<Pipeline>,
    events: broadcast::Sender<PipelineEvent>,
}

impl AppState {
    async fn call<T, F>(&self, f: F) -> ApiResult<T>
    where
        T: Send + 'static,
        F: FnOnce(&Pipeline) -> Result<T, PipelineError> + Send + 'static,
    {
        let pipeline = self.pipeline.clone();
        tokio::task::spawn_blocking(move || f(&pipeline))
            .await
            .map_err(|e| ApiError(PipelineError::Internal(e.to_string())))?
            .map(Json)
            .map_err(ApiError)
    }
}

/// Runs `ticket` and its follow-ups on a dedicated thread.
fn spawn_jobs(pipeline: &Arc<Pipeline>, ticket: Option<JobTicket>) {
    let Some(ticket) = ticket else { return };
    let pipeline = pipeline.clone();
    let name = format!("train-{}", ticket.job_id);
    let spawned = std::thread::Builder::new().name(name).spawn(move || {
        if let Err(e) = pipeline.run_jobs(Some(ticket)) {
            log::error!("training job failed to finalize: {e}");
        }
    });
    if let Err(e) = spawned {
        log::error!("cannot spawn training thread: {e}");
    }
}

/// Builds the router over `pipeline` and hooks its event stream.
pub fn router(pipeline: Arc<Pipeline>) -> Router {
    let (events, _) = broadcast::channel(1024);
    let tx = events.clone();
    pipeline.subscribe(Box::new(move |e| {
        let _ = tx.send(e.clone());
    }));
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/recognize", post(recognize))
        .route("/v1/predictions/{id}", get(prediction))
        .route("/v1/review/queue", get(queue))
        .route("/v1/review/{id}/confirm", post(confirm))
        .route("/v1/review/{id}/correct", post(correct))
        .route("/v1/corrections", get(corrections))
        .route("/v1/corrections/secondary", get(secondary))
        .route("/v1/corrections/{id}/adjudicate", post(adjudicate))
        .route("/v1/jobs", get(jobs))
        .route("/v1/jobs/{id}", get(job))
        .route("/v1/metrics", get(metrics))
        .route("/v1/models", get(models))
        .route("/v1/models/rollback", post(rollback))
        .route("/v1/events", get(events_stream))
        .with_state(AppState { pipeline, events })
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
    active_version: u64,
}

async fn health(State(s): State<AppState>) -> ApiResult<Health> {
    s.call(|p| Ok(Health { status: "ok", active_version: p.active_version()? })).await
}

async fn recognize(State(s): State<AppState>, Json(req): Json<RecognizeRequest>) -> Response {
    s.call(move |p| p.recognize(req)).await.into_response()
}

async fn prediction(State(s): State<AppState>, Path(id): Path<String>) -> Response {
    s.call(move |p| p.prediction(&id).ok_or_else(|| PipelineError::NotFound(format!("prediction `{id}`"))))
        .await
        .into_response()
}

#[derive(Deserialize)]
struct QueueQuery {
    #[serde(default = "default_limit")]
    limit: usize,
    cursor: Option<String>,
}

fn default_limit() -> usize {
    50
}

async fn queue(State(s): State<AppState>, Query(q): Query<QueueQuery>) -> Response {
    s.call(move |p| p.review_queue(q.limit, q.cursor.as_deref())).await.into_response()
}

async fn confirm(State(s): State<AppState>, Path(id): Path<String>, Json(req): Json<ConfirmRequest>) -> Response {
    let pipeline = s.pipeline.clone();
    s.call(move |p| {
        let (outcome, ticket) = p.confirm(&id, req)?;
        spawn_jobs(&pipeline, ticket);
        Ok(outcome)
    })
    .await
    .into_response()
}

async fn correct(State(s): State<AppState>, Path(id): Path<String>, Json(req): Json<CorrectRequest>) -> Response {
    let pipeline = s.pipeline.clone();
    s.call(move |p| {
        let (outcome, ticket) = p.correct(&id, req)?;
        spawn_jobs(&pipeline, ticket);
        Ok(outcome)
    })
    .await
    .into_response()
}

async fn corrections(State(s): State<AppState>) -> Response {
    s.call(|p| Ok(p.corrections())).await.into_response()
}

async fn secondary(State(s): State<AppState>) -> Response {
    s.call(|p| Ok(p.secondary_queue())).await.into_response()
}

async fn adjudicate(State(s): State<AppState>, Path(id): Path<String>, Json(req): Json<AdjudicateRequest>) -> Response {
    let pipeline = s.pipeline.clone();
    s.call(move |p| {
        let (outcome, ticket) = p.adjudicate(&id, req)?;
        spawn_jobs(&pipeline, ticket);
        Ok(outcome)
    })
    .await
    .into_response()
}

async fn jobs(State(s): State<AppState>) -> Response {
    s.call(|p| Ok(p.jobs())).await.into_response()
}

async fn job(State(s): State<AppState>, Path(id): Path<String>) -> Response {
    s.call(move |p| p.job(&id).ok_or_else(|| PipelineError::NotFound(format!("job `{id}`"))))
        .await
        .into_response()
}

async fn metrics(State(s): State<AppState>) -> Response {
    s.call(|p| p.metrics()).await.into_response()
}

async fn models(State(s): State<AppState>) -> Response {
    s.call(|p| p.models()).await.into_response()
}

async fn rollback(State(s): State<AppState>) -> Response {
    s.call(|p| p.rollback()).await.into_response()
}

fn sse_event(e: &PipelineEvent) -> Event {
    let name = match e {
        PipelineEvent::QueueAdded { .. } => "queue_added",
        PipelineEvent::QueueRemoved { .. } => "queue_removed",
        PipelineEvent::JobStarted { .. } => "job_started",
        PipelineEvent::JobFinished { .. } => "job_finished",
        PipelineEvent::ModelSwapped { .. } => "model_swapped",
    };
    Event::default().event(name).data(serde_json::to_string(e).expect("events serialize"))
}

async fn events_stream(State(s): State<AppState>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = s.events.subscribe();
    let stream = futures::stream::unfold(rx, |mut rx| async move {
        let event = match rx.recv().await {
            Ok(e) => sse_event(&e),
            Err(broadcast::error::RecvError::Lagged(n)) => {
                log::warn!("event subscriber lagged by {n} events");
                Event::default().event("lagged").data(n.to_string())
            }
            Err(broadcast::error::RecvError::Closed) => return None,
        };
        Some((Ok(event), rx))
    });
    Sse::new(stream).keep_alive(KeepAlive::default())
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    pipeline: Arc<Pipeline>,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), ServerError> {
    axum::serve(listener, router(pipeline)).with_graceful_shutdown(shutdown).await?;
    Ok(())
}

/// Opens the pipeline for `config` and serves on `config.bind` until Ctrl-C.
pub fn run(config: ServiceConfig) -> Result<(), ServerError> {
    let pipeline = Arc::new(Pipeline::open(config)?);
    let bind = pipeline.config().bind.clone();
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&bind)
            .await
            .map_err(|source| ServerError::Bind { addr: bind.clone(), source })?;
        log::info!("listening on {}", listener.local_addr()?);
        serve(pipeline, listener, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
    })
}

/// A server running on a background thread, stopped on drop.
#[derive(Debug)]
pub struct ServerHandle {
    addr: SocketAddr,
    pipeline: Arc<Pipeline>,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<Result<(), ServerError>>>,
}

impl ServerHandle {
    /// Binds `addr` (port 0 picks a free port) and serves `pipeline`.
    pub fn start(pipeline: Pipeline, addr: &str) -> Result<Self, ServerError> {
        let pipeline = Arc::new(pipeline);
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
        let std_listener =
            std::net::TcpListener::bind(addr).map_err(|source| ServerError::Bind { addr: addr.into(), source })?;
        std_listener.set_nonblocking(true)?;
        let local = std_listener.local_addr()?;
        let (stop, stopped) = oneshot::channel();
        let served = pipeline.clone();
        let thread = std::thread::Builder::new().name("sentinel-http".into()).spawn(move || {
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(std_listener)?;
                serve(served, listener, async {
                    let _ = stopped.await;
                })
                .await
            })
        })?;
        Ok(ServerHandle { addr: local, pipeline, stop: Some(stop), thread: Some(thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn pipeline(&self) -> &Arc<Pipeline> {
        &self.pipeline
    }

    /// Stops accepting requests and waits for the server thread.
    pub fn shutdown(mut self) -> Result<(), ServerError> {
        self.stop_and_join()
    }

    fn stop_and_join(&mut self) -> Result<(), ServerError> {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        match self.thread.take().map(|t| t.join()) {
            Some(Ok(r)) => r,
            Some(Err(_)) => Err(ServerError::Io(std::io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.stop_and_join();
    }
}
