//! HTTP routes and the per-connection session loop.

use std::collections::HashMap;
use std::future::Future;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use phri_core::dynamics::Episode;
use phri_core::net::{PredictorModel, forward_many};
use phri_core::pipeline::{PredictionWindow, derive_seed, e_rms, fine_tune, make_windows};
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::{mpsc, watch};
use tokio::task::JoinHandle;
use tokio::time::{Interval, MissedTickBehavior};
use tracing::{info, warn};

use crate::protocol::{
    Body, Configure, Export, Hello, RecordToggle, SCHEMA_VERSION, SessionMessage, TlRequest, TlResult,
};
use crate::recordings::RecordingStore;
use crate::session::{Session, Status};
use crate::store::ModelStore;
use crate::{SUPPORTED_RATES, ServiceConfig, ServiceError};

const SESSION_STREAM: u64 = 500;
const TL_STREAM: u64 = 600;

/// Shared, cheaply cloned server state.
#[derive(Clone)]
pub struct AppState {
    pub cfg: Arc<ServiceConfig>,
    pub models: ModelStore,
    pub recordings: RecordingStore,
    sessions: Arc<AtomicU64>,
    tl_runs: Arc<AtomicU64>,
    /// Sessions whose connection dropped, kept for a later resume.
    parked: Arc<Mutex<HashMap<String, Session>>>,
    shutdown: watch::Receiver<bool>,
    // Each live connection holds a clone; `serve` waits until all are dropped.
    alive: mpsc::Sender<()>,
}

impl AppState {
    pub fn new(cfg: ServiceConfig) -> (Self, watch::Sender<bool>, mpsc::Receiver<()>) {
        let (stop_tx, stop_rx) = watch::channel(false);
        let (alive_tx, alive_rx) = mpsc::channel(1);
        let state = AppState {
            models: ModelStore::new(&cfg.model_dir),
            recordings: RecordingStore::new(&cfg.recordings_dir),
            cfg: Arc::new(cfg),
            sessions: Arc::default(),
            tl_runs: Arc::default(),
            parked: Arc::default(),
            shutdown: stop_rx,
            alive: alive_tx,
        };
        (state, stop_tx, alive_rx)
    }

    fn park(&self, mut session: Session) {
        session.pause();
        self.parked
            .lock()
            .expect("session lock")
            .insert(session.id().to_string(), session);
    }

    fn unpark(&self, id: &str) -> Option<Session> {
        self.parked.lock().expect("session lock").remove(id)
    }
}

fn flush(recordings: &RecordingStore, session: &mut Session) {
    if session.buffered_records() == 0 {
        return;
    }
    match session
        .take_recording()
        .and_then(|ep| recordings.save(&ep, session.human_id()))
    {
        Ok(id) => info!(session = session.id(), recording = %id, "recording flushed"),
        Err(e) => warn!(session = session.id(), error = %e, "recording flush failed"),
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/models", get(list_models))
        .route("/recordings", get(list_recordings))
        .route("/recordings/{id}", get(get_recording))
        .route("/ws", get(ws_upgrade))
        .with_state(state)
}

/// Serves until `shutdown` resolves, then closes every session and exports
/// recordings that were not yet exported.
pub async fn serve(
    listener: TcpListener,
    cfg: ServiceConfig,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    let (state, stop_tx, mut alive_rx) = AppState::new(cfg);
    let app = router(state.clone());
    let mut stopped = stop_tx.subscribe();
    tokio::spawn(async move {
        shutdown.await;
        let _ = stop_tx.send(true);
    });
    axum::serve(listener, app)
        .with_graceful_shutdown(async move {
            let _ = stopped.wait_for(|s| *s).await;
        })
        .await
        .map_err(ServiceError::Serve)?;
    let (parked, recordings) = (state.parked.clone(), state.recordings.clone());
    drop(state);
    // Connections notice the stop signal, flush, and drop their sender.
    let _ = tokio::time::timeout(Duration::from_secs(10), alive_rx.recv()).await;
    for session in parked.lock().expect("session lock").values_mut() {
        flush(&recordings, session);
    }
    info!("service stopped");
    Ok(())
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "version": env!("CARGO_PKG_VERSION"),
        "schema_version": SCHEMA_VERSION,
    }))
}

async fn list_models(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({ "models": state.models.list() }))
}

async fn list_recordings(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({ "recordings": state.recordings.list() }))
}

async fn get_recording(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    let store = state.recordings.clone();
    match tokio::task::spawn_blocking(move || store.load(&id)).await {
        Ok(Ok(ep)) => Json(ep).into_response(),
        Ok(Err(e @ ServiceError::UnknownRecording(_))) => {
            (StatusCode::NOT_FOUND, Json(json!({ "error": e.to_string() }))).into_response()
        }
        Ok(Err(e)) => (
            StatusCode::INTERNAL_SERVER_ERROR,
            Json(json!({ "error": e.to_string() })),
        )
            .into_response(),
        Err(e) => (
            StatusCode::INTERNAL_SERVER_ERROR,
            Json(json!({ "error": e.to_string() })),
        )
            .into_response(),
    }
}

async fn ws_upgrade(State(state): State<AppState>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| connection(socket, state))
}

async fn next_tick(ticker: &mut Option<Interval>) {
    match ticker {
        Some(t) => {
            t.tick().await;
        }
        None => std::future::pending().await,
    }
}

async fn stop_requested(rx: &mut watch::Receiver<bool>) {
    let _ = rx.wait_for(|s| *s).await;
}

type TlTask = JoinHandle<Result<(TlResult, Arc<PredictorModel>), ServiceError>>;

async fn join_tl(task: &mut Option<TlTask>) -> Result<(TlResult, Arc<PredictorModel>), ServiceError> {
    match task {
        Some(t) => t
            .await
            .unwrap_or_else(|e| Err(ServiceError::session(format!("transfer learning task failed: {e}")))),
        None => std::future::pending().await,
    }
}

struct Conn {
    seq: u64,
    session: Option<Session>,
    ticker: Option<Interval>,
    tl: Option<TlTask>,
    swap_after_tl: bool,
}

impl Conn {
    fn frame(&mut self, body: Body) -> Message {
        self.seq += 1;
        Message::Text(SessionMessage::new(self.seq, body).to_line().into())
    }

    fn start_ticker(&mut self, rate_hz: f64) {
        let mut t = tokio::time::interval(Duration::from_secs_f64(1.0 / rate_hz));
        t.set_missed_tick_behavior(MissedTickBehavior::Burst);
        self.ticker = Some(t);
    }
}

async fn connection(socket: WebSocket, state: AppState) {
    let _alive = state.alive.clone();
    let mut shutdown = state.shutdown.clone();
    let (mut tx, mut rx) = socket.split();
    let mut conn = Conn {
        seq: 0,
        session: None,
        ticker: None,
        tl: None,
        swap_after_tl: false,
    };
    let hello = conn.frame(Body::Hello(Hello {
        agent: format!("phri-live/{}", env!("CARGO_PKG_VERSION")),
        rates_hz: SUPPORTED_RATES.to_vec(),
        models: state.models.list(),
    }));
    if tx.send(hello).await.is_err() {
        return;
    }
    let shutting_down = loop {
        let out: Vec<Body> = tokio::select! {
            biased;
            _ = stop_requested(&mut shutdown) => break true,
            incoming = rx.next() => match incoming {
                Some(Ok(Message::Text(text))) => {
                    let mut out = Vec::new();
                    for line in text.as_str().lines().filter(|l| !l.trim().is_empty()) {
                        out.extend(handle(&state, &mut conn, line).await);
                    }
                    out
                }
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break false,
                Some(Ok(_)) => Vec::new(),
            },
            res = join_tl(&mut conn.tl) => {
                conn.tl = None;
                tl_finished(&mut conn, res)
            }
            _ = next_tick(&mut conn.ticker) => {
                let Some(session) = conn.session.as_mut() else { continue };
                let out = session.tick().unwrap_or_else(|e| vec![Body::error(e.to_string())]);
                if session.status() != Status::Running {
                    conn.ticker = None;
                }
                out
            }
        };
        let mut failed = false;
        for body in out {
            let frame = conn.frame(body);
            if tx.send(frame).await.is_err() {
                failed = true;
                break;
            }
        }
        if failed {
            break false;
        }
    };
    if let Some(mut session) = conn.session.take() {
        if shutting_down {
            flush(&state.recordings, &mut session);
        }
        info!(session = session.id(), "connection closed; session paused");
        state.park(session);
    }
    let _ = tx.send(Message::Close(None)).await;
}

fn tl_finished(conn: &mut Conn, res: Result<(TlResult, Arc<PredictorModel>), ServiceError>) -> Vec<Body> {
    match res {
        Ok((mut result, model)) => {
            if conn.swap_after_tl
                && let Some(s) = conn.session.as_mut()
            {
                match s.swap_model(model) {
                    Ok(()) => result.swapped = true,
                    Err(e) => return vec![Body::TlResult(result), Body::error(e.to_string())],
                }
            }
            vec![Body::TlResult(result)]
        }
        Err(e) => vec![Body::error(e.to_string())],
    }
}

async fn handle(state: &AppState, conn: &mut Conn, line: &str) -> Vec<Body> {
    let msg = match SessionMessage::parse(line) {
        Ok(m) => m,
        Err(e) => return vec![Body::error(e)],
    };
    let kind = msg.body.kind();
    let result = match msg.body {
        Body::Hello(_) => Ok(Vec::new()),
        Body::Configure(c) => configure(state, conn, c),
        Body::Start(_) => with_session(conn, |s| s.start().map(|()| s.rate_hz())).map(|rate| {
            conn.start_ticker(rate);
            Vec::new()
        }),
        Body::Stop(_) => with_session(conn, |s| {
            s.pause();
            Ok(())
        })
        .map(|()| {
            conn.ticker = None;
            Vec::new()
        }),
        Body::ForceInput(f) => with_session(conn, |s| s.set_force(&f.force)).map(|()| Vec::new()),
        Body::RecordToggle(r) => with_session(conn, |s| {
            s.set_recording(r.recording)?;
            Ok(vec![Body::RecordToggle(RecordToggle {
                recording: s.is_recording(),
            })])
        }),
        Body::Export(_) => export(state, conn).await,
        Body::TlRequest(r) => tl_request(state, conn, r).await,
        Body::StateUpdate(_) | Body::PredictionUpdate(_) | Body::TlResult(_) | Body::Error(_) => Err(
            ServiceError::session(format!("`{kind}` messages are sent by the server only")),
        ),
    };
    result.unwrap_or_else(|e| vec![Body::error(format!("{kind}: {e}"))])
}

fn with_session<T>(
    conn: &mut Conn,
    f: impl FnOnce(&mut Session) -> Result<T, ServiceError>,
) -> Result<T, ServiceError> {
    let s = conn
        .session
        .as_mut()
        .ok_or_else(|| ServiceError::session("no session; send configure first"))?;
    f(s)
}

fn configure(state: &AppState, conn: &mut Conn, c: Configure) -> Result<Vec<Body>, ServiceError> {
    let session = match &c.session {
        Some(id) => state
            .unpark(id)
            .ok_or_else(|| ServiceError::session(format!("no paused session `{id}` to resume")))?,
        None => {
            let n = state.sessions.fetch_add(1, Ordering::Relaxed) + 1;
            let seed = derive_seed(state.cfg.seed, &[SESSION_STREAM, n]);
            Session::new(format!("s{n}"), &state.cfg, &c, &state.models, seed)?
        }
    };
    let reply = Body::Configure(session.configure().clone());
    info!(session = session.id(), "session configured");
    if let Some(old) = conn.session.replace(session) {
        state.park(old);
    }
    conn.ticker = None;
    Ok(vec![reply])
}

async fn export(state: &AppState, conn: &mut Conn) -> Result<Vec<Body>, ServiceError> {
    let (episode, prefix) = with_session(conn, |s| Ok((s.take_recording()?, s.human_id().to_string())))?;
    let records = episode.len();
    let store = state.recordings.clone();
    let id = tokio::task::spawn_blocking(move || store.save(&episode, &prefix))
        .await
        .map_err(|e| ServiceError::session(format!("export task failed: {e}")))??;
    Ok(vec![Body::Export(Export {
        recording: Some(id),
        records: Some(records),
    })])
}

async fn tl_request(state: &AppState, conn: &mut Conn, r: TlRequest) -> Result<Vec<Body>, ServiceError> {
    if conn.tl.is_some() {
        return Err(ServiceError::session("transfer learning is already running"));
    }
    if r.epochs == Some(0) {
        return Err(ServiceError::session("epochs must be at least 1"));
    }
    let (base, human) = with_session(conn, |s| {
        let m = s
            .model()
            .cloned()
            .ok_or_else(|| ServiceError::session("session runs without a predictor to fine-tune"))?;
        Ok((m, s.human_id().to_string()))
    })?;
    let n = state.tl_runs.fetch_add(1, Ordering::Relaxed) + 1;
    let seed = derive_seed(state.cfg.seed, &[TL_STREAM, n]);
    let (cfg, models, recordings) = (state.cfg.clone(), state.models.clone(), state.recordings.clone());
    conn.swap_after_tl = r.swap;
    conn.tl = Some(tokio::task::spawn_blocking(move || {
        let found = recordings.for_human(&human)?;
        if found.is_empty() {
            return Err(ServiceError::session(format!(
                "no exported recordings for `{human}`; record and export first"
            )));
        }
        let (ids, episodes): (Vec<String>, Vec<Episode>) = found.into_iter().unzip();
        let mut train = cfg.train.clone();
        if let Some(e) = r.epochs {
            train.tl_epochs = e;
        }
        transfer(&models, &base, ids, &episodes, &train, seed)
    }));
    Ok(Vec::new())
}

/// Fine-tunes the head of `base` on the recordings and scores both models on
/// them at the longest horizon.
pub fn transfer(
    models: &ModelStore,
    base: &PredictorModel,
    recording_ids: Vec<String>,
    episodes: &[Episode],
    train: &phri_core::pipeline::TrainConfig,
    seed: u64,
) -> Result<(TlResult, Arc<PredictorModel>), ServiceError> {
    let started = Instant::now();
    let mut tuned = fine_tune(base, episodes, train, seed)?.model;
    let existing = models.list();
    tuned.version_tag = (1..)
        .map(|n| format!("{}+tl-{n}", base.version_tag))
        .find(|id| !existing.contains(id))
        .expect("unbounded range");
    let seconds = started.elapsed().as_secs_f64();
    let horizon = base.config.horizon_n;
    let pre = recording_e_rms(base, episodes)?;
    let post = recording_e_rms(&tuned, episodes)?;
    let tuned = models.insert(tuned)?;
    Ok((
        TlResult {
            base_model: base.version_tag.clone(),
            model: tuned.version_tag.clone(),
            horizon,
            pre_e_rms: pre,
            post_e_rms: post,
            recordings: recording_ids,
            seconds,
            swapped: false,
        },
        tuned,
    ))
}

/// Open-loop e_RMS of `model` over every full window of the recordings.
pub fn recording_e_rms(model: &PredictorModel, episodes: &[Episode]) -> Result<f64, ServiceError> {
    let (k, n) = (model.config.window_k, model.config.horizon_n);
    let mut windows = Vec::new();
    for ep in episodes {
        let pairs = make_windows(ep, k, n);
        let inputs: Vec<_> = pairs.iter().map(|(w, _)| w).collect();
        let preds = forward_many(model, &inputs)?;
        for (step, ((_, target), predicted)) in pairs.iter().zip(preds).enumerate() {
            let measured = target.row_iter().map(|r| r.iter().copied().collect()).collect();
            windows.push(PredictionWindow {
                step: step + k - 1,
                predicted,
                measured,
            });
        }
    }
    Ok(e_rms(&windows, n)?)
}
