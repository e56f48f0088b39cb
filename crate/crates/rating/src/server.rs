//! HTTP/JSON service for raters.
//!
//! | method | path              | body / query              | reply                          |
//! |--------|-------------------|---------------------------|--------------------------------|
//! | GET    | `/api/session`    | `?rater=` to resume       | [`SessionInfo`]                |
//! | GET    | `/api/trial/{i}`  | `?rater=` for own order   | [`TrialPayload`], 404 past end |
//! | POST   | `/api/choice`     | [`ChoiceRequest`]         | [`ChoiceAck`], 409 duplicate   |
//! | GET    | `/api/result`     |                           | `HumComResult`, 409 until done |

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use dvaegan_core::model::StimulusImage;
use dvaegan_core::{Error, Result};
use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder};
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;
use tower_http::services::ServeDir;

use crate::events::{log_path, replay, Event, EventLog};
use crate::session::{score, Choice, RatingSession, RecordError, Side, Status, SESSION_VERSION};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub n_trials: usize,
    pub rater: String,
    /// Trial ids this rater has already answered.
    pub completed: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Candidates {
    #[serde(rename = "A")]
    pub a: String,
    #[serde(rename = "B")]
    pub b: String,
}

/// What a client sees of one trial: position, id and three PNG data URIs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialPayload {
    pub index: usize,
    pub trial: usize,
    pub n_trials: usize,
    pub reconstruction: String,
    pub candidates: Candidates,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChoiceRequest {
    pub trial: usize,
    pub side: Side,
    pub rater: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChoiceAck {
    pub trial: usize,
    pub answered: usize,
    pub n_trials: usize,
}

pub fn png_data_uri(img: &StimulusImage) -> Result<String> {
    let [c, h, w] = img.shape;
    let colour = match c {
        1 => ExtendedColorType::L8,
        3 => ExtendedColorType::Rgb8,
        _ => return Err(Error::Contract(format!("cannot render a {c}-channel image"))),
    };
    let plane = h * w;
    let mut bytes = Vec::with_capacity(c * plane);
    for p in 0..plane {
        for ch in 0..c {
            bytes.push((img.pixels[ch * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let mut png = Vec::new();
    PngEncoder::new(&mut png)
        .write_image(&bytes, w as u32, h as u32, colour)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(format!("data:image/png;base64,{}", base64::engine::general_purpose::STANDARD.encode(png)))
}

pub fn load_session(path: &Path) -> Result<RatingSession> {
    let s: RatingSession = serde_json::from_slice(&std::fs::read(path)?)?;
    if s.version != SESSION_VERSION {
        return Err(Error::Config(format!("session version {} (expected {SESSION_VERSION})", s.version)));
    }
    if s.trials.is_empty() {
        return Err(Error::Contract("session has no trials".into()));
    }
    Ok(s)
}

pub fn save_session(path: &Path, session: &RatingSession) -> Result<()> {
    std::fs::write(path, serde_json::to_vec(session)?)?;
    Ok(())
}

struct Live {
    session: RatingSession,
    log: Option<EventLog>,
}

pub struct AppState {
    session_id: String,
    per_rater_order: bool,
    force_result: bool,
    /// `[reconstruction, A, B]` per trial, rendered once.
    rendered: Vec<[String; 3]>,
    live: Mutex<Live>,
}

impl AppState {
    /// `log` receives every accepted event; the session should already hold
    /// whatever the log replayed.
    pub fn new(session: RatingSession, log: Option<EventLog>, force_result: bool) -> Result<Self> {
        let rendered = session
            .trials
            .iter()
            .map(|t| Ok([png_data_uri(&t.reconstruction)?, png_data_uri(&t.a)?, png_data_uri(&t.b)?]))
            .collect::<Result<_>>()?;
        Ok(Self {
            session_id: session.id.clone(),
            per_rater_order: session.per_rater_order,
            force_result,
            rendered,
            live: Mutex::new(Live { session, log }),
        })
    }

    /// Session file plus its event log, replayed.
    pub fn from_file(session_file: &Path, force_result: bool) -> Result<Self> {
        let mut session = load_session(session_file)?;
        let log = log_path(session_file);
        let n = replay(&log, &mut session)?;
        log::info!("{}: replayed {n} events", log.display());
        Self::new(session, Some(EventLog::open(&log)?), force_result)
    }

    pub fn snapshot(&self) -> RatingSession {
        self.live.lock().expect("state lock").session.clone()
    }
}

fn json_error(code: StatusCode, msg: impl Into<String>) -> Response {
    (code, Json(serde_json::json!({ "error": msg.into() }))).into_response()
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

#[derive(Deserialize)]
struct RaterQuery {
    rater: Option<String>,
}

async fn session_info(State(st): State<Arc<AppState>>, Query(q): Query<RaterQuery>) -> Response {
    let mut live = st.live.lock().expect("state lock");
    let rater = match q.rater {
        Some(r) if !r.trim().is_empty() => r,
        _ => format!("rater-{:04}", live.session.raters.len() + 1),
    };
    if !live.session.raters.contains(&rater) {
        if let Some(log) = live.log.as_mut() {
            if let Err(e) = log.append(&Event::Register { rater: rater.clone() }) {
                return json_error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
            }
        }
        live.session.register(&rater);
    }
    let completed = live.session.answered(&rater).into_iter().collect();
    Json(SessionInfo { session_id: st.session_id.clone(), n_trials: st.rendered.len(), rater, completed }).into_response()
}

async fn trial(State(st): State<Arc<AppState>>, UrlPath(index): UrlPath<usize>, Query(q): Query<RaterQuery>) -> Response {
    let n = st.rendered.len();
    if index >= n {
        return json_error(StatusCode::NOT_FOUND, format!("no trial {index}; the session has {n}"));
    }
    let id = if st.per_rater_order {
        st.live.lock().expect("state lock").session.order_for(q.rater.as_deref())[index]
    } else {
        index
    };
    let [r, a, b] = st.rendered[id].clone();
    Json(TrialPayload { index, trial: id, n_trials: n, reconstruction: r, candidates: Candidates { a, b } }).into_response()
}

async fn choice(State(st): State<Arc<AppState>>, Json(req): Json<ChoiceRequest>) -> Response {
    let mut live = st.live.lock().expect("state lock");
    let c = Choice { trial: req.trial, side: req.side, rater: req.rater.clone(), timestamp_ms: now_ms() };
    match live.session.record(c.clone()) {
        Ok(()) => {}
        Err(e @ RecordError::UnknownTrial(_)) => return json_error(StatusCode::NOT_FOUND, e.to_string()),
        Err(e @ RecordError::UnknownRater(_)) => return json_error(StatusCode::BAD_REQUEST, e.to_string()),
        Err(e @ RecordError::Duplicate { .. }) => return json_error(StatusCode::CONFLICT, e.to_string()),
    }
    if let Some(log) = live.log.as_mut() {
        if let Err(e) = log.append(&Event::Choice(c)) {
            live.session.choices.pop();
            return json_error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
        }
    }
    let answered = live.session.answered(&req.rater).len();
    Json(ChoiceAck { trial: req.trial, answered, n_trials: st.rendered.len() }).into_response()
}

async fn result(State(st): State<Arc<AppState>>) -> Response {
    let live = st.live.lock().expect("state lock");
    if live.session.status() != Status::Complete && !st.force_result {
        let done = live.session.raters.iter().filter(|r| live.session.answered(r).len() == st.rendered.len()).count();
        return json_error(
            StatusCode::CONFLICT,
            format!("{done} of {} raters have finished; start the service with --force-result to score early", live.session.raters.len()),
        );
    }
    match score(&live.session) {
        Ok(r) => Json(r).into_response(),
        Err(e) => json_error(StatusCode::CONFLICT, e.to_string()),
    }
}

pub fn router(state: Arc<AppState>, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/session", get(session_info))
        .route("/api/trial/{index}", get(trial))
        .route("/api/choice", post(choice))
        .route("/api/result", get(result))
        .with_state(state);
    match static_dir {
        Some(d) => api.fallback_service(ServeDir::new(d)),
        None => api,
    }
}

#[derive(Clone, Debug)]
pub struct ServeConfig {
    pub session_file: PathBuf,
    pub bind: SocketAddr,
    pub force_result: bool,
    pub static_dir: Option<PathBuf>,
}

pub struct RunningService {
    pub addr: SocketAddr,
    pub state: Arc<AppState>,
    shutdown: oneshot::Sender<()>,
    handle: tokio::task::JoinHandle<std::io::Result<()>>,
}

impl RunningService {
    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub async fn stop(self) -> Result<()> {
        let _ = self.shutdown.send(());
        self.handle.await.map_err(|e| Error::Io(std::io::Error::other(e)))??;
        Ok(())
    }
}

/// Binds and serves on the current runtime until stopped.
pub async fn start(state: Arc<AppState>, bind: SocketAddr, static_dir: Option<&Path>) -> Result<RunningService> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    let addr = listener.local_addr()?;
    let app = router(state.clone(), static_dir);
    let (tx, rx) = oneshot::channel::<()>();
    let handle = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await
    });
    Ok(RunningService { addr, state, shutdown: tx, handle })
}

/// Serves a session file until interrupted.
pub async fn serve(cfg: &ServeConfig) -> Result<()> {
    let state = Arc::new(AppState::from_file(&cfg.session_file, cfg.force_result)?);
    let svc = start(state, cfg.bind, cfg.static_dir.as_deref()).await?;
    log::info!("rating service on {}", svc.base_url());
    tokio::signal::ctrl_c().await?;
    svc.stop().await
}
