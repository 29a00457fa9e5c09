//! Live session service.
//!
//! A single worker task owns the glove pipeline and the running session.
//! WebSocket clients send control messages into the worker's queue and all
//! receive the same broadcast event stream; HTTP handlers read a snapshot
//! the worker publishes after every change.

use std::future::Future;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use futures_util::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::{broadcast, mpsc, oneshot};
use tracing::{info, warn};
use vibrotwin::analysis::summarize;
use vibrotwin::experiment::{PairPolicy, SessionState, TrialRecord};
use vibrotwin::pipeline::{Pipeline, PipelineConfig, PipelineEvent};
use vibrotwin::{
    builtin_mode, default_layout, gen_plan, BodySite, ChannelConfig, EncoderConfig, GraspObject,
    GraspScenario, LiveSession, ModeId, MotorCommand, PiezoModel, Protocol, ScanConfig,
    SessionConfig, SessionLog, Stimulus,
};

use crate::store::LogStore;
use crate::Error;

pub const BIND_ENV: &str = "VIBROTWIN_BIND";
pub const DEFAULT_BIND: &str = "127.0.0.1:7878";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub log_dir: PathBuf,
    pub seed: u64,
    pub object: GraspObject,
    pub grip: f64,
    pub mode: ModeId,
    pub threshold: f64,
    pub scan_rate_hz: f64,
    /// Rate of `frame` messages; the pipeline itself runs at the scan rate.
    pub observer_hz: f64,
    /// Run the glove pipeline and stream its frames.
    pub stream: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            log_dir: PathBuf::from("logs"),
            seed: 0,
            object: GraspObject::Ball,
            grip: 1.0,
            mode: ModeId::from_str("finger:6").expect("builtin mode"),
            threshold: 0.5,
            scan_rate_hz: 100.0,
            observer_hz: 20.0,
            stream: true,
        }
    }
}

/// Client-to-service message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum Control {
    Start {
        protocol: Protocol,
        #[serde(default)]
        site: Option<String>,
        #[serde(default)]
        participant: Option<String>,
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default)]
        session_id: Option<String>,
        #[serde(default)]
        policy: Option<PairPolicy>,
        #[serde(default)]
        mode: Option<ModeId>,
    },
    /// `response: null` records no answer. Object trials send `elapsed_ms`.
    Response {
        #[serde(default)]
        response: Option<Stimulus>,
        #[serde(default)]
        elapsed_ms: Option<f64>,
    },
    Abort {},
    SetMode {
        mode: ModeId,
    },
    SetThreshold {
        threshold: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventType {
    Frame,
    MotorState,
    TrialStart,
    Response,
    TrialResult,
    SessionSummary,
    Control,
}

impl EventType {
    fn name(self) -> &'static str {
        match self {
            EventType::Frame => "frame",
            EventType::MotorState => "motor_state",
            EventType::TrialStart => "trial_start",
            EventType::Response => "response",
            EventType::TrialResult => "trial_result",
            EventType::SessionSummary => "session_summary",
            EventType::Control => "control",
        }
    }
}

/// Service-to-client event, as parsed by a client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiMessage {
    pub event_id: u64,
    #[serde(rename = "type")]
    pub kind: EventType,
    pub body: serde_json::Value,
}

/// Writes an event with `body_json` spliced in verbatim, so a summary body
/// keeps the exact bytes the analysis module produced.
pub fn render_event(event_id: u64, kind: EventType, body_json: &str) -> String {
    format!(
        r#"{{"event_id":{event_id},"type":"{}","body":{body_json}}}"#,
        kind.name()
    )
}

/// Reply to one client only; carries no event id.
pub fn render_error(message: &str) -> String {
    json!({ "type": "error", "body": { "message": message } }).to_string()
}

#[derive(Debug, Clone, Serialize)]
struct TrialStart<'a> {
    session_id: &'a str,
    trial_index: usize,
    total: usize,
    protocol: Protocol,
}

#[derive(Debug, Clone, Serialize)]
struct MotorState<'a> {
    source: &'a str,
    command: &'a MotorCommand,
}

#[derive(Debug, Clone, Serialize)]
struct ControlEvent<'a> {
    action: &'a str,
    session_id: Option<&'a str>,
    state: Option<SessionState>,
    mode: ModeId,
    threshold: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Snapshot {
    pub session_id: Option<String>,
    pub state: Option<SessionState>,
    pub progress: Option<(usize, usize)>,
    pub last_event_id: Option<u64>,
    pub mode: Option<ModeId>,
    pub threshold: f64,
    #[serde(skip)]
    pub log: Option<SessionLog>,
}

type ControlRequest = (Control, oneshot::Sender<Result<(), String>>);

/// Handle to a running service worker.
#[derive(Clone)]
pub struct Service {
    control_tx: mpsc::Sender<ControlRequest>,
    events: broadcast::Sender<String>,
    snapshot: Arc<RwLock<Snapshot>>,
    store: LogStore,
    started: Instant,
}

impl Service {
    /// Spawns the worker on the current tokio runtime.
    pub fn start(cfg: ServiceConfig) -> Result<Service, Error> {
        let store = LogStore::open(&cfg.log_dir)?;
        let layout = default_layout();
        let mode = builtin_mode(cfg.mode.focus, cfg.mode.num_motors, &layout)?;
        let pipeline = if cfg.stream {
            Some(Pipeline::new(
                GraspScenario::new(cfg.object, cfg.grip),
                layout,
                PiezoModel::default(),
                ScanConfig::row_major(Default::default(), cfg.scan_rate_hz),
                mode,
                EncoderConfig::binary(cfg.threshold),
                PipelineConfig {
                    channel: ChannelConfig::ideal(10.0),
                    ..PipelineConfig::default()
                },
                cfg.seed,
            )?)
        } else {
            None
        };
        let (control_tx, control_rx) = mpsc::channel(64);
        let (events, _) = broadcast::channel(4096);
        let started = Instant::now();
        let snapshot = Arc::new(RwLock::new(Snapshot {
            mode: Some(cfg.mode),
            threshold: cfg.threshold,
            ..Snapshot::default()
        }));
        let worker = Worker {
            frame_every: (cfg.scan_rate_hz / cfg.observer_hz).round().max(1.0) as u64,
            mode: cfg.mode,
            threshold: cfg.threshold,
            cfg,
            store: store.clone(),
            events: events.clone(),
            snapshot: snapshot.clone(),
            started,
            next_event_id: 0,
            session: None,
            session_counter: 0,
            pipeline,
            frames_seen: 0,
            last_glove_motors: None,
        };
        tokio::spawn(worker.run(control_rx));
        Ok(Service {
            control_tx,
            events,
            snapshot,
            store,
            started,
        })
    }

    pub fn subscribe(&self) -> broadcast::Receiver<String> {
        self.events.subscribe()
    }

    /// Queues a control message and waits for the worker's verdict.
    pub async fn control(&self, control: Control) -> Result<(), String> {
        let (tx, rx) = oneshot::channel();
        self.control_tx
            .send((control, tx))
            .await
            .map_err(|_| "service is shutting down".to_string())?;
        rx.await
            .map_err(|_| "service is shutting down".to_string())?
    }

    pub fn snapshot(&self) -> Snapshot {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    pub fn store(&self) -> &LogStore {
        &self.store
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/session", get(ws_upgrade))
            .route("/health", get(health))
            .route("/sessions", get(sessions))
            .route("/sessions/{id}/log", get(session_log))
            .with_state(self.clone())
    }
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    service: Service,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    info!(addr = %listener.local_addr()?, "serving");
    axum::serve(listener, service.router())
        .with_graceful_shutdown(shutdown)
        .await
}

async fn health(State(s): State<Service>) -> Json<serde_json::Value> {
    let snap = s.snapshot();
    Json(json!({
        "status": "ok",
        "uptime_ms": s.started.elapsed().as_millis() as u64,
        "session": snap,
    }))
}

async fn sessions(State(s): State<Service>) -> Response {
    match s.store.index() {
        Ok(index) => Json(index).into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

async fn session_log(State(s): State<Service>, Path(id): Path<String>) -> Response {
    let ndjson =
        |body: String| ([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response();
    match s.store.raw(&id) {
        Ok(Some(text)) => ndjson(text),
        Ok(None) => {
            let live = s.snapshot().log.filter(|l| l.header.session_id == id);
            match live {
                Some(log) => ndjson(log.to_jsonl()),
                None => (StatusCode::NOT_FOUND, format!("no session {id}")).into_response(),
            }
        }
        Err(e) => (StatusCode::BAD_REQUEST, e.to_string()).into_response(),
    }
}

async fn ws_upgrade(State(s): State<Service>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| client(socket, s))
}

async fn client(socket: WebSocket, service: Service) {
    let (mut sink, mut stream) = socket.split();
    let mut events = service.subscribe();
    let (reply_tx, mut reply_rx) = mpsc::channel::<String>(16);

    let writer = tokio::spawn(async move {
        loop {
            let text = tokio::select! {
                ev = events.recv() => match ev {
                    Ok(text) => text,
                    Err(broadcast::error::RecvError::Lagged(n)) => render_error(&format!("observer lagged; {n} events skipped")),
                    Err(broadcast::error::RecvError::Closed) => break,
                },
                reply = reply_rx.recv() => match reply {
                    Some(text) => text,
                    None => break,
                },
            };
            if sink.send(Message::Text(text.into())).await.is_err() {
                break;
            }
        }
    });

    while let Some(Ok(msg)) = stream.next().await {
        let text = match msg {
            Message::Text(t) => t,
            Message::Close(_) => break,
            Message::Binary(_) => {
                let _ = reply_tx
                    .send(render_error("binary messages are not supported"))
                    .await;
                continue;
            }
            _ => continue,
        };
        let verdict = match serde_json::from_str::<Control>(text.as_str()) {
            Ok(control) => service.control(control).await,
            Err(e) => Err(format!("malformed control message: {e}")),
        };
        if let Err(message) = verdict {
            if reply_tx.send(render_error(&message)).await.is_err() {
                break;
            }
        }
    }
    drop(reply_tx);
    writer.abort();
}

struct Worker {
    cfg: ServiceConfig,
    store: LogStore,
    events: broadcast::Sender<String>,
    snapshot: Arc<RwLock<Snapshot>>,
    started: Instant,
    next_event_id: u64,
    session: Option<LiveSession>,
    session_counter: u64,
    pipeline: Option<Pipeline>,
    frame_every: u64,
    frames_seen: u64,
    last_glove_motors: Option<Vec<usize>>,
    mode: ModeId,
    threshold: f64,
}

impl Worker {
    async fn run(mut self, mut control_rx: mpsc::Receiver<ControlRequest>) {
        let mut tick = tokio::time::interval(Duration::from_millis(10));
        tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
        loop {
            tokio::select! {
                req = control_rx.recv() => {
                    let Some((control, reply)) = req else { break };
                    let verdict = self.handle(control).map_err(|e| e.to_string());
                    if let Err(e) = &verdict {
                        warn!(error = %e, "control rejected");
                    }
                    let _ = reply.send(verdict);
                }
                _ = tick.tick() => self.tick(),
            }
        }
    }

    fn now_ms(&self) -> u64 {
        self.started.elapsed().as_millis() as u64
    }

    fn emit(&mut self, kind: EventType, body: &impl Serialize) {
        self.emit_raw(
            kind,
            &serde_json::to_string(body).expect("event body serializes"),
        );
    }

    fn emit_raw(&mut self, kind: EventType, body_json: &str) {
        let id = self.next_event_id;
        self.next_event_id += 1;
        // No subscribers is fine; the stream still advances.
        let _ = self.events.send(render_event(id, kind, body_json));
        self.snapshot.write().expect("snapshot lock").last_event_id = Some(id);
    }

    fn publish(&self) {
        let mut snap = self.snapshot.write().expect("snapshot lock");
        snap.session_id = self
            .session
            .as_ref()
            .map(|s| s.log().header.session_id.clone());
        snap.state = self.session.as_ref().map(LiveSession::state);
        snap.progress = self.session.as_ref().map(LiveSession::progress);
        snap.log = self.session.as_ref().map(|s| s.log().clone());
        snap.mode = Some(self.mode);
        snap.threshold = self.threshold;
    }

    fn active(&self) -> bool {
        self.session
            .as_ref()
            .is_some_and(|s| matches!(s.state(), SessionState::Training | SessionState::Testing))
    }

    fn control_event(&mut self, action: &str) {
        let session_id = self
            .session
            .as_ref()
            .map(|s| s.log().header.session_id.clone());
        let state = self.session.as_ref().map(LiveSession::state);
        let body = ControlEvent {
            action,
            session_id: session_id.as_deref(),
            state,
            mode: self.mode,
            threshold: self.threshold,
        };
        self.emit(EventType::Control, &body);
    }

    fn handle(&mut self, control: Control) -> Result<(), Error> {
        let result = match control {
            Control::Start {
                protocol,
                site,
                participant,
                seed,
                session_id,
                policy,
                mode,
            } => self.start(protocol, site, participant, seed, session_id, policy, mode),
            Control::Response {
                response,
                elapsed_ms,
            } => self.respond(response, elapsed_ms),
            Control::Abort {} => self.abort(),
            Control::SetMode { mode } => self.set_mode(mode),
            Control::SetThreshold { threshold } => self.set_threshold(threshold),
        };
        self.publish();
        result
    }

    #[allow(clippy::too_many_arguments)]
    fn start(
        &mut self,
        protocol: Protocol,
        site: Option<String>,
        participant: Option<String>,
        seed: Option<u64>,
        session_id: Option<String>,
        policy: Option<PairPolicy>,
        mode: Option<ModeId>,
    ) -> Result<(), Error> {
        if self.active() {
            return Err(Error::Conflict("a session is already running".into()));
        }
        let site = site
            .as_deref()
            .map_or(Ok(BodySite::upper_arm()), BodySite::from_str)?;
        let participant = participant.unwrap_or_else(|| "p1".into());
        let seed = seed.unwrap_or(self.cfg.seed);
        let mode = mode.or((protocol == Protocol::ObjectTask).then_some(self.mode));
        let id = match session_id {
            Some(id) => id,
            None => loop {
                self.session_counter += 1;
                let id = format!("{participant}-{protocol}-{seed}-{}", self.session_counter);
                if !self.store.contains(&id) {
                    break id;
                }
            },
        };
        self.store.path_of(&id)?;
        if self.store.contains(&id) {
            return Err(Error::Conflict(format!("session {id} already exists")));
        }
        let config = SessionConfig {
            pair_policy: policy.unwrap_or(PairPolicy::ExactMatch),
            threshold: self.threshold,
            mode,
            ..SessionConfig::default()
        };
        let plan = gen_plan(protocol, &site, seed, mode);
        let now = self.now_ms();
        let mut session = LiveSession::new(id, participant, plan, config, now);
        let training = session.begin_training(now)?;
        self.session = Some(session);
        self.control_event("start");
        for cmd in &training {
            self.emit(
                EventType::MotorState,
                &MotorState {
                    source: "training",
                    command: cmd,
                },
            );
        }
        self.session
            .as_mut()
            .expect("just set")
            .begin_testing(now)?;
        self.control_event("testing");
        self.present_or_finish()
    }

    /// Announces the next trial, or wraps up a finished session.
    fn present_or_finish(&mut self) -> Result<(), Error> {
        let now = self.now_ms();
        let session = self.session.as_mut().expect("session present");
        match session.current_prompt() {
            Some(prompt) => {
                session.mark_presented(now);
                let id = session.log().header.session_id.clone();
                let start = TrialStart {
                    session_id: &id,
                    trial_index: prompt.trial_index,
                    total: prompt.total,
                    protocol: prompt.protocol,
                };
                self.emit(EventType::TrialStart, &start);
                self.emit(
                    EventType::MotorState,
                    &MotorState {
                        source: "stimulus",
                        command: &prompt.command,
                    },
                );
                Ok(())
            }
            None => self.finish(),
        }
    }

    fn finish(&mut self) -> Result<(), Error> {
        let log = self
            .session
            .as_ref()
            .expect("session present")
            .log()
            .clone();
        self.store.save(&log)?;
        let summary = summarize(&log)?;
        self.control_event(if log.is_complete() {
            "complete"
        } else {
            "aborted"
        });
        self.emit_raw(EventType::SessionSummary, &summary.to_json());
        info!(session = %log.header.session_id, complete = log.is_complete(), "session persisted");
        Ok(())
    }

    fn respond(
        &mut self,
        response: Option<Stimulus>,
        elapsed_ms: Option<f64>,
    ) -> Result<(), Error> {
        let now = self.now_ms();
        let session = self
            .session
            .as_mut()
            .filter(|s| s.state() == SessionState::Testing)
            .ok_or_else(|| Error::Conflict("no trial is awaiting a response".into()))?;
        let record: TrialRecord = match (session.plan().protocol, elapsed_ms) {
            (Protocol::ObjectTask, Some(t)) => session.submit_elapsed(t, now)?,
            (Protocol::ObjectTask, None) => {
                return Err(Error::BadRequest("object trials need elapsed_ms".into()));
            }
            (_, Some(_)) => {
                return Err(Error::BadRequest(
                    "elapsed_ms is for object trials only".into(),
                ))
            }
            (_, None) => session.submit(response, now)?,
        };
        let id = session.log().header.session_id.clone();
        self.emit(
            EventType::Response,
            &json!({
                "session_id": id,
                "trial_index": record.trial_index,
                "response": record.response,
                "latency_ms": record.response_latency_ms,
            }),
        );
        self.emit(
            EventType::TrialResult,
            &json!({ "session_id": id, "record": record }),
        );
        self.present_or_finish()
    }

    fn abort(&mut self) -> Result<(), Error> {
        if !self.active() {
            return Err(Error::Conflict("no session to abort".into()));
        }
        let now = self.now_ms();
        self.session.as_mut().expect("active").abort(now)?;
        self.finish()
    }

    fn set_mode(&mut self, mode: ModeId) -> Result<(), Error> {
        let built = builtin_mode(mode.focus, mode.num_motors, &default_layout())?;
        if let Some(p) = &mut self.pipeline {
            p.engine_mut().set_mode(built);
        }
        self.mode = mode;
        self.control_event("set_mode");
        Ok(())
    }

    fn set_threshold(&mut self, threshold: f64) -> Result<(), Error> {
        let encoder = EncoderConfig::binary(threshold);
        encoder.validate()?;
        if let Some(p) = &mut self.pipeline {
            p.engine_mut().set_encoder(encoder)?;
        }
        self.threshold = threshold;
        self.control_event("set_threshold");
        Ok(())
    }

    fn tick(&mut self) {
        let now = self.now_ms();
        if self.session.as_ref().is_some_and(|s| s.timed_out(now)) {
            if let Err(e) = self.respond(None, None) {
                warn!(error = %e, "timeout handling failed");
            }
            self.publish();
        }
        let Some(pipeline) = &mut self.pipeline else {
            return;
        };
        let mut out = Vec::new();
        while pipeline.now_ms() < now {
            match pipeline.step() {
                Ok(events) => out.extend(events),
                Err(e) => {
                    warn!(error = %e, "pipeline step failed");
                    break;
                }
            }
        }
        for event in out {
            match event {
                PipelineEvent::Frame {
                    t_ms, pressures, ..
                } => {
                    self.frames_seen += 1;
                    if (self.frames_seen - 1).is_multiple_of(self.frame_every) {
                        self.emit(
                            EventType::Frame,
                            &json!({ "t_ms": t_ms, "values": pressures.values }),
                        );
                    }
                }
                PipelineEvent::Applied { command, .. } => {
                    let motors = command.motors();
                    if self.last_glove_motors.as_ref() != Some(&motors) {
                        self.last_glove_motors = Some(motors);
                        self.emit(
                            EventType::MotorState,
                            &MotorState {
                                source: "glove",
                                command: &command,
                            },
                        );
                    }
                }
                PipelineEvent::Command { .. } => {}
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn control_messages_parse() {
        let c: Control =
            serde_json::from_str(r#"{"action":"start","protocol":"single-location","seed":3}"#)
                .unwrap();
        assert!(matches!(
            c,
            Control::Start {
                protocol: Protocol::SingleLocation,
                seed: Some(3),
                ..
            }
        ));
        let c: Control = serde_json::from_str(
            r#"{"action":"response","response":{"kind":"pair","value":[1,4]}}"#,
        )
        .unwrap();
        assert!(matches!(
            c,
            Control::Response {
                response: Some(Stimulus::Pair(_)),
                ..
            }
        ));
        let c: Control = serde_json::from_str(r#"{"action":"set_mode","mode":"palm:3"}"#).unwrap();
        assert_eq!(
            c,
            Control::SetMode {
                mode: "palm:3".parse().unwrap()
            }
        );
        assert!(serde_json::from_str::<Control>(r#"{"action":"dance"}"#).is_err());
        assert!(serde_json::from_str::<Control>(r#"{"action":"abort","now":1}"#).is_err());
    }

    #[test]
    fn events_keep_body_bytes() {
        let text = render_event(7, EventType::SessionSummary, r#"{"b":1.5,"a":2}"#);
        assert_eq!(
            text,
            r#"{"event_id":7,"type":"session_summary","body":{"b":1.5,"a":2}}"#
        );
        let parsed: ApiMessage = serde_json::from_str(&text).unwrap();
        assert_eq!(
            (parsed.event_id, parsed.kind),
            (7, EventType::SessionSummary)
        );
        let err: serde_json::Value = serde_json::from_str(&render_error("nope")).unwrap();
        assert!(err.get("event_id").is_none());
    }
}
