//! HTTP loop service: context submission, FIFO-queued inference, result
//! polling and feedback.
//!
//! Every job that mutates the engine goes through one queue. Workers take a
//! job and the engine lock together, so engine work happens in queue order
//! no matter how many workers run. Engine time is the timestamp of the data
//! being processed; nothing reads the wall clock except latency accounting.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::engine::{Engine, EngineError};
use crate::event::{EventBody, Label, ResponseBody, SensorEvent, UserId, UserResponse};
use crate::policy::{InterventionPayload, PolicyError};
use crate::schedule::Phase;
use crate::time::Timestamp;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: String,
    pub workers: usize,
    /// Raw submissions and results are appended here as NDJSON when set.
    pub data_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind: "127.0.0.1:8080".into(),
            workers: 2,
            data_dir: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("invalid payload: {0}")]
    Invalid(String),
    #[error("unknown user `{0}`")]
    UnknownUser(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("unknown intervention `{0}`")]
    UnknownIntervention(String),
    #[error("feedback for `{0}` was already recorded")]
    Conflict(String),
    #[error("service is shutting down")]
    Closed,
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ServiceError {
    fn status(&self) -> StatusCode {
        match self {
            ServiceError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::UnknownUser(_)
            | ServiceError::UnknownTask(_)
            | ServiceError::UnknownIntervention(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Closed => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::Engine(_) | ServiceError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status(), Json(json!({ "error": self.to_string() }))).into_response()
    }
}

/// A sensor event as the client sends it; the user comes from the envelope.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientEvent {
    pub timestamp: Timestamp,
    #[serde(flatten)]
    pub body: EventBody,
}

/// Events collected since the last submission plus the decision instant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextSubmission {
    pub user_id: UserId,
    pub ts: Timestamp,
    #[serde(default)]
    pub events: Vec<ClientEvent>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionEnd {
    pub user_id: UserId,
    pub ts: Timestamp,
    pub app_id: String,
    pub app_category: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackSubmission {
    /// The payload's `feedback_token`.
    pub token: String,
    pub agree: bool,
    pub ts: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackAck {
    pub token: String,
    pub corpus_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClockAdvance {
    pub ts: Timestamp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Queued,
    Processing,
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub phase: Option<Phase>,
    /// Model label and score; absent when no model ran for this instant.
    pub label: Option<Label>,
    pub score: Option<f64>,
    /// False when the triggering session ended before the result was ready.
    pub deliverable: bool,
    pub intervention: Option<InterventionPayload>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskView {
    pub task_id: String,
    pub user_id: UserId,
    pub decision_ts: Timestamp,
    pub status: TaskStatus,
    pub result: Option<TaskResult>,
    pub error: Option<String>,
    /// Position in completion order.
    pub completed_seq: Option<u64>,
    /// Wall-clock time from submission to completion.
    pub latency_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelStatus {
    pub user_id: UserId,
    pub phase: Option<Phase>,
    pub model_available: bool,
    pub personalized_checksum: Option<String>,
    pub adaptive_checksum: Option<String>,
    pub last_trained_at: Option<Timestamp>,
    pub corpus_size: usize,
    pub user_examples: usize,
}

struct TaskEntry {
    view: TaskView,
    submitted: Instant,
}

enum Job {
    Context { task_id: String, sub: ContextSubmission },
    Events { events: Vec<SensorEvent> },
    Clock { ts: Timestamp },
}

struct Shared {
    engine: Mutex<Engine>,
    tasks: Mutex<HashMap<String, TaskEntry>>,
    /// Latest reported session end per user.
    ended: Mutex<HashMap<UserId, Timestamp>>,
    pending: AtomicUsize,
    idle: Condvar,
    idle_lock: Mutex<()>,
    paused: Mutex<bool>,
    resume: Condvar,
    next_task: AtomicU64,
    next_done: AtomicU64,
    sink: Option<Mutex<BufWriter<File>>>,
    workers: usize,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

/// The running service: queue, workers and shared engine.
pub struct Service {
    shared: Arc<Shared>,
    tx: Mutex<Option<Sender<Job>>>,
    handles: Mutex<Vec<JoinHandle<()>>>,
}

impl Service {
    /// Starts `config.workers` workers around `engine`. Decision instants
    /// come from clients, so the engine's own scheduling is switched off.
    pub fn start(mut engine: Engine, config: &ServiceConfig) -> Result<Arc<Service>, ServiceError> {
        engine.set_auto_instants(false);
        let sink = match &config.data_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(dir.join("service.ndjson"))?;
                Some(Mutex::new(BufWriter::new(f)))
            }
            None => None,
        };
        let workers = config.workers.max(1);
        let shared = Arc::new(Shared {
            engine: Mutex::new(engine),
            tasks: Mutex::new(HashMap::new()),
            ended: Mutex::new(HashMap::new()),
            pending: AtomicUsize::new(0),
            idle: Condvar::new(),
            idle_lock: Mutex::new(()),
            paused: Mutex::new(false),
            resume: Condvar::new(),
            next_task: AtomicU64::new(0),
            next_done: AtomicU64::new(0),
            sink,
            workers,
        });
        let (tx, rx) = channel::<Job>();
        let rx = Arc::new(Mutex::new(rx));
        let handles = (0..workers)
            .map(|i| {
                let shared = shared.clone();
                let rx = rx.clone();
                std::thread::Builder::new()
                    .name(format!("nudge-worker-{i}"))
                    .spawn(move || worker(shared, rx))
                    .expect("spawn worker")
            })
            .collect();
        Ok(Arc::new(Service {
            shared,
            tx: Mutex::new(Some(tx)),
            handles: Mutex::new(handles),
        }))
    }

    fn enqueue(&self, job: Job) -> Result<(), ServiceError> {
        let tx = lock(&self.tx);
        let tx = tx.as_ref().ok_or(ServiceError::Closed)?;
        self.shared.pending.fetch_add(1, Ordering::SeqCst);
        tx.send(job).map_err(|_| {
            self.shared.pending.fetch_sub(1, Ordering::SeqCst);
            ServiceError::Closed
        })
    }

    fn persist(&self, kind: &str, value: serde_json::Value) {
        persist(&self.shared, kind, value);
    }

    fn check_user(&self, user: &UserId) -> Result<(), ServiceError> {
        lock(&self.shared.engine)
            .user_index(user)
            .map(|_| ())
            .map_err(|_| ServiceError::UnknownUser(user.to_string()))
    }

    /// Validates and enqueues a submission; returns the task id.
    pub fn submit_context(&self, sub: ContextSubmission) -> Result<String, ServiceError> {
        for (i, e) in sub.events.iter().enumerate() {
            SensorEvent::new(sub.user_id.clone(), e.timestamp, e.body.clone())
                .validate()
                .map_err(|err| ServiceError::Invalid(format!("events[{i}]: {err}")))?;
            if e.timestamp > sub.ts {
                return Err(ServiceError::Invalid(format!(
                    "events[{i}]: timestamp is after the decision instant"
                )));
            }
        }
        self.check_user(&sub.user_id)?;
        let n = self.shared.next_task.fetch_add(1, Ordering::SeqCst);
        let task_id = format!("t{n:08}");
        lock(&self.shared.tasks).insert(
            task_id.clone(),
            TaskEntry {
                view: TaskView {
                    task_id: task_id.clone(),
                    user_id: sub.user_id.clone(),
                    decision_ts: sub.ts,
                    status: TaskStatus::Queued,
                    result: None,
                    error: None,
                    completed_seq: None,
                    latency_ms: None,
                },
                submitted: Instant::now(),
            },
        );
        self.persist("context", json!({ "task_id": task_id, "submission": sub }));
        self.enqueue(Job::Context {
            task_id: task_id.clone(),
            sub,
        })?;
        Ok(task_id)
    }

    pub fn task(&self, id: &str) -> Result<TaskView, ServiceError> {
        lock(&self.shared.tasks)
            .get(id)
            .map(|t| t.view.clone())
            .ok_or_else(|| ServiceError::UnknownTask(id.to_string()))
    }

    /// Marks the session ended at once, for the stale-result guard, and
    /// queues the exit event behind earlier submissions.
    pub fn end_session(&self, end: SessionEnd) -> Result<(), ServiceError> {
        self.check_user(&end.user_id)?;
        let event = SensorEvent::new(
            end.user_id.clone(),
            end.ts,
            EventBody::AppExit {
                app_id: end.app_id.clone(),
                app_category: end.app_category.clone(),
            },
        );
        event
            .validate()
            .map_err(|e| ServiceError::Invalid(e.to_string()))?;
        {
            let mut ended = lock(&self.shared.ended);
            let t = ended.entry(end.user_id.clone()).or_insert(end.ts);
            *t = (*t).max(end.ts);
        }
        self.persist("session_end", json!(end));
        self.enqueue(Job::Events {
            events: vec![event],
        })
    }

    /// Records feedback for a delivered intervention; duplicates conflict.
    pub fn submit_feedback(&self, fb: FeedbackSubmission) -> Result<FeedbackAck, ServiceError> {
        let mut engine = lock(&self.shared.engine);
        let idx = engine
            .find_record(&fb.token)
            .ok_or_else(|| ServiceError::UnknownIntervention(fb.token.clone()))?;
        match engine.submit_feedback(idx, fb.agree, fb.ts) {
            Ok(_) => {}
            Err(EngineError::Policy(PolicyError::DuplicateFeedback(id))) => {
                return Err(ServiceError::Conflict(id))
            }
            Err(e) => return Err(e.into()),
        }
        let ack = FeedbackAck {
            token: fb.token.clone(),
            corpus_size: engine.corpus().len(),
        };
        drop(engine);
        self.persist("feedback", json!(fb));
        Ok(ack)
    }

    /// Challenge completions and other replies.
    pub fn submit_response(&self, response: UserResponse) -> Result<(), ServiceError> {
        if let ResponseBody::Feedback {
            intervention_ts,
            agree,
        } = response.body
        {
            let token = crate::policy::intervention_id(&response.user_id, intervention_ts);
            return self
                .submit_feedback(FeedbackSubmission {
                    token,
                    agree,
                    ts: response.timestamp,
                })
                .map(|_| ());
        }
        self.check_user(&response.user_id)?;
        self.persist("response", json!(response));
        lock(&self.shared.engine).ingest_response(response)?;
        Ok(())
    }

    /// Queues a clock advance; due timers (nightly updates) fire in order.
    pub fn advance_clock(&self, ts: Timestamp) -> Result<(), ServiceError> {
        self.enqueue(Job::Clock { ts })
    }

    pub fn model_status(&self, user: &UserId) -> Result<ModelStatus, ServiceError> {
        let engine = lock(&self.shared.engine);
        let u = engine
            .user_index(user)
            .map_err(|_| ServiceError::UnknownUser(user.to_string()))?;
        let rt = &engine.users()[u];
        let user_examples = engine
            .corpus()
            .entries()
            .iter()
            .filter(|e| &e.example.user_id == user)
            .count();
        Ok(ModelStatus {
            user_id: user.clone(),
            phase: Some(rt.policy.phase),
            model_available: rt.personalized.is_some(),
            personalized_checksum: rt.personalized.as_ref().map(|m| m.checksum()),
            adaptive_checksum: rt.adaptive.as_ref().map(|m| m.checksum()),
            last_trained_at: rt.last_trained_at,
            corpus_size: engine.corpus().len(),
            user_examples,
        })
    }

    /// Jobs submitted but not yet finished.
    pub fn queue_depth(&self) -> usize {
        self.shared.pending.load(Ordering::SeqCst)
    }

    /// Holds workers before their next job until `resume`.
    pub fn pause(&self) {
        *lock(&self.shared.paused) = true;
    }

    pub fn resume(&self) {
        *lock(&self.shared.paused) = false;
        self.shared.resume.notify_all();
    }

    /// Blocks until the queue drains or `timeout` passes; true when drained.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut guard = lock(&self.shared.idle_lock);
        while self.queue_depth() > 0 {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return false;
            }
            guard = self
                .shared
                .idle
                .wait_timeout(guard, left.min(Duration::from_millis(50)))
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }
        true
    }

    /// Read access to the engine, e.g. for inspection in tests.
    pub fn with_engine<R>(&self, f: impl FnOnce(&Engine) -> R) -> R {
        f(&lock(&self.shared.engine))
    }

    /// Stops accepting work, drains the queue and joins the workers.
    pub fn shutdown(&self) {
        self.resume();
        lock(&self.tx).take();
        for h in lock(&self.handles).drain(..) {
            let _ = h.join();
        }
        if let Some(sink) = &self.shared.sink {
            let _ = lock(sink).flush();
        }
    }

    pub fn router(self: &Arc<Self>) -> Router {
        Router::new()
            .route("/health", get(health))
            .route("/v1/context", post(post_context))
            .route("/v1/tasks/{task_id}", get(get_task))
            .route("/v1/feedback", post(post_feedback))
            .route("/v1/responses", post(post_response))
            .route("/v1/sessions/end", post(post_session_end))
            .route("/v1/clock", post(post_clock))
            .route("/v1/users/{user_id}/model", get(get_model))
            .with_state(self.clone())
    }
}

fn persist(shared: &Shared, kind: &str, value: serde_json::Value) {
    if let Some(sink) = &shared.sink {
        let mut w = lock(sink);
        let line = json!({ "record": kind, "data": value });
        if let Err(e) = writeln!(w, "{line}") {
            log::warn!("cannot persist {kind}: {e}");
        }
    }
}

fn worker(shared: Arc<Shared>, rx: Arc<Mutex<Receiver<Job>>>) {
    loop {
        // Dequeue, honour a pause and take the engine all under the queue
        // lock so engine work runs in queue order.
        let (job, mut engine) = {
            let rx = lock(&rx);
            let Ok(job) = rx.recv() else {
                return;
            };
            let mut paused = lock(&shared.paused);
            while *paused {
                paused = shared
                    .resume
                    .wait(paused)
                    .unwrap_or_else(|p| p.into_inner());
            }
            drop(paused);
            (job, lock(&shared.engine))
        };
        match job {
            Job::Context { task_id, sub } => {
                set_status(&shared, &task_id, TaskStatus::Processing);
                let outcome = run_context(&shared, &mut engine, &sub);
                // Still under the engine lock, so completion order matches
                // queue order with any number of workers.
                finish(&shared, &task_id, &sub, outcome);
                drop(engine);
            }
            Job::Events { events } => {
                for e in events {
                    engine.advance_to(e.timestamp);
                    if let Err(err) = engine.ingest_event(e) {
                        log::warn!("dropped event: {err}");
                    }
                }
            }
            Job::Clock { ts } => {
                engine.advance_to(ts);
            }
        }
        if shared.pending.fetch_sub(1, Ordering::SeqCst) == 1 {
            let _g = lock(&shared.idle_lock);
            shared.idle.notify_all();
        }
    }
}

fn session_ended(shared: &Shared, user: &UserId, ts: Timestamp) -> bool {
    lock(&shared.ended).get(user).is_some_and(|&end| end >= ts)
}

fn run_context(
    shared: &Shared,
    engine: &mut Engine,
    sub: &ContextSubmission,
) -> Result<TaskResult, String> {
    let u = engine.user_index(&sub.user_id).map_err(|e| e.to_string())?;
    let mut events = sub.events.clone();
    events.sort_by_key(|e| e.timestamp);
    for e in events {
        engine.advance_to(e.timestamp);
        engine
            .ingest_event(SensorEvent::new(sub.user_id.clone(), e.timestamp, e.body))
            .map_err(|e| e.to_string())?;
    }
    engine.advance_to(sub.ts);
    if session_ended(shared, &sub.user_id, sub.ts) {
        return Ok(TaskResult {
            phase: engine.phase_at(u, sub.ts).0,
            label: None,
            score: None,
            deliverable: false,
            intervention: None,
        });
    }
    let outcome = engine.evaluate_instant(u, sub.ts);
    let intervention = outcome.record.map(|r| engine.record(r).payload());
    Ok(TaskResult {
        phase: engine.phase_at(u, sub.ts).0,
        label: outcome.prediction.map(|p| p.label),
        score: outcome.prediction.map(|p| p.score),
        deliverable: true,
        intervention,
    })
}

fn set_status(shared: &Shared, id: &str, status: TaskStatus) {
    if let Some(t) = lock(&shared.tasks).get_mut(id) {
        t.view.status = status;
    }
}

fn finish(shared: &Shared, id: &str, sub: &ContextSubmission, outcome: Result<TaskResult, String>) {
    let outcome = outcome.map(|mut r| {
        // The session may have ended while the engine was busy.
        if session_ended(shared, &sub.user_id, sub.ts) {
            r.deliverable = false;
        }
        r
    });
    let mut tasks = lock(&shared.tasks);
    let Some(t) = tasks.get_mut(id) else {
        return;
    };
    if matches!(t.view.status, TaskStatus::Done | TaskStatus::Failed) {
        return;
    }
    t.view.completed_seq = Some(shared.next_done.fetch_add(1, Ordering::SeqCst));
    t.view.latency_ms = Some(t.submitted.elapsed().as_secs_f64() * 1e3);
    match outcome {
        Ok(r) => {
            t.view.status = TaskStatus::Done;
            t.view.result = Some(r);
        }
        Err(e) => {
            t.view.status = TaskStatus::Failed;
            t.view.error = Some(e);
        }
    }
    let view = t.view.clone();
    drop(tasks);
    persist(shared, "result", json!(view));
}

type Svc = State<Arc<Service>>;

fn parse<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ServiceError> {
    serde_json::from_slice(body).map_err(|e| ServiceError::Invalid(e.to_string()))
}

async fn health(State(svc): Svc) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "queue_depth": svc.queue_depth(),
        "workers": svc.shared.workers,
    }))
}

async fn post_context(State(svc): Svc, body: axum::body::Bytes) -> Result<Response, ServiceError> {
    let sub: ContextSubmission = parse(&body)?;
    let task_id = svc.submit_context(sub)?;
    Ok((
        StatusCode::ACCEPTED,
        Json(json!({ "task_id": task_id, "status": TaskStatus::Queued })),
    )
        .into_response())
}

async fn get_task(State(svc): Svc, Path(task_id): Path<String>) -> Result<Json<TaskView>, ServiceError> {
    svc.task(&task_id).map(Json)
}

async fn post_feedback(State(svc): Svc, body: axum::body::Bytes) -> Result<Json<FeedbackAck>, ServiceError> {
    let fb: FeedbackSubmission = parse(&body)?;
    svc.submit_feedback(fb).map(Json)
}

async fn post_response(State(svc): Svc, body: axum::body::Bytes) -> Result<StatusCode, ServiceError> {
    let r: UserResponse = parse(&body)?;
    svc.submit_response(r)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn post_session_end(State(svc): Svc, body: axum::body::Bytes) -> Result<StatusCode, ServiceError> {
    let end: SessionEnd = parse(&body)?;
    svc.end_session(end)?;
    Ok(StatusCode::ACCEPTED)
}

async fn post_clock(State(svc): Svc, body: axum::body::Bytes) -> Result<StatusCode, ServiceError> {
    let c: ClockAdvance = parse(&body)?;
    svc.advance_clock(c.ts)?;
    Ok(StatusCode::ACCEPTED)
}

async fn get_model(State(svc): Svc, Path(user_id): Path<String>) -> Result<Json<ModelStatus>, ServiceError> {
    svc.model_status(&UserId::new(user_id)).map(Json)
}

/// Serves `service` on `bind` until ctrl-c.
pub async fn serve(service: Arc<Service>, bind: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, service.router())
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    service.shutdown();
    Ok(())
}
