//! Canonical sensing events and the append-only, replayable event log.
//!
//! Persistence is newline-delimited JSON: one record per line, each line
//! carrying the schema version `v` and an explicit `record` tag. Sensor events
//! additionally carry a `kind` tag.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::{Timestamp, UtcOffset};

/// Current schema version written on every log line.
pub const LOG_SCHEMA_VERSION: u32 = 1;

/// Opaque user identifier.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub String);

impl UserId {
    pub fn new(id: impl Into<String>) -> Self {
        UserId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivityState {
    Stationary,
    Mobile,
}

/// Fieldless event kind, mirroring the `kind` tag of [`EventBody`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    ScreenOn,
    ScreenOff,
    Unlock,
    BatterySample,
    AppEnter,
    AppExit,
    UiScroll,
    UiClick,
    UiFocus,
    UiWindowChange,
    Notification,
    ActivitySample,
    LightSample,
    BluetoothScan,
    WifiScan,
    MessageSent,
    MessageReceived,
    LocationSample,
}

/// Kind-specific payload. Call events are deliberately absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventBody {
    ScreenOn,
    ScreenOff,
    Unlock,
    BatterySample { level: f64, charging: bool },
    AppEnter { app_id: String, app_category: String },
    AppExit { app_id: String, app_category: String },
    UiScroll { app_id: String },
    UiClick { app_id: String },
    UiFocus { app_id: String },
    UiWindowChange { app_id: String },
    Notification { app_id: String },
    ActivitySample { state: ActivityState },
    LightSample { lux: f64 },
    BluetoothScan { devices: Vec<String> },
    WifiScan { visible_aps: u32, connected_ap: Option<String> },
    MessageSent { contact: String },
    MessageReceived { contact: String },
    LocationSample { latitude: f64, longitude: f64 },
}

impl EventBody {
    pub fn kind(&self) -> EventKind {
        match self {
            EventBody::ScreenOn => EventKind::ScreenOn,
            EventBody::ScreenOff => EventKind::ScreenOff,
            EventBody::Unlock => EventKind::Unlock,
            EventBody::BatterySample { .. } => EventKind::BatterySample,
            EventBody::AppEnter { .. } => EventKind::AppEnter,
            EventBody::AppExit { .. } => EventKind::AppExit,
            EventBody::UiScroll { .. } => EventKind::UiScroll,
            EventBody::UiClick { .. } => EventKind::UiClick,
            EventBody::UiFocus { .. } => EventKind::UiFocus,
            EventBody::UiWindowChange { .. } => EventKind::UiWindowChange,
            EventBody::Notification { .. } => EventKind::Notification,
            EventBody::ActivitySample { .. } => EventKind::ActivitySample,
            EventBody::LightSample { .. } => EventKind::LightSample,
            EventBody::BluetoothScan { .. } => EventKind::BluetoothScan,
            EventBody::WifiScan { .. } => EventKind::WifiScan,
            EventBody::MessageSent { .. } => EventKind::MessageSent,
            EventBody::MessageReceived { .. } => EventKind::MessageReceived,
            EventBody::LocationSample { .. } => EventKind::LocationSample,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorEvent {
    pub user_id: UserId,
    pub timestamp: Timestamp,
    #[serde(flatten)]
    pub body: EventBody,
}

impl SensorEvent {
    pub fn new(user_id: UserId, timestamp: Timestamp, body: EventBody) -> Self {
        SensorEvent {
            user_id,
            timestamp,
            body,
        }
    }

    pub fn kind(&self) -> EventKind {
        self.body.kind()
    }

    /// Field-level validation that does not depend on log state.
    pub fn validate(&self) -> Result<(), ValidationError> {
        fn finite(field: &str, v: f64) -> Result<(), ValidationError> {
            if v.is_finite() {
                Ok(())
            } else {
                Err(ValidationError::new(field, "not a finite number"))
            }
        }
        fn non_empty(field: &str, v: &str) -> Result<(), ValidationError> {
            if v.is_empty() {
                Err(ValidationError::new(field, "must not be empty"))
            } else {
                Ok(())
            }
        }
        if self.user_id.0.is_empty() {
            return Err(ValidationError::new("user_id", "must not be empty"));
        }
        match &self.body {
            EventBody::BatterySample { level, .. } => {
                finite("level", *level)?;
                if !(0.0..=100.0).contains(level) {
                    return Err(ValidationError::new("level", "level out of range"));
                }
            }
            EventBody::LightSample { lux } => {
                finite("lux", *lux)?;
                if *lux < 0.0 {
                    return Err(ValidationError::new("lux", "lux must be non-negative"));
                }
            }
            EventBody::LocationSample {
                latitude,
                longitude,
            } => {
                finite("latitude", *latitude)?;
                finite("longitude", *longitude)?;
                if !(-90.0..=90.0).contains(latitude) {
                    return Err(ValidationError::new("latitude", "latitude out of range"));
                }
                if !(-180.0..=180.0).contains(longitude) {
                    return Err(ValidationError::new("longitude", "longitude out of range"));
                }
            }
            EventBody::AppEnter {
                app_id,
                app_category,
            }
            | EventBody::AppExit {
                app_id,
                app_category,
            } => {
                non_empty("app_id", app_id)?;
                non_empty("app_category", app_category)?;
            }
            EventBody::UiScroll { app_id }
            | EventBody::UiClick { app_id }
            | EventBody::UiFocus { app_id }
            | EventBody::UiWindowChange { app_id }
            | EventBody::Notification { app_id } => non_empty("app_id", app_id)?,
            EventBody::MessageSent { contact } | EventBody::MessageReceived { contact } => {
                non_empty("contact", contact)?
            }
            _ => {}
        }
        Ok(())
    }
}

/// A rejected event, naming the offending field.
#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("invalid `{field}`: {message}")]
pub struct ValidationError {
    pub field: String,
    pub message: String,
}

impl ValidationError {
    pub fn new(field: &str, message: &str) -> Self {
        ValidationError {
            field: field.to_string(),
            message: message.to_string(),
        }
    }
}

/// One app session of a user; `end_ts` is `None` while the app is in use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppSession {
    pub user_id: UserId,
    pub app_id: String,
    pub app_category: String,
    pub start_ts: Timestamp,
    pub end_ts: Option<Timestamp>,
    pub monitored: bool,
}

/// A user's events inside the closed interval `[window_start, window_end]`.
#[derive(Clone, Copy, Debug)]
pub struct EventWindow<'a> {
    pub user_id: &'a UserId,
    pub window_start: Timestamp,
    pub window_end: Timestamp,
    pub events: &'a [SensorEvent],
}

impl<'a> EventWindow<'a> {
    pub fn empty(user_id: &'a UserId, window_start: Timestamp, window_end: Timestamp) -> Self {
        EventWindow {
            user_id,
            window_start,
            window_end,
            events: &[],
        }
    }

    /// Narrow to `[start, end]`, clamped to this window.
    pub fn sub(&self, start: Timestamp, end: Timestamp) -> EventWindow<'a> {
        let start = start.max(self.window_start);
        let end = end.min(self.window_end);
        let lo = self.events.partition_point(|e| e.timestamp < start);
        let hi = self.events.partition_point(|e| e.timestamp <= end);
        EventWindow {
            user_id: self.user_id,
            window_start: start,
            window_end: end,
            events: if lo <= hi { &self.events[lo..hi] } else { &[] },
        }
    }
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("window start {start} is after window end {end}")]
    InvertedWindow { start: Timestamp, end: Timestamp },
    #[error("unsupported log schema version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Default, Clone)]
struct UserStream {
    events: Vec<SensorEvent>,
    /// App of the currently open session, tracked in arrival order.
    open_app: Option<String>,
}

/// In-memory event log, sorted per user by timestamp.
///
/// Appends validate each event; late arrivals are inserted at their sorted
/// position (after any events with an equal timestamp) and exact duplicates are
/// dropped, so every read observes a sorted, de-duplicated sequence.
#[derive(Debug, Default, Clone)]
pub struct EventLog {
    users: BTreeMap<UserId, UserStream>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, event: SensorEvent) -> Result<(), LogError> {
        event.validate()?;
        let stream = self.users.entry(event.user_id.clone()).or_default();
        match &event.body {
            EventBody::AppEnter { app_id, .. } => {
                if let Some(open) = &stream.open_app {
                    return Err(ValidationError::new(
                        "kind",
                        &format!("app_enter for `{app_id}` while `{open}` is still open"),
                    )
                    .into());
                }
            }
            EventBody::AppExit { app_id, .. } => match &stream.open_app {
                Some(open) if open == app_id => {}
                Some(open) => {
                    return Err(ValidationError::new(
                        "app_id",
                        &format!("app_exit for `{app_id}` but `{open}` is open"),
                    )
                    .into())
                }
                None => {
                    return Err(ValidationError::new(
                        "kind",
                        &format!("app_exit for `{app_id}` without an open session"),
                    )
                    .into())
                }
            },
            _ => {}
        }
        let pos = stream
            .events
            .partition_point(|e| e.timestamp <= event.timestamp);
        let duplicate = stream.events[..pos]
            .iter()
            .rev()
            .take_while(|e| e.timestamp == event.timestamp)
            .any(|e| e == &event);
        if duplicate {
            return Ok(());
        }
        match &event.body {
            EventBody::AppEnter { app_id, .. } => stream.open_app = Some(app_id.clone()),
            EventBody::AppExit { .. } => stream.open_app = None,
            _ => {}
        }
        stream.events.insert(pos, event);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.users.values().map(|s| s.events.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn users(&self) -> impl Iterator<Item = &UserId> {
        self.users.keys()
    }

    /// All events of a user, time-ordered. Unknown users yield an empty slice.
    pub fn events(&self, user: &UserId) -> &[SensorEvent] {
        self.users
            .get(user)
            .map(|s| s.events.as_slice())
            .unwrap_or(&[])
    }

    /// The user's events with timestamp in the closed interval `[start, end]`.
    pub fn window<'a>(
        &'a self,
        user: &'a UserId,
        start: Timestamp,
        end: Timestamp,
    ) -> Result<EventWindow<'a>, LogError> {
        if start > end {
            return Err(LogError::InvertedWindow { start, end });
        }
        let events = self.events(user);
        let lo = events.partition_point(|e| e.timestamp < start);
        let hi = events.partition_point(|e| e.timestamp <= end);
        Ok(EventWindow {
            user_id: user,
            window_start: start,
            window_end: end,
            events: &events[lo..hi],
        })
    }

    /// App of the session currently open for `user`, if any.
    pub fn open_app(&self, user: &UserId) -> Option<&str> {
        self.users.get(user).and_then(|s| s.open_app.as_deref())
    }
}

/// Label given to a modeling-phase prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Overuse,
    NotOveruse,
}

impl Label {
    pub fn is_overuse(self) -> bool {
        self == Label::Overuse
    }
}

/// A user's reply to something the system showed them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "response", rename_all = "snake_case")]
pub enum ResponseBody {
    /// Answer to an in-the-moment labeling prompt shown at `prompt_ts`.
    LabelAnswer { prompt_ts: Timestamp, label: Label },
    /// The 12-digit challenge of the intervention at `intervention_ts` was typed correctly.
    ChallengeCompleted { intervention_ts: Timestamp },
    /// Optional agreement with "I think I shouldn't use AppName now."
    Feedback {
        intervention_ts: Timestamp,
        agree: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserResponse {
    pub user_id: UserId,
    pub timestamp: Timestamp,
    #[serde(flatten)]
    pub body: ResponseBody,
}

/// Per-user metadata written at the head of a log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserMeta {
    pub user_id: UserId,
    pub user_index: usize,
    pub utc_offset: UtcOffset,
    pub monitored_apps: Vec<String>,
}

/// Study-level metadata needed to re-derive engine decisions on replay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyMeta {
    pub plan: crate::schedule::PhasePlan,
    pub engine_seed: u64,
    #[serde(default)]
    pub hyperparams: crate::learner::Hyperparams,
    #[serde(default)]
    pub freeze_adaptive: bool,
}

/// One line of a persisted log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Study(StudyMeta),
    User(UserMeta),
    Event(SensorEvent),
    Response(UserResponse),
}

impl LogRecord {
    pub fn timestamp(&self) -> Option<Timestamp> {
        match self {
            LogRecord::Event(e) => Some(e.timestamp),
            LogRecord::Response(r) => Some(r.timestamp),
            _ => None,
        }
    }

    pub fn user_id(&self) -> Option<&UserId> {
        match self {
            LogRecord::Event(e) => Some(&e.user_id),
            LogRecord::Response(r) => Some(&r.user_id),
            LogRecord::User(u) => Some(&u.user_id),
            LogRecord::Study(_) => None,
        }
    }
}

#[derive(Serialize)]
struct LineOut<'a> {
    v: u32,
    #[serde(flatten)]
    record: &'a LogRecord,
}

#[derive(Deserialize)]
struct LineIn {
    v: u32,
    #[serde(flatten)]
    record: LogRecord,
}

/// Serialize one record as a single NDJSON line (without the trailing newline).
pub fn encode_record(record: &LogRecord) -> String {
    serde_json::to_string(&LineOut {
        v: LOG_SCHEMA_VERSION,
        record,
    })
    .expect("log records always serialize")
}

pub fn decode_record(line: &str, line_no: usize) -> Result<LogRecord, LogError> {
    let parsed: LineIn = serde_json::from_str(line).map_err(|source| LogError::Parse {
        line: line_no,
        source,
    })?;
    if parsed.v != LOG_SCHEMA_VERSION {
        return Err(LogError::SchemaVersion {
            found: parsed.v,
            expected: LOG_SCHEMA_VERSION,
        });
    }
    Ok(parsed.record)
}

pub fn write_records<'a, W: Write>(
    mut out: W,
    records: impl IntoIterator<Item = &'a LogRecord>,
) -> std::io::Result<()> {
    for record in records {
        out.write_all(encode_record(record).as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Read a log file. Timestamped records are stably sorted per user and exact
/// duplicates dropped; metadata records keep their leading position.
pub fn read_records<R: BufRead>(input: R) -> Result<Vec<LogRecord>, LogError> {
    let mut meta = Vec::new();
    let mut timed: Vec<LogRecord> = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = decode_record(&line, i + 1)?;
        if record.timestamp().is_some() {
            timed.push(record);
        } else {
            meta.push(record);
        }
    }
    timed.sort_by(|a, b| {
        a.user_id()
            .cmp(&b.user_id())
            .then(a.timestamp().cmp(&b.timestamp()))
    });
    let mut out = meta;
    let mut group_start = out.len();
    for record in timed {
        let same_slot = out.len() > group_start && {
            let last = out.last().expect("non-empty");
            last.user_id() == record.user_id() && last.timestamp() == record.timestamp()
        };
        if !same_slot {
            group_start = out.len();
        }
        if out[group_start..].contains(&record) {
            continue;
        }
        out.push(record);
    }
    Ok(out)
}
