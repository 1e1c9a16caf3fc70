//! Live simulation: agents feed the engine through a time-ordered queue.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet};
use std::fs::File;
use std::io::BufWriter;

use crate::engine::{Engine, EngineError, Output};
use crate::event::{
    write_records, EventBody, LogRecord, ResponseBody, SensorEvent, StudyMeta, UserId, UserMeta,
    UserResponse,
};
use crate::policy::PolicyError;
use crate::time::{Timestamp, UtcOffset};

use super::agent::Agent;
use super::{SimConfig, SimError};

/// One input for the engine.
#[derive(Clone, Debug, PartialEq)]
pub enum Input {
    Event(SensorEvent),
    Response(UserResponse),
}

impl Input {
    pub fn into_record(self) -> LogRecord {
        match self {
            Input::Event(e) => LogRecord::Event(e),
            Input::Response(r) => LogRecord::Response(r),
        }
    }
}

/// A time-ordered supply of inputs that may react to engine outputs.
pub trait Source {
    fn peek_ts(&mut self) -> Option<Timestamp>;
    fn pop(&mut self) -> Option<Input>;
    fn react(&mut self, engine: &Engine, outputs: &[Output]);
}

/// Runs `source` through `engine` to exhaustion. Timers due at an instant
/// fire before inputs stamped with the same instant. Processed inputs are
/// appended to `sink` in processing order.
pub fn drive<S: Source>(
    engine: &mut Engine,
    source: &mut S,
    mut sink: Option<&mut Vec<LogRecord>>,
) -> Result<(), SimError> {
    loop {
        let next_input = source.peek_ts();
        match (engine.next_timer(), next_input) {
            (None, None) => return Ok(()),
            (Some(t), i) if i.is_none_or(|i| t <= i) => {
                let out = engine.fire_next();
                source.react(engine, &out);
            }
            _ => {
                let input = source.pop().expect("peeked input");
                if let Some(sink) = sink.as_deref_mut() {
                    sink.push(input.clone().into_record());
                }
                match input {
                    Input::Event(e) => {
                        let out = engine.ingest_event(e)?;
                        source.react(engine, &out);
                    }
                    // A replay under other settings may not have made the
                    // intervention a recorded answer refers to.
                    Input::Response(r) => match engine.ingest_response(r) {
                        Err(EngineError::Policy(PolicyError::UnknownIntervention(id))) => {
                            log::warn!("skipping response to unknown intervention {id}");
                        }
                        other => other?,
                    },
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
enum ItemKind {
    PlanDay(u32),
    Event {
        episode: Option<u64>,
        body: EventBody,
    },
    Response(ResponseBody),
}

#[derive(Clone, Debug)]
struct Item {
    ts: Timestamp,
    seq: u64,
    user: usize,
    kind: ItemKind,
}

impl PartialEq for Item {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Item {}
impl PartialOrd for Item {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Item {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.ts, self.seq).cmp(&(other.ts, other.seq))
    }
}

/// Agents plus the queue of their planned and reactive inputs.
pub struct LiveSource {
    agents: Vec<Agent>,
    heap: BinaryHeap<Reverse<Item>>,
    seq: u64,
    cancelled: HashSet<(usize, u64)>,
    total_days: u32,
}

impl LiveSource {
    pub fn new(agents: Vec<Agent>, config: &SimConfig) -> LiveSource {
        let plan = config.plan();
        let mut src = LiveSource {
            agents,
            heap: BinaryHeap::new(),
            seq: 0,
            cancelled: HashSet::new(),
            total_days: plan.total_days(),
        };
        for u in 0..src.agents.len() {
            // Plan each day an hour ahead of its local midnight.
            let at = src.agents[u].offset.midnight_of(plan.study_start) - crate::time::HOUR_MS;
            src.push(at, u, ItemKind::PlanDay(0));
        }
        src
    }

    pub fn agents(&self) -> &[Agent] {
        &self.agents
    }

    fn push(&mut self, ts: Timestamp, user: usize, kind: ItemKind) {
        self.seq += 1;
        self.heap.push(Reverse(Item {
            ts,
            seq: self.seq,
            user,
            kind,
        }));
    }

    fn plan_day(&mut self, u: usize, day: u32) {
        for ev in self.agents[u].plan_day(day) {
            self.push(
                ev.ts,
                u,
                ItemKind::Event {
                    episode: ev.episode,
                    body: ev.body,
                },
            );
        }
        if day + 1 < self.total_days {
            let agent = &self.agents[u];
            let at = agent.offset.midnight_of(agent.plan().date_of(day + 1)) - crate::time::HOUR_MS;
            self.push(at, u, ItemKind::PlanDay(day + 1));
        }
    }
}

impl Source for LiveSource {
    fn peek_ts(&mut self) -> Option<Timestamp> {
        loop {
            let top = &self.heap.peek()?.0;
            match &top.kind {
                ItemKind::PlanDay(day) => {
                    let (u, day) = (top.user, *day);
                    self.heap.pop();
                    self.plan_day(u, day);
                }
                ItemKind::Event {
                    episode: Some(e), ..
                } if self.cancelled.contains(&(top.user, *e)) => {
                    self.heap.pop();
                }
                _ => return Some(top.ts),
            }
        }
    }

    fn pop(&mut self) -> Option<Input> {
        self.peek_ts()?;
        let Reverse(item) = self.heap.pop()?;
        let agent = &mut self.agents[item.user];
        let user_id = agent.user_id.clone();
        match item.kind {
            ItemKind::Event { episode, body } => {
                let event = SensorEvent::new(user_id, item.ts, body);
                agent.observe(&event, episode);
                Some(Input::Event(event))
            }
            ItemKind::Response(body) => Some(Input::Response(UserResponse {
                user_id,
                timestamp: item.ts,
                body,
            })),
            ItemKind::PlanDay(_) => unreachable!("peek_ts consumes plan items"),
        }
    }

    fn react(&mut self, engine: &Engine, outputs: &[Output]) {
        for out in outputs {
            match *out {
                Output::Prompt { user, prompt } => {
                    let ts = engine.prompt(prompt).ts;
                    if let Some((at, body)) = self.agents[user].on_prompt(ts) {
                        self.push(at, user, ItemKind::Response(body));
                    }
                }
                Output::Intervention { user, record } => {
                    let rec = engine.record(record);
                    let reaction =
                        self.agents[user].on_intervention(rec.ts, rec.explanation.is_some());
                    if let Some(e) = reaction.cancel_episode {
                        self.cancelled.insert((user, e));
                    }
                    for (at, body) in reaction.events {
                        self.push(at, user, ItemKind::Event { episode: None, body });
                    }
                    for (at, body) in reaction.responses {
                        self.push(at, user, ItemKind::Response(body));
                    }
                }
            }
        }
    }
}

/// A finished simulated study.
pub struct Experiment {
    pub config: SimConfig,
    pub engine: Engine,
    pub users: Vec<UserMeta>,
    /// Full input log in processing order, when `keep_log` was set.
    pub log: Option<Vec<LogRecord>>,
}

impl Experiment {
    /// Metadata header followed by every processed input.
    pub fn log_records(&self) -> Option<Vec<LogRecord>> {
        let body = self.log.as_ref()?;
        let mut out = Vec::with_capacity(body.len() + self.users.len() + 1);
        out.push(LogRecord::Study(StudyMeta {
            plan: self.config.plan(),
            engine_seed: self.config.seed,
            hyperparams: self.config.hyperparams.clone(),
            freeze_adaptive: self.config.freeze_adaptive,
        }));
        out.extend(self.users.iter().cloned().map(LogRecord::User));
        out.extend(body.iter().cloned());
        Some(out)
    }

    /// Writes whichever outputs the configuration names.
    pub fn persist(&self) -> Result<(), SimError> {
        let out = &self.config.output;
        if let (Some(path), Some(records)) = (&out.log, self.log_records()) {
            write_records(BufWriter::new(File::create(path)?), &records)?;
        }
        if let Some(path) = &out.records {
            let mut w = BufWriter::new(File::create(path)?);
            for r in self.engine.records() {
                serde_json::to_writer(&mut w, r)?;
                std::io::Write::write_all(&mut w, b"\n")?;
            }
        }
        if let Some(path) = &out.schedule {
            let pairs: Vec<(UserId, usize)> = self
                .users
                .iter()
                .map(|m| (m.user_id.clone(), m.user_index))
                .collect();
            std::fs::write(path, self.engine.schedule().export_csv(&self.config.plan(), &pairs))?;
        }
        Ok(())
    }
}

pub fn user_id_for(index: usize) -> UserId {
    UserId::new(format!("u{index:02}"))
}

/// Simulates the configured study end to end.
pub fn run_experiment(config: SimConfig) -> Result<Experiment, SimError> {
    config.validate()?;
    let base = config.resolve_profile()?;
    let plan = config.plan();
    let drift_day = config
        .drift_day
        .or_else(|| base.drift.as_ref().map(|d| d.intervention_day));
    let mut agents = Vec::with_capacity(config.n_users);
    let mut users = Vec::with_capacity(config.n_users);
    for i in 0..config.n_users {
        let profile = base.instantiate(config.seed, i);
        let user_id = user_id_for(i);
        users.push(UserMeta {
            user_id: user_id.clone(),
            user_index: i,
            utc_offset: UtcOffset(profile.utc_offset_minutes),
            monitored_apps: profile.monitored_apps(),
        });
        agents.push(Agent::new(i, user_id, profile, config.seed, plan, drift_day));
    }
    let mut engine = Engine::new(config.engine_config(), users.clone())?;
    let mut source = LiveSource::new(agents, &config);
    let mut log = config.keep_log.then(Vec::new);
    drive(&mut engine, &mut source, log.as_mut())?;
    let exp = Experiment {
        config,
        engine,
        users,
        log,
    };
    exp.persist()?;
    Ok(exp)
}
