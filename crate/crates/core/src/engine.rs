//! The decision loop shared by simulation, replay and the HTTP service.
//!
//! The engine consumes a time-ordered stream of sensor events and user
//! responses and owns every timer-driven step: prediction instants, label
//! prompt ticks, reaction deadlines, end-of-modeling training and nightly
//! updates. Timers due at the same instant as an input fire first.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{
    EventBody, EventLog, Label, LogError, ResponseBody, SensorEvent, UserId, UserMeta,
    UserResponse,
};
use crate::explain::{render_card, sample_background, Explainer, DEFAULT_DETAIL_BUDGET};
use crate::features::location::infer_home;
use crate::features::{
    extract_features, required_window_start, Cell, ExtractContext, FeatureCatalog, FeatureVector,
    NormStats, SAMPLE_CAP_MS,
};
use crate::learner::{
    control_probability, train_adaptive, train_personalized, Corpus, ForestModel, Hyperparams,
    LabelSource, LabeledExample, LearnerError, Prediction, CONTROL_FALLBACK_P,
};
use crate::policy::{
    self, classify_reaction, decide, intervention_id, Decision, Explanation, InterventionRecord,
    PolicyError, PolicyState, PromptKind, PromptMoment, Trigger, INTERVENTION_COOLDOWN_MS,
    LABEL_COOLDOWN_MS, LABEL_PROMPT_INTERVAL_MS, PREDICTION_INTERVAL_MS, REACTION_WINDOW_MS,
};
use crate::schedule::{Arm, ArmSchedule, Phase, PhasePlan, ScheduleError};
use crate::seeds::{stream, stream_seed, Stream};
use crate::time::Timestamp;
use rand::Rng;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("unknown user `{0}`")]
    UnknownUser(String),
    #[error("duplicate user `{0}`")]
    DuplicateUser(String),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub plan: PhasePlan,
    pub seed: u64,
    pub hyperparams: Hyperparams,
    pub cooldown_ms: i64,
    pub label_cooldown_ms: i64,
    /// Keep adaptive models equal to the Personalized checkpoint.
    pub freeze_adaptive: bool,
    pub detail_budget: usize,
    /// Schedule prediction instants from app sessions. The service turns
    /// this off and lets clients submit decision instants instead.
    pub auto_instants: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            plan: PhasePlan::standard(chrono::NaiveDate::from_ymd_opt(2024, 1, 1).expect("date")),
            seed: 0,
            hyperparams: Hyperparams::default(),
            cooldown_ms: INTERVENTION_COOLDOWN_MS,
            label_cooldown_ms: LABEL_COOLDOWN_MS,
            freeze_adaptive: false,
            detail_budget: DEFAULT_DETAIL_BUDGET,
            auto_instants: true,
        }
    }
}

/// A modeling-phase label prompt and its answer, if any.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelPrompt {
    pub user_id: UserId,
    pub ts: Timestamp,
    pub kind: PromptKind,
    pub app_id: String,
    pub label: Option<Label>,
    pub answered_at: Option<Timestamp>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateKind {
    Personalized,
    Nightly,
}

/// One training job. `duration_ms` is wall-clock and not reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub user_id: UserId,
    pub kind: UpdateKind,
    pub study_day: u32,
    pub at: Timestamp,
    pub corpus_size: usize,
    pub trained: bool,
    pub error: Option<String>,
    pub duration_ms: f64,
}

/// Something the engine showed a user.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Output {
    Prompt { user: usize, prompt: usize },
    Intervention { user: usize, record: usize },
}

/// Result of evaluating one decision instant.
#[derive(Clone, Debug, PartialEq)]
pub struct InstantOutcome {
    pub arm: Option<Arm>,
    pub prediction: Option<Prediction>,
    pub decision: Decision,
    pub record: Option<usize>,
}

/// Per-user runtime state.
#[derive(Clone, Debug)]
pub struct UserRuntime {
    pub meta: UserMeta,
    pub policy: PolicyState,
    pub home: Option<Cell>,
    pub norm: Option<NormStats>,
    pub control_p: f64,
    pub personalized: Option<Arc<ForestModel>>,
    pub adaptive: Option<Arc<ForestModel>>,
    pub explainer: Option<Arc<Explainer>>,
    pub last_update_day: Option<u32>,
    pub last_trained_at: Option<Timestamp>,
    session_gen: u64,
    prompts: Vec<usize>,
    finalized: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TimerKind {
    FinalizeModeling,
    TrainPersonalized,
    Nightly,
    ReactionDeadline { record: usize },
    Prediction { gen: u64 },
    PromptTick { gen: u64 },
}

impl TimerKind {
    fn rank(self) -> u8 {
        match self {
            TimerKind::FinalizeModeling => 0,
            TimerKind::TrainPersonalized => 1,
            TimerKind::Nightly => 2,
            TimerKind::ReactionDeadline { .. } => 3,
            TimerKind::Prediction { .. } | TimerKind::PromptTick { .. } => 4,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Timer {
    ts: Timestamp,
    user: usize,
    seq: u64,
    kind: TimerKind,
}

impl Timer {
    fn key(&self) -> (Timestamp, u8, usize, u64) {
        (self.ts, self.kind.rank(), self.user, self.seq)
    }
}

impl PartialEq for Timer {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl Eq for Timer {}
impl PartialOrd for Timer {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Timer {
    // Reversed so the std max-heap pops the earliest timer.
    fn cmp(&self, other: &Self) -> Ordering {
        other.key().cmp(&self.key())
    }
}

pub struct Engine {
    config: EngineConfig,
    catalog: FeatureCatalog,
    schedule: ArmSchedule,
    users: Vec<UserRuntime>,
    index: HashMap<UserId, usize>,
    log: EventLog,
    corpus: Corpus,
    records: Vec<InterventionRecord>,
    record_at: HashMap<(usize, Timestamp), usize>,
    completed: HashMap<usize, Timestamp>,
    prompts: Vec<LabelPrompt>,
    prompt_at: HashMap<(usize, Timestamp), usize>,
    updates: Vec<UpdateRecord>,
    pipeline_misses: usize,
    timers: BinaryHeap<Timer>,
    seq: u64,
}

impl Engine {
    pub fn new(config: EngineConfig, users: Vec<UserMeta>) -> Result<Engine, EngineError> {
        config.plan.validate()?;
        config.hyperparams.validate()?;
        let mut engine = Engine {
            catalog: FeatureCatalog::builtin(),
            schedule: ArmSchedule::default(),
            users: Vec::with_capacity(users.len()),
            index: HashMap::new(),
            log: EventLog::new(),
            corpus: Corpus::new(),
            records: Vec::new(),
            record_at: HashMap::new(),
            completed: HashMap::new(),
            prompts: Vec::new(),
            prompt_at: HashMap::new(),
            updates: Vec::new(),
            pipeline_misses: 0,
            timers: BinaryHeap::new(),
            seq: 0,
            config,
        };
        for meta in users {
            engine.add_user(meta)?;
        }
        Ok(engine)
    }

    fn add_user(&mut self, meta: UserMeta) -> Result<(), EngineError> {
        if self.index.contains_key(&meta.user_id) {
            return Err(EngineError::DuplicateUser(meta.user_id.to_string()));
        }
        let u = self.users.len();
        let mut policy = PolicyState::new(meta.user_id.clone(), meta.monitored_apps.clone());
        policy.cooldown_ms = self.config.cooldown_ms;
        policy.label_cooldown_ms = self.config.label_cooldown_ms;
        self.index.insert(meta.user_id.clone(), u);
        let plan = &self.config.plan;
        let offset = meta.utc_offset;
        let end_modeling = offset.midnight_of(plan.date_of(plan.first_day_of(Phase::Break)));
        let first_iv = plan.first_day_of(Phase::Intervention);
        let nightly: Vec<Timestamp> = (first_iv + 1..plan.total_days())
            .map(|d| offset.midnight_of(plan.date_of(d)))
            .collect();
        self.users.push(UserRuntime {
            meta,
            policy,
            home: None,
            norm: None,
            control_p: CONTROL_FALLBACK_P,
            personalized: None,
            adaptive: None,
            explainer: None,
            last_update_day: None,
            last_trained_at: None,
            session_gen: 0,
            prompts: Vec::new(),
            finalized: false,
        });
        self.push_timer(end_modeling, u, TimerKind::FinalizeModeling);
        self.push_timer(end_modeling, u, TimerKind::TrainPersonalized);
        for ts in nightly {
            self.push_timer(ts, u, TimerKind::Nightly);
        }
        Ok(())
    }

    fn push_timer(&mut self, ts: Timestamp, user: usize, kind: TimerKind) {
        self.seq += 1;
        self.timers.push(Timer {
            ts,
            user,
            seq: self.seq,
            kind,
        });
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    /// The service submits decision instants itself.
    pub fn set_auto_instants(&mut self, on: bool) {
        self.config.auto_instants = on;
    }

    pub fn catalog(&self) -> &FeatureCatalog {
        &self.catalog
    }

    pub fn schedule(&self) -> &ArmSchedule {
        &self.schedule
    }

    pub fn users(&self) -> &[UserRuntime] {
        &self.users
    }

    pub fn user_index(&self, user: &UserId) -> Result<usize, EngineError> {
        self.index
            .get(user)
            .copied()
            .ok_or_else(|| EngineError::UnknownUser(user.to_string()))
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn records(&self) -> &[InterventionRecord] {
        &self.records
    }

    pub fn record(&self, idx: usize) -> &InterventionRecord {
        &self.records[idx]
    }

    pub fn find_record(&self, id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.id == id)
    }

    pub fn prompts(&self) -> &[LabelPrompt] {
        &self.prompts
    }

    pub fn prompt(&self, idx: usize) -> &LabelPrompt {
        &self.prompts[idx]
    }

    pub fn updates(&self) -> &[UpdateRecord] {
        &self.updates
    }

    pub fn pipeline_misses(&self) -> usize {
        self.pipeline_misses
    }

    /// Study day of `ts` in the user's local time, if inside the study.
    pub fn study_day(&self, user: usize, ts: Timestamp) -> Option<u32> {
        let date = self.users[user].meta.utc_offset.local_date(ts);
        self.config.plan.study_day(date).ok()
    }

    /// Phase and arm in force for `user` at `ts`.
    pub fn phase_at(&self, user: usize, ts: Timestamp) -> (Option<Phase>, Option<Arm>) {
        match self.study_day(user, ts) {
            Some(day) => (
                Some(self.config.plan.phase_of_day(day)),
                self.schedule
                    .arm_on_day(self.users[user].meta.user_index, &self.config.plan, day),
            ),
            None => (None, None),
        }
    }

    fn sync_phase(&mut self, user: usize, ts: Timestamp) -> Option<Phase> {
        let (phase, arm) = self.phase_at(user, ts);
        let p = &mut self.users[user].policy;
        // Outside the study nothing is shown; `Break` has the same effect.
        p.phase = phase.unwrap_or(Phase::Break);
        p.arm = arm;
        phase
    }

    pub fn next_timer(&self) -> Option<Timestamp> {
        self.timers.peek().map(|t| t.ts)
    }

    /// Fires every timer due at the earliest pending instant.
    pub fn fire_next(&mut self) -> Vec<Output> {
        let mut out = Vec::new();
        let Some(ts) = self.next_timer() else {
            return out;
        };
        while self.timers.peek().is_some_and(|t| t.ts == ts) {
            let timer = self.timers.pop().expect("peeked");
            self.fire(timer, &mut out);
        }
        out
    }

    /// Fires all timers due at or before `ts`.
    pub fn advance_to(&mut self, ts: Timestamp) -> Vec<Output> {
        let mut out = Vec::new();
        while self.next_timer().is_some_and(|t| t <= ts) {
            out.extend(self.fire_next());
        }
        out
    }

    fn fire(&mut self, timer: Timer, out: &mut Vec<Output>) {
        let u = timer.user;
        match timer.kind {
            TimerKind::FinalizeModeling => self.finalize_modeling(u, timer.ts),
            TimerKind::TrainPersonalized => self.train_personalized(u, timer.ts),
            TimerKind::Nightly => {
                let _ = self.nightly_update(u, timer.ts);
            }
            TimerKind::ReactionDeadline { record } => self.close_reaction(record),
            TimerKind::Prediction { gen } => {
                if self.users[u].session_gen != gen || self.users[u].policy.active_session.is_none()
                {
                    return;
                }
                if self.sync_phase(u, timer.ts) == Some(Phase::Intervention) {
                    let outcome = self.evaluate_instant(u, timer.ts);
                    if let Some(record) = outcome.record {
                        out.push(Output::Intervention { user: u, record });
                    }
                    self.push_timer(timer.ts + PREDICTION_INTERVAL_MS, u, timer.kind);
                }
            }
            TimerKind::PromptTick { gen } => {
                if self.users[u].session_gen != gen {
                    return;
                }
                let Some(app) = self.users[u].policy.active_session.as_ref().map(|s| s.app_id.clone())
                else {
                    return;
                };
                if self.sync_phase(u, timer.ts) == Some(Phase::Modeling) {
                    if let Some(p) = self.show_prompt(u, PromptMoment::Tick, &app, timer.ts) {
                        out.push(p);
                    }
                    self.push_timer(timer.ts + LABEL_PROMPT_INTERVAL_MS, u, timer.kind);
                }
            }
        }
    }

    pub fn ingest_event(&mut self, event: SensorEvent) -> Result<Vec<Output>, EngineError> {
        let u = self.user_index(&event.user_id)?;
        let ts = event.timestamp;
        let body = event.body.clone();
        self.log.append(event.clone())?;
        self.users[u].policy.observe(&event);
        let mut out = Vec::new();
        match body {
            EventBody::AppEnter { app_id, .. } if self.users[u].policy.is_monitored(&app_id) => {
                self.users[u].session_gen += 1;
                let gen = self.users[u].session_gen;
                if !self.config.auto_instants {
                    return Ok(out);
                }
                match self.sync_phase(u, ts) {
                    Some(Phase::Modeling) => {
                        out.extend(self.show_prompt(u, PromptMoment::AppEnter, &app_id, ts));
                        self.push_timer(ts + LABEL_PROMPT_INTERVAL_MS, u, TimerKind::PromptTick { gen });
                    }
                    Some(Phase::Intervention) => {
                        let outcome = self.evaluate_instant(u, ts);
                        if let Some(record) = outcome.record {
                            out.push(Output::Intervention { user: u, record });
                        }
                        self.push_timer(ts + PREDICTION_INTERVAL_MS, u, TimerKind::Prediction { gen });
                    }
                    _ => {}
                }
            }
            EventBody::AppExit { app_id, .. } => {
                self.users[u].session_gen += 1;
                if self.config.auto_instants
                    && self.users[u].policy.is_monitored(&app_id)
                    && self.sync_phase(u, ts) == Some(Phase::Modeling)
                {
                    out.extend(self.show_prompt(u, PromptMoment::AppExit, &app_id, ts));
                }
            }
            _ => {}
        }
        Ok(out)
    }

    pub fn ingest_response(&mut self, response: UserResponse) -> Result<(), EngineError> {
        let u = self.user_index(&response.user_id)?;
        match response.body {
            ResponseBody::LabelAnswer { prompt_ts, label } => {
                let Some(&p) = self.prompt_at.get(&(u, prompt_ts)) else {
                    log::warn!("label for unknown prompt {} at {prompt_ts}", response.user_id);
                    return Ok(());
                };
                if self.users[u].finalized || self.prompts[p].label.is_some() {
                    log::warn!("late or repeated label for {} at {prompt_ts}", response.user_id);
                    return Ok(());
                }
                self.prompts[p].label = Some(label);
                self.prompts[p].answered_at = Some(response.timestamp);
            }
            ResponseBody::ChallengeCompleted { intervention_ts } => {
                if let Some(&r) = self.record_at.get(&(u, intervention_ts)) {
                    self.completed.entry(r).or_insert(response.timestamp);
                }
            }
            ResponseBody::Feedback {
                intervention_ts,
                agree,
            } => {
                let id = intervention_id(&response.user_id, intervention_ts);
                let &r = self
                    .record_at
                    .get(&(u, intervention_ts))
                    .ok_or(PolicyError::UnknownIntervention(id))?;
                self.submit_feedback(r, agree, response.timestamp)?;
            }
        }
        Ok(())
    }

    /// Stores feedback for a record and adds the implied example to the corpus.
    pub fn submit_feedback(
        &mut self,
        record: usize,
        agree: bool,
        ts: Timestamp,
    ) -> Result<LabeledExample, EngineError> {
        let example = policy::record_feedback(&mut self.records[record], agree, ts)?;
        self.corpus.push(example.clone(), ts);
        Ok(example)
    }

    /// Appends a post-hoc label for the features at `decision_ts`.
    pub fn add_posthoc_label(
        &mut self,
        user: &UserId,
        decision_ts: Timestamp,
        label: Label,
        labeled_at: Timestamp,
    ) -> Result<Option<LabeledExample>, EngineError> {
        let u = self.user_index(user)?;
        let Some(norm) = &self.users[u].norm else {
            return Ok(None);
        };
        let raw = self.extract_at(u, decision_ts);
        let features = norm.apply(&raw).expect("catalog-sized vector").values;
        let example = LabeledExample {
            user_id: user.clone(),
            decision_ts,
            features,
            label,
            source: LabelSource::Posthoc,
            weight: 1.0,
        };
        self.corpus.push(example.clone(), labeled_at);
        Ok(Some(example))
    }

    fn show_prompt(
        &mut self,
        u: usize,
        moment: PromptMoment,
        app_id: &str,
        ts: Timestamp,
    ) -> Option<Output> {
        let kind = policy::label_prompt_decision(&mut self.users[u].policy, moment, app_id, ts)?;
        let idx = self.prompts.len();
        self.prompts.push(LabelPrompt {
            user_id: self.users[u].meta.user_id.clone(),
            ts,
            kind,
            app_id: app_id.to_string(),
            label: None,
            answered_at: None,
        });
        self.prompt_at.insert((u, ts), idx);
        self.users[u].prompts.push(idx);
        Some(Output::Prompt {
            user: u,
            prompt: idx,
        })
    }

    /// Raw features for `user` at `ts` from the events logged so far.
    pub fn extract_at(&self, u: usize, ts: Timestamp) -> FeatureVector {
        let rt = &self.users[u];
        let offset = rt.meta.utc_offset;
        let start = required_window_start(ts, offset);
        let window = self
            .log
            .window(&rt.meta.user_id, start, ts)
            .expect("window start precedes its end");
        let ctx = ExtractContext {
            utc_offset: offset,
            monitored_apps: &rt.meta.monitored_apps,
            home: rt.home,
        };
        extract_features(&window, &ctx)
    }

    /// Model used by an ML arm right now.
    pub fn model_for(&self, u: usize, arm: Arm) -> Option<&Arc<ForestModel>> {
        match arm {
            Arm::Control => None,
            Arm::Personalized => self.users[u].personalized.as_ref(),
            Arm::AdaptiveNoExp | Arm::AdaptiveExp => self.users[u].adaptive.as_ref(),
        }
    }

    /// Runs the prediction pipeline and the policy at one decision instant.
    pub fn evaluate_instant(&mut self, u: usize, ts: Timestamp) -> InstantOutcome {
        self.sync_phase(u, ts);
        let arm = self.users[u].policy.arm;
        let Some(arm_v) = arm.filter(|_| self.users[u].policy.phase == Phase::Intervention) else {
            return InstantOutcome {
                arm,
                prediction: None,
                decision: Decision::Hold(policy::HoldReason::NotInterventionPhase),
                record: None,
            };
        };
        let user_id = self.users[u].meta.user_id.clone();
        let x = self.users[u].norm.as_ref().map(|norm| {
            norm.apply(&self.extract_at(u, ts))
                .expect("catalog-sized vector")
                .values
        });
        let mut prediction = None;
        let trigger = match (&x, arm_v) {
            (None, _) => Trigger::ModelUnavailable,
            (Some(_), Arm::Control) => Trigger::ControlDraw {
                u: stream(self.config.seed, Stream::ControlDraw, &user_id, ts).random::<f64>(),
                p: self.users[u].control_p,
            },
            (Some(x), arm) => match self.model_for(u, arm).map(|m| m.predict(x)) {
                Some(Ok(p)) => {
                    prediction = Some(p);
                    Trigger::Model(p)
                }
                _ => Trigger::ModelUnavailable,
            },
        };
        let decision = decide(&mut self.users[u].policy, ts, trigger);
        if matches!(decision, Decision::Hold(policy::HoldReason::PipelineMiss)) {
            self.pipeline_misses += 1;
        }
        let mut record = None;
        if decision == Decision::Intervene {
            let x = x.expect("interventions need features");
            let explanation = if arm_v.shows_explanation() {
                self.explain(u, &x, ts)
            } else {
                None
            };
            let app_id = self.users[u]
                .policy
                .active_session
                .as_ref()
                .map(|s| s.app_id.clone())
                .or_else(|| self.log.open_app(&user_id).map(str::to_string))
                .unwrap_or_default();
            let digits = policy::make_challenge(stream_seed(
                self.config.seed,
                Stream::Challenge,
                &user_id,
                ts,
            ));
            let idx = self.records.len();
            self.records.push(InterventionRecord {
                id: intervention_id(&user_id, ts),
                user_id,
                ts,
                arm: arm_v,
                app_id,
                score: prediction.map(|p| p.score),
                features: x,
                explanation,
                digits,
                reaction: None,
                feedback: None,
                feedback_ts: None,
                response_latency_ms: None,
            });
            self.record_at.insert((u, ts), idx);
            self.push_timer(
                ts + REACTION_WINDOW_MS + 1,
                u,
                TimerKind::ReactionDeadline { record: idx },
            );
            record = Some(idx);
        }
        InstantOutcome {
            arm,
            prediction,
            decision,
            record,
        }
    }

    fn explain(&self, u: usize, x: &[f64], ts: Timestamp) -> Option<Explanation> {
        let model = self.users[u].adaptive.as_ref()?;
        let explainer = self.users[u].explainer.as_ref()?;
        match explainer.explain(model, x, ts, 3) {
            Ok(report) => {
                let card = render_card(&report, &self.catalog, self.config.detail_budget);
                Some(Explanation { report, card })
            }
            Err(e) => {
                log::warn!("explanation failed: {e}");
                None
            }
        }
    }

    fn close_reaction(&mut self, idx: usize) {
        let record = &self.records[idx];
        let ts = record.ts;
        let window = self
            .log
            .window(&record.user_id, ts, ts + REACTION_WINDOW_MS)
            .expect("ordered window");
        let completed = self.completed.get(&idx).copied();
        let reaction = classify_reaction(ts, window.events, completed);
        let quit_at = window
            .events
            .iter()
            .find(|e| matches!(e.body, EventBody::AppExit { .. } | EventBody::ScreenOff))
            .map(|e| e.timestamp);
        let first = match reaction {
            policy::Reaction::LeftApp | policy::Reaction::ScreenOff => quit_at,
            policy::Reaction::CompletedChallengeContinued => completed,
            policy::Reaction::NoAction => None,
        };
        let record = &mut self.records[idx];
        record.reaction = Some(reaction);
        record.response_latency_ms = first.map(|f| f - ts);
    }

    fn finalize_modeling(&mut self, u: usize, midnight: Timestamp) {
        let user_id = self.users[u].meta.user_id.clone();
        let offset = self.users[u].meta.utc_offset;
        let events = self.log.events(&user_id);
        let end = events.partition_point(|e| e.timestamp < midnight);
        self.users[u].home = infer_home(&events[..end], offset, SAMPLE_CAP_MS);
        let prompt_ids = self.users[u].prompts.clone();
        let raw: Vec<FeatureVector> = prompt_ids
            .iter()
            .map(|&p| self.extract_at(u, self.prompts[p].ts))
            .collect();
        let norm = if raw.is_empty() {
            NormStats::fit(&[FeatureVector::empty(user_id.clone(), midnight)])
        } else {
            NormStats::fit(&raw)
        }
        .expect("non-empty training set");
        let mut labels = Vec::new();
        for (&p, vec) in prompt_ids.iter().zip(&raw) {
            let prompt = &self.prompts[p];
            if let (Some(label), Some(at)) = (prompt.label, prompt.answered_at) {
                labels.push(label);
                let features = norm.apply(vec).expect("catalog-sized vector").values;
                self.corpus.push(
                    LabeledExample {
                        user_id: user_id.clone(),
                        decision_ts: prompt.ts,
                        features,
                        label,
                        source: LabelSource::ModelingPhasePrompt,
                        weight: 1.0,
                    },
                    at,
                );
            }
        }
        let rt = &mut self.users[u];
        rt.control_p = control_probability(&labels);
        rt.norm = Some(norm);
        rt.finalized = true;
    }

    fn seeds(&self, u: usize, key: i64) -> (u64, u64, u64) {
        let user = &self.users[u].meta.user_id;
        (
            stream_seed(self.config.seed, Stream::Forest, user, key),
            stream_seed(self.config.seed, Stream::Smote, user, key),
            stream_seed(self.config.seed, Stream::Background, user, key),
        )
    }

    fn background_for(&self, examples: &[LabeledExample], seed: u64) -> Option<Arc<Explainer>> {
        let vectors: Vec<Vec<f64>> = examples.iter().map(|e| e.features.clone()).collect();
        Explainer::new(sample_background(&vectors, seed), self.catalog.clone())
            .ok()
            .map(Arc::new)
    }

    fn train_personalized(&mut self, u: usize, midnight: Timestamp) {
        let started = Instant::now();
        let user_id = self.users[u].meta.user_id.clone();
        let examples = self.corpus.before(midnight);
        let corpus_size = examples.len();
        let (forest_seed, smote_seed, bg_seed) = self.seeds(u, midnight);
        let hp = Hyperparams {
            seed: forest_seed,
            ..self.config.hyperparams.clone()
        };
        let explainer = self.background_for(&examples, bg_seed);
        let result = train_personalized(examples, &user_id, &hp, smote_seed);
        let error = match result {
            Ok(mut model) => {
                model.metadata.trained_at = Some(midnight);
                let model = Arc::new(model);
                let rt = &mut self.users[u];
                rt.personalized = Some(model.clone());
                rt.adaptive = Some(model);
                rt.explainer = explainer;
                rt.last_trained_at = Some(midnight);
                None
            }
            Err(e) => {
                log::error!("personalized training failed for {user_id}: {e}");
                Some(e.to_string())
            }
        };
        self.updates.push(UpdateRecord {
            study_day: self.study_day(u, midnight).unwrap_or(0),
            user_id,
            kind: UpdateKind::Personalized,
            at: midnight,
            corpus_size,
            trained: error.is_none(),
            error,
            duration_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }

    /// Retrains the user's adaptive model from every label that arrived
    /// before `midnight`. A second call for the same local day is a no-op
    /// and returns `None`; a failed retrain keeps the previous model.
    pub fn nightly_update(&mut self, u: usize, midnight: Timestamp) -> Option<UpdateRecord> {
        let day = self.study_day(u, midnight)?;
        if self.users[u].last_update_day == Some(day) {
            return None;
        }
        self.users[u].last_update_day = Some(day);
        let started = Instant::now();
        let user_id = self.users[u].meta.user_id.clone();
        let corpus_size = self.corpus.count_before(midnight);
        let mut record = UpdateRecord {
            user_id: user_id.clone(),
            kind: UpdateKind::Nightly,
            study_day: day,
            at: midnight,
            corpus_size,
            trained: false,
            error: None,
            duration_ms: 0.0,
        };
        if self.config.freeze_adaptive {
            self.updates.push(record.clone());
            return Some(record);
        }
        let examples = self.corpus.before(midnight);
        let (forest_seed, smote_seed, bg_seed) = self.seeds(u, midnight);
        let hp = Hyperparams {
            seed: forest_seed,
            ..self.config.hyperparams.clone()
        };
        let offset = self.users[u].meta.utc_offset;
        let explainer = self.background_for(&examples, bg_seed);
        match train_adaptive(examples, midnight, &user_id, offset, &hp, smote_seed) {
            Ok(mut model) => {
                model.metadata.trained_at = Some(midnight);
                let rt = &mut self.users[u];
                rt.adaptive = Some(Arc::new(model));
                rt.explainer = explainer;
                rt.last_trained_at = Some(midnight);
                record.trained = true;
            }
            Err(e) => {
                log::error!("nightly update failed for {user_id}; keeping previous model: {e}");
                record.error = Some(e.to_string());
            }
        }
        record.duration_ms = started.elapsed().as_secs_f64() * 1e3;
        self.updates.push(record.clone());
        Some(record)
    }

    /// Replaces a user's models, e.g. when restoring a checkpoint.
    pub fn install_models(
        &mut self,
        user: &UserId,
        personalized: ForestModel,
        adaptive: ForestModel,
        norm: NormStats,
        background: Vec<Vec<f64>>,
    ) -> Result<(), EngineError> {
        let u = self.user_index(user)?;
        let explainer = Explainer::new(background, self.catalog.clone()).ok().map(Arc::new);
        let rt = &mut self.users[u];
        rt.personalized = Some(Arc::new(personalized));
        rt.adaptive = Some(Arc::new(adaptive));
        rt.norm = Some(norm);
        rt.explainer = explainer;
        rt.finalized = true;
        Ok(())
    }
}
