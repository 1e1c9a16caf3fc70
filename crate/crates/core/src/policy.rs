//! Per-user runtime state machine: prediction instants, interventions,
//! label prompts, the typing challenge and feedback capture.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{AppSession, EventBody, Label, SensorEvent, UserId};
use crate::explain::{ExplanationCard, ShapleyReport};
use crate::learner::{LabelSource, LabeledExample, Prediction};
use crate::schedule::{Arm, Phase};
use crate::time::{Timestamp, MINUTE_MS, SECOND_MS};

pub const PREDICTION_INTERVAL_MS: i64 = 5 * MINUTE_MS;
pub const INTERVENTION_COOLDOWN_MS: i64 = 10 * MINUTE_MS;
pub const LABEL_PROMPT_INTERVAL_MS: i64 = 10 * MINUTE_MS;
pub const LABEL_COOLDOWN_MS: i64 = 10 * MINUTE_MS;
pub const REACTION_WINDOW_MS: i64 = 60 * SECOND_MS;
pub const CHALLENGE_DIGITS: usize = 12;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("feedback for intervention {0} was already recorded")]
    DuplicateFeedback(String),
    #[error("no intervention {0}")]
    UnknownIntervention(String),
}

/// `start, start+5min, ...` up to the session end (inclusive). An open
/// session yields only its entry instant.
pub fn prediction_instants(session: &AppSession) -> Vec<Timestamp> {
    let end = session.end_ts.unwrap_or(session.start_ts).max(session.start_ts);
    let n = (end - session.start_ts) / PREDICTION_INTERVAL_MS;
    (0..=n)
        .map(|k| session.start_ts + k * PREDICTION_INTERVAL_MS)
        .collect()
}

/// The monitored app session currently in progress.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveSession {
    pub app_id: String,
    pub app_category: String,
    pub start_ts: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyState {
    pub user_id: UserId,
    pub phase: Phase,
    pub arm: Option<Arm>,
    pub monitored_apps: BTreeSet<String>,
    pub last_intervention_ts: Option<Timestamp>,
    pub last_label_prompt_ts: Option<Timestamp>,
    pub active_session: Option<ActiveSession>,
    pub cooldown_ms: i64,
    pub label_cooldown_ms: i64,
}

impl PolicyState {
    pub fn new(user_id: UserId, monitored_apps: impl IntoIterator<Item = String>) -> Self {
        PolicyState {
            user_id,
            phase: Phase::Modeling,
            arm: None,
            monitored_apps: monitored_apps.into_iter().collect(),
            last_intervention_ts: None,
            last_label_prompt_ts: None,
            active_session: None,
            cooldown_ms: INTERVENTION_COOLDOWN_MS,
            label_cooldown_ms: LABEL_COOLDOWN_MS,
        }
    }

    pub fn is_monitored(&self, app_id: &str) -> bool {
        self.monitored_apps.contains(app_id)
    }

    /// Tracks the active monitored session from app enter/exit events.
    pub fn observe(&mut self, event: &SensorEvent) {
        match &event.body {
            EventBody::AppEnter {
                app_id,
                app_category,
            } if self.is_monitored(app_id) => {
                self.active_session = Some(ActiveSession {
                    app_id: app_id.clone(),
                    app_category: app_category.clone(),
                    start_ts: event.timestamp,
                });
            }
            EventBody::AppExit { .. } => self.active_session = None,
            _ => {}
        }
    }

    fn bump(clock: &mut Option<Timestamp>, ts: Timestamp) {
        *clock = Some(clock.map_or(ts, |c| c.max(ts)));
    }
}

/// What drives a decision at one prediction instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Trigger {
    Model(Prediction),
    /// Uniform draw `u` in [0, 1) against the Control probability `p`.
    ControlDraw { u: f64, p: f64 },
    /// No model was available for an ML arm.
    ModelUnavailable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HoldReason {
    NotInterventionPhase,
    NotTriggered,
    Cooldown,
    PipelineMiss,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Intervene,
    Hold(HoldReason),
}

pub fn decide(state: &mut PolicyState, instant: Timestamp, trigger: Trigger) -> Decision {
    if state.phase != Phase::Intervention || state.arm.is_none() {
        return Decision::Hold(HoldReason::NotInterventionPhase);
    }
    let fire = match trigger {
        Trigger::Model(p) => p.label.is_overuse(),
        Trigger::ControlDraw { u, p } => u < p,
        Trigger::ModelUnavailable => {
            log::warn!("pipeline miss for {} at {instant}", state.user_id);
            return Decision::Hold(HoldReason::PipelineMiss);
        }
    };
    if !fire {
        return Decision::Hold(HoldReason::NotTriggered);
    }
    if let Some(last) = state.last_intervention_ts {
        if instant - last < state.cooldown_ms {
            return Decision::Hold(HoldReason::Cooldown);
        }
    }
    PolicyState::bump(&mut state.last_intervention_ts, instant);
    Decision::Intervene
}

pub fn challenge_digits<R: Rng + ?Sized>(rng: &mut R) -> String {
    (0..CHALLENGE_DIGITS)
        .map(|_| char::from(b'0' + rng.random_range(0..10u8)))
        .collect()
}

/// A fresh 12-digit challenge from `seed`.
pub fn make_challenge(seed: u64) -> String {
    challenge_digits(&mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reaction {
    CompletedChallengeContinued,
    LeftApp,
    ScreenOff,
    NoAction,
}

impl Reaction {
    pub fn is_receptive(self) -> bool {
        matches!(self, Reaction::LeftApp | Reaction::ScreenOff)
    }
}

/// Reaction to an intervention delivered at `delivered_ts`, from the user's
/// events and challenge completion inside the following 60 s.
pub fn classify_reaction(
    delivered_ts: Timestamp,
    events: &[SensorEvent],
    completed_at: Option<Timestamp>,
) -> Reaction {
    let deadline = delivered_ts + REACTION_WINDOW_MS;
    let completed = completed_at.filter(|&c| c >= delivered_ts && c <= deadline);
    let quit = events
        .iter()
        .filter(|e| e.timestamp >= delivered_ts && e.timestamp <= deadline)
        .find_map(|e| match e.body {
            EventBody::AppExit { .. } => Some((e.timestamp, Reaction::LeftApp)),
            EventBody::ScreenOff => Some((e.timestamp, Reaction::ScreenOff)),
            _ => None,
        });
    match (quit, completed) {
        (Some((q, r)), Some(c)) if q < c => r,
        (_, Some(_)) => Reaction::CompletedChallengeContinued,
        (Some((_, r)), None) => r,
        (None, None) => Reaction::NoAction,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub report: ShapleyReport,
    pub card: ExplanationCard,
}

/// One delivered intervention and what came of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionRecord {
    /// Also the feedback token.
    pub id: String,
    pub user_id: UserId,
    pub ts: Timestamp,
    pub arm: Arm,
    pub app_id: String,
    /// Model score; `None` for Control draws.
    pub score: Option<f64>,
    /// Normalized features at the prediction instant.
    pub features: Vec<f64>,
    pub explanation: Option<Explanation>,
    pub digits: String,
    pub reaction: Option<Reaction>,
    pub feedback: Option<bool>,
    pub feedback_ts: Option<Timestamp>,
    /// Delivery to the first reaction (quit or completed challenge).
    pub response_latency_ms: Option<i64>,
}

pub fn intervention_id(user: &UserId, ts: Timestamp) -> String {
    format!("{user}-{ts}")
}

impl InterventionRecord {
    /// The client payload. It carries no arm or score so the arms look alike
    /// apart from the card.
    pub fn payload(&self) -> InterventionPayload {
        InterventionPayload {
            intervention_id: self.id.clone(),
            app_id: self.app_id.clone(),
            statement: feedback_statement(&self.app_id),
            digits: self.digits.clone(),
            card: self.explanation.as_ref().map(|e| e.card.clone()),
            feedback_token: self.id.clone(),
        }
    }

    pub fn is_receptive(&self) -> bool {
        self.reaction.is_some_and(Reaction::is_receptive)
    }
}

pub fn feedback_statement(app_id: &str) -> String {
    format!("I think I shouldn't use {app_id} now.")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionPayload {
    pub intervention_id: String,
    pub app_id: String,
    pub statement: String,
    pub digits: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub card: Option<ExplanationCard>,
    pub feedback_token: String,
}

/// Stores the optional feedback answer and returns the training example it
/// implies: agreement means overuse.
pub fn record_feedback(
    record: &mut InterventionRecord,
    agree: bool,
    ts: Timestamp,
) -> Result<LabeledExample, PolicyError> {
    if record.feedback.is_some() {
        return Err(PolicyError::DuplicateFeedback(record.id.clone()));
    }
    record.feedback = Some(agree);
    record.feedback_ts = Some(ts);
    Ok(LabeledExample {
        user_id: record.user_id.clone(),
        decision_ts: record.ts,
        features: record.features.clone(),
        label: if agree {
            Label::Overuse
        } else {
            Label::NotOveruse
        },
        source: LabelSource::InterventionFeedback,
        weight: 1.0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Entry,
    Leaving,
    During,
}

/// Moments that may show a label prompt during the modeling phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptMoment {
    AppEnter,
    AppExit,
    /// A 10-minute mark of continuous use.
    Tick,
}

/// Whether to show a label prompt for `app_id` at `ts`; a shown prompt
/// restarts the labeling cooldown.
pub fn label_prompt_decision(
    state: &mut PolicyState,
    moment: PromptMoment,
    app_id: &str,
    ts: Timestamp,
) -> Option<PromptKind> {
    if state.phase != Phase::Modeling || !state.is_monitored(app_id) {
        return None;
    }
    if let Some(last) = state.last_label_prompt_ts {
        if ts - last < state.label_cooldown_ms {
            return None;
        }
    }
    PolicyState::bump(&mut state.last_label_prompt_ts, ts);
    Some(match moment {
        PromptMoment::AppEnter => PromptKind::Entry,
        PromptMoment::AppExit => PromptKind::Leaving,
        PromptMoment::Tick => PromptKind::During,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::Prediction;

    const T0: Timestamp = 1_700_000_000_000;

    fn state() -> PolicyState {
        let mut s = PolicyState::new(UserId::new("u"), ["app".to_string()]);
        s.phase = Phase::Intervention;
        s.arm = Some(Arm::Personalized);
        s
    }

    fn session(minutes: i64) -> AppSession {
        AppSession {
            user_id: UserId::new("u"),
            app_id: "app".into(),
            app_category: "social".into(),
            start_ts: T0,
            end_ts: Some(T0 + minutes * MINUTE_MS),
            monitored: true,
        }
    }

    #[test]
    fn instants() {
        assert_eq!(
            prediction_instants(&session(12)),
            vec![T0, T0 + 5 * MINUTE_MS, T0 + 10 * MINUTE_MS]
        );
        assert_eq!(prediction_instants(&session(3)), vec![T0]);
    }

    #[test]
    fn cooldown() {
        let mut s = state();
        let over = Trigger::Model(Prediction::from_score(0.9));
        assert_eq!(decide(&mut s, T0, over), Decision::Intervene);
        assert_eq!(
            decide(&mut s, T0 + 7 * MINUTE_MS, over),
            Decision::Hold(HoldReason::Cooldown)
        );
        assert_eq!(decide(&mut s, T0 + 11 * MINUTE_MS, over), Decision::Intervene);
        assert_eq!(
            decide(&mut s, T0 + 30 * MINUTE_MS, Trigger::ModelUnavailable),
            Decision::Hold(HoldReason::PipelineMiss)
        );
        s.arm = Some(Arm::Control);
        assert_eq!(
            decide(&mut s, T0 + 40 * MINUTE_MS, Trigger::ControlDraw { u: 0.99, p: 1.0 }),
            Decision::Intervene
        );
        s.phase = Phase::Baseline;
        assert_eq!(
            decide(&mut s, T0 + 90 * MINUTE_MS, over),
            Decision::Hold(HoldReason::NotInterventionPhase)
        );
    }

    #[test]
    fn challenge_alphabet() {
        for seed in 0..100 {
            let d = make_challenge(seed);
            assert_eq!(d.len(), 12);
            assert!(d.bytes().all(|b| b.is_ascii_digit()));
        }
        assert_eq!(make_challenge(3), make_challenge(3));
    }

    #[test]
    fn prompts_walkthrough() {
        let mut s = PolicyState::new(UserId::new("u"), ["app".to_string()]);
        let m = MINUTE_MS;
        let got: Vec<_> = [
            (PromptMoment::AppEnter, 0),
            (PromptMoment::Tick, 10),
            (PromptMoment::Tick, 20),
            (PromptMoment::AppExit, 25),
        ]
        .iter()
        .map(|&(moment, t)| label_prompt_decision(&mut s, moment, "app", T0 + t * m))
        .collect();
        assert_eq!(
            got,
            vec![
                Some(PromptKind::Entry),
                Some(PromptKind::During),
                Some(PromptKind::During),
                None
            ]
        );
        let t = T0 + 40 * m;
        assert_eq!(label_prompt_decision(&mut s, PromptMoment::AppEnter, "other", t), None);
        assert!(label_prompt_decision(&mut s, PromptMoment::AppExit, "app", t).is_some());
        assert_eq!(
            label_prompt_decision(&mut s, PromptMoment::AppEnter, "app", t + 2 * m),
            None
        );
    }

    fn ev(ts: Timestamp, body: EventBody) -> SensorEvent {
        SensorEvent::new(UserId::new("u"), ts, body)
    }

    #[test]
    fn reactions() {
        let off = [ev(T0 + 5_000, EventBody::ScreenOff)];
        assert_eq!(classify_reaction(T0, &off, None), Reaction::ScreenOff);
        assert_eq!(
            classify_reaction(T0, &[], Some(T0 + 15_000)),
            Reaction::CompletedChallengeContinued
        );
        assert_eq!(classify_reaction(T0, &[], None), Reaction::NoAction);
        let late = [ev(T0 + 61_000, EventBody::ScreenOff)];
        assert_eq!(classify_reaction(T0, &late, None), Reaction::NoAction);
        let exit = [ev(
            T0 + 30_000,
            EventBody::AppExit {
                app_id: "app".into(),
                app_category: "social".into(),
            },
        )];
        assert_eq!(
            classify_reaction(T0, &exit, Some(T0 + 10_000)),
            Reaction::CompletedChallengeContinued
        );
        assert_eq!(classify_reaction(T0, &exit, None), Reaction::LeftApp);
    }

    #[test]
    fn feedback_once() {
        let mut r = InterventionRecord {
            id: intervention_id(&UserId::new("u"), T0),
            user_id: UserId::new("u"),
            ts: T0,
            arm: Arm::Control,
            app_id: "app".into(),
            score: None,
            features: vec![0.5; 3],
            explanation: None,
            digits: make_challenge(1),
            reaction: None,
            feedback: None,
            feedback_ts: None,
            response_latency_ms: None,
        };
        let ex = record_feedback(&mut r, true, T0 + 20_000).unwrap();
        assert_eq!(ex.label, Label::Overuse);
        assert_eq!(ex.features, vec![0.5; 3]);
        assert_eq!(ex.decision_ts, T0);
        assert!(matches!(
            record_feedback(&mut r, false, T0 + 30_000),
            Err(PolicyError::DuplicateFeedback(_))
        ));
        assert_eq!(r.feedback, Some(true));
    }
}
