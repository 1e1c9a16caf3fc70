//! Just-in-time interventions against smartphone overuse.
//!
//! Sensor events flow into per-user logs ([`event`]), become feature vectors
//! ([`features`]), and feed random-forest models ([`learner`]) whose
//! predictions are explained by category-level Shapley values ([`explain`]).
//! The [`policy`] decides when to intervene, [`schedule`] assigns study arms,
//! and [`engine`] ties everything to a clock. [`sim`] drives the engine with
//! synthetic users, [`metrics`] scores the outcome and [`service`] exposes the
//! loop over HTTP.

pub mod engine;
mod error;
pub mod event;
pub mod explain;
pub mod features;
pub mod learner;
pub mod metrics;
pub mod policy;
pub mod schedule;
pub mod seeds;
pub mod service;
pub mod sim;
pub mod time;

pub use engine::{Engine, EngineConfig, EngineError, Output};
pub use error::{Error, Result};
pub use event::{
    EventBody, EventKind, EventLog, Label, LogRecord, ResponseBody, SensorEvent, UserId,
    UserMeta, UserResponse,
};
pub use explain::{ExplanationCard, Explainer, ShapleyReport};
pub use features::{FeatureCatalog, FeatureVector, NormStats};
pub use learner::{ForestModel, Hyperparams, LabeledExample, Prediction};
pub use policy::{Decision, InterventionPayload, InterventionRecord, Reaction};
pub use schedule::{Arm, ArmSchedule, Phase, PhasePlan};
pub use time::{Timestamp, UtcOffset};
