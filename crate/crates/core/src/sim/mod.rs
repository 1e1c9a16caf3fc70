//! Discrete-event simulation of synthetic users running through the study.

mod agent;
mod experiment;
mod profile;
mod replay;

use thiserror::Error;

use crate::engine::EngineError;
use crate::event::LogError;
use crate::learner::LearnerError;
use crate::schedule::ScheduleError;

pub use agent::{Agent, PlaceKind, PlannedEvent, Reaction};
pub use experiment::{drive, run_experiment, user_id_for, Experiment, Input, LiveSource, Source};
pub use profile::{
    AppProfile, ContextRates, Diurnal, Drift, Latent, OutputPaths, PlaceWeights, Places, Receptivity, Responses,
    SimConfig, Spans, UserProfile, DEFAULT_PROFILE_TOML, PROFILE_VERSION,
};
pub use replay::{replay, ReplayOptions, ReplaySource};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot parse configuration: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("cannot serialize output: {0}")]
    Json(#[from] serde_json::Error),
}
