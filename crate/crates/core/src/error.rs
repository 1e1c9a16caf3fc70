use thiserror::Error;

use crate::engine::EngineError;
use crate::event::{LogError, ValidationError};
use crate::explain::ExplainError;
use crate::features::FeatureError;
use crate::learner::LearnerError;
use crate::metrics::MetricsError;
use crate::policy::PolicyError;
use crate::schedule::ScheduleError;
use crate::service::ServiceError;
use crate::sim::SimError;

/// Any error this crate can produce.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Service(#[from] ServiceError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
