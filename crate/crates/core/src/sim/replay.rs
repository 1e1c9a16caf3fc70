//! Re-running a persisted log through a fresh engine.

use crate::engine::{Engine, EngineConfig, Output};
use crate::event::{LogRecord, UserMeta};
use crate::learner::Hyperparams;
use crate::time::Timestamp;

use super::experiment::{drive, Input, Source};
use super::SimError;

/// Engine settings that may differ from the recorded run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReplayOptions {
    pub cooldown_ms: Option<i64>,
    pub hyperparams: Option<Hyperparams>,
    pub freeze_adaptive: Option<bool>,
}

/// Recorded inputs in timestamp order; engine outputs are ignored.
pub struct ReplaySource {
    inputs: Vec<Input>,
    next: usize,
}

impl ReplaySource {
    /// Timed records are merged by timestamp, keeping file order for ties.
    pub fn new(records: &[LogRecord]) -> ReplaySource {
        let mut inputs: Vec<(Timestamp, Input)> = records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Event(e) => Some((e.timestamp, Input::Event(e.clone()))),
                LogRecord::Response(r) => Some((r.timestamp, Input::Response(r.clone()))),
                _ => None,
            })
            .collect();
        inputs.sort_by_key(|(ts, _)| *ts);
        ReplaySource {
            inputs: inputs.into_iter().map(|(_, i)| i).collect(),
            next: 0,
        }
    }
}

impl Source for ReplaySource {
    fn peek_ts(&mut self) -> Option<Timestamp> {
        self.inputs.get(self.next).map(|i| match i {
            Input::Event(e) => e.timestamp,
            Input::Response(r) => r.timestamp,
        })
    }

    fn pop(&mut self) -> Option<Input> {
        let i = self.inputs.get(self.next)?.clone();
        self.next += 1;
        Some(i)
    }

    fn react(&mut self, _engine: &Engine, _outputs: &[Output]) {}
}

/// Rebuilds engine state and decisions from a log.
pub fn replay(records: &[LogRecord], options: &ReplayOptions) -> Result<Engine, SimError> {
    let study = records
        .iter()
        .find_map(|r| match r {
            LogRecord::Study(s) => Some(s.clone()),
            _ => None,
        })
        .ok_or_else(|| SimError::Config("log has no study record".into()))?;
    let users: Vec<UserMeta> = records
        .iter()
        .filter_map(|r| match r {
            LogRecord::User(u) => Some(u.clone()),
            _ => None,
        })
        .collect();
    let defaults = EngineConfig::default();
    let config = EngineConfig {
        plan: study.plan,
        seed: study.engine_seed,
        hyperparams: options.hyperparams.clone().unwrap_or(study.hyperparams),
        cooldown_ms: options.cooldown_ms.unwrap_or(defaults.cooldown_ms),
        freeze_adaptive: options.freeze_adaptive.unwrap_or(study.freeze_adaptive),
        ..defaults
    };
    let mut engine = Engine::new(config, users)?;
    drive(&mut engine, &mut ReplaySource::new(records), None)?;
    Ok(engine)
}
