//! Helpers shared by the integration tests.

#![allow(dead_code)]

use std::collections::BTreeMap;

use nudge_core::event::{EventBody, LogRecord, SensorEvent, UserId};
use nudge_core::sim::{run_experiment, Experiment, SimConfig, Spans};
use nudge_core::Timestamp;

/// Four users over a compressed 17-day study: long enough to train both
/// regimes and run two full Latin blocks.
pub fn short_config(seed: u64) -> SimConfig {
    SimConfig {
        n_users: 4,
        seed,
        spans: Spans {
            modeling_days: 7,
            break_days: 1,
            baseline_days: 1,
            intervention_days: 8,
        },
        keep_log: true,
        ..SimConfig::default()
    }
}

pub fn short_study(seed: u64) -> Experiment {
    run_experiment(short_config(seed)).expect("simulation runs")
}

/// A monitored or unmonitored app session rebuilt from raw enter/exit events.
#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub app_id: String,
    pub start: Timestamp,
    pub end: Timestamp,
}

/// Sessions per user, rebuilt from the event stream without engine help.
pub fn sessions(events: &[SensorEvent]) -> BTreeMap<UserId, Vec<Session>> {
    let mut open: BTreeMap<UserId, (String, Timestamp)> = BTreeMap::new();
    let mut out: BTreeMap<UserId, Vec<Session>> = BTreeMap::new();
    for e in events {
        match &e.body {
            EventBody::AppEnter { app_id, .. } => {
                open.insert(e.user_id.clone(), (app_id.clone(), e.timestamp));
            }
            EventBody::AppExit { .. } => {
                if let Some((app_id, start)) = open.remove(&e.user_id) {
                    out.entry(e.user_id.clone()).or_default().push(Session {
                        app_id,
                        start,
                        end: e.timestamp,
                    });
                }
            }
            _ => {}
        }
    }
    out
}

pub fn events_of(records: &[LogRecord]) -> Vec<SensorEvent> {
    records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Event(e) => Some(e.clone()),
            _ => None,
        })
        .collect()
}
