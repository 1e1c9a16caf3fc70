//! Inputs shared by the pipeline benchmarks.

use nudge_core::event::{read_records, Label, LogRecord, SensorEvent, UserId, UserMeta};
use nudge_core::learner::{LabelSource, LabeledExample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One simulated user-day, checked in with the core crate's fixtures.
const TRACE: &str = include_str!("../../core/fixtures/trace_1day.ndjson");

pub fn trace() -> (UserMeta, Vec<SensorEvent>) {
    let records = read_records(TRACE.as_bytes()).expect("fixture parses");
    let mut meta = None;
    let mut events = Vec::new();
    for r in records {
        match r {
            LogRecord::User(m) => meta = Some(m),
            LogRecord::Event(e) => events.push(e),
            _ => {}
        }
    }
    (meta.expect("fixture has a user"), events)
}

/// Labeled vectors with a noisy linear boundary, about a third overuse.
pub fn examples(n: usize, dim: usize, seed: u64) -> Vec<LabeledExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    (0..n)
        .map(|i| {
            let features: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let z: f64 = features.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>() + rng.random_range(-1.0..1.0);
            LabeledExample {
                user_id: UserId::new(format!("u{:02}", i % 8)),
                decision_ts: i as i64 * 60_000,
                features,
                label: if z > 1.0 { Label::Overuse } else { Label::NotOveruse },
                source: LabelSource::InterventionFeedback,
                weight: 1.0,
            }
        })
        .collect()
}
