use super::{LabeledExample, LearnerError};
use crate::event::{Label, UserId};
use crate::time::{Timestamp, UtcOffset};

pub const SELF_WEIGHT: f64 = 1.0;
pub const OTHER_WEIGHT: f64 = 0.1;
/// Population mean overuse share, used when a user gave no labels.
pub const CONTROL_FALLBACK_P: f64 = 0.424;

const RECENCY_STEP: f64 = 0.125;
const RECENCY_FLOOR: f64 = 0.5;

fn personal(e: &LabeledExample, self_user: &UserId) -> f64 {
    if &e.user_id == self_user {
        SELF_WEIGHT
    } else {
        OTHER_WEIGHT
    }
}

/// 1.0 for the user's own examples, 0.1 for everyone else's.
pub fn personalized_weights(dataset: &[LabeledExample], self_user: &UserId) -> Vec<f64> {
    dataset.iter().map(|e| personal(e, self_user)).collect()
}

/// Recency factor for an example `age_days` local days old: starts at 1.0 and
/// drops 0.125 every half week down to 0.5.
pub fn recency_weight(age_days: i64) -> f64 {
    let steps = (2 * age_days.max(0)) / 7;
    (1.0 - RECENCY_STEP * steps as f64).max(RECENCY_FLOOR)
}

/// Recency factor times personal factor. Ages are whole local days between
/// the example's day and `now`'s day, in `offset`.
pub fn decay_weights(
    dataset: &[LabeledExample],
    now: Timestamp,
    self_user: &UserId,
    offset: UtcOffset,
) -> Result<Vec<f64>, LearnerError> {
    let today = offset.local_day(now);
    dataset
        .iter()
        .enumerate()
        .map(|(index, e)| {
            if e.decision_ts > now {
                return Err(LearnerError::FutureExample {
                    index,
                    ts: e.decision_ts,
                    now,
                });
            }
            let age = today - offset.local_day(e.decision_ts);
            Ok(recency_weight(age) * personal(e, self_user))
        })
        .collect()
}

/// Share of overuse labels, clamped to `[0.05, 0.95]`; the population mean
/// when there are no labels.
pub fn control_probability(labels: &[Label]) -> f64 {
    if labels.is_empty() {
        log::warn!("no modeling-phase labels; using fallback control probability");
        return CONTROL_FALLBACK_P;
    }
    let overuse = labels.iter().filter(|l| l.is_overuse()).count();
    (overuse as f64 / labels.len() as f64).clamp(0.05, 0.95)
}
