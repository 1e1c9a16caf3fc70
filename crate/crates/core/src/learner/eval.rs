use serde::{Deserialize, Serialize};

use super::{ForestModel, LabeledExample, LearnerError};
use crate::event::Label;

/// Binary metrics for the overuse class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub true_positive: usize,
    pub false_positive: usize,
    pub true_negative: usize,
    pub false_negative: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl EvalReport {
    /// Metrics from (predicted, actual) pairs; undefined ratios are 0.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (Label, Label)>) -> EvalReport {
        let mut r = EvalReport::default();
        for (pred, actual) in pairs {
            match (pred.is_overuse(), actual.is_overuse()) {
                (true, true) => r.true_positive += 1,
                (true, false) => r.false_positive += 1,
                (false, false) => r.true_negative += 1,
                (false, true) => r.false_negative += 1,
            }
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        r.precision = ratio(r.true_positive, r.true_positive + r.false_positive);
        r.recall = ratio(r.true_positive, r.true_positive + r.false_negative);
        r.f1 = if r.precision + r.recall > 0.0 {
            2.0 * r.precision * r.recall / (r.precision + r.recall)
        } else {
            0.0
        };
        r
    }

    pub fn total(&self) -> usize {
        self.true_positive + self.false_positive + self.true_negative + self.false_negative
    }
}

pub fn evaluate(model: &ForestModel, test: &[LabeledExample]) -> Result<EvalReport, LearnerError> {
    if test.is_empty() {
        return Err(LearnerError::EmptyDataset);
    }
    let pairs = test
        .iter()
        .map(|e| Ok((model.predict(&e.features)?.label, e.label)))
        .collect::<Result<Vec<_>, LearnerError>>()?;
    Ok(EvalReport::from_pairs(pairs))
}
