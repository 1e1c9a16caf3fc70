//! Training regimes for the Personalized and Adaptive arms, and the shared
//! labeled corpus they draw from.

use serde::{Deserialize, Serialize};

use super::{
    decay_weights, personalized_weights, smote_upsample, train_forest, ForestModel, Hyperparams,
    LabeledExample, LearnerError, SMOTE_K,
};
use crate::event::UserId;
use crate::time::{Timestamp, UtcOffset};

/// A labeled example plus the moment its label arrived.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub example: LabeledExample,
    pub labeled_at: Timestamp,
}

/// Append-only store of every label from every user.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    entries: Vec<CorpusEntry>,
}

impl Corpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, example: LabeledExample, labeled_at: Timestamp) {
        self.entries.push(CorpusEntry {
            example,
            labeled_at,
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[CorpusEntry] {
        &self.entries
    }

    /// Examples whose label arrived strictly before `cutoff`.
    pub fn before(&self, cutoff: Timestamp) -> Vec<LabeledExample> {
        self.entries
            .iter()
            .filter(|e| e.labeled_at < cutoff)
            .map(|e| e.example.clone())
            .collect()
    }

    pub fn count_before(&self, cutoff: Timestamp) -> usize {
        self.entries.iter().filter(|e| e.labeled_at < cutoff).count()
    }
}

fn fit(
    mut examples: Vec<LabeledExample>,
    weights: Vec<f64>,
    hp: &Hyperparams,
    smote_seed: u64,
) -> Result<ForestModel, LearnerError> {
    for (e, w) in examples.iter_mut().zip(weights) {
        e.weight = w;
    }
    let balanced = smote_upsample(&examples, SMOTE_K, smote_seed)?;
    let weights: Vec<f64> = balanced.iter().map(|e| e.weight).collect();
    train_forest(&balanced, &weights, hp)
}

/// Static per-user model: self examples at 1.0, others at 0.1, SMOTE, forest.
pub fn train_personalized(
    examples: Vec<LabeledExample>,
    self_user: &UserId,
    hp: &Hyperparams,
    smote_seed: u64,
) -> Result<ForestModel, LearnerError> {
    let weights = personalized_weights(&examples, self_user);
    fit(examples, weights, hp, smote_seed)
}

/// Nightly model: personal weights times recency decay as of `now`.
pub fn train_adaptive(
    examples: Vec<LabeledExample>,
    now: Timestamp,
    self_user: &UserId,
    offset: UtcOffset,
    hp: &Hyperparams,
    smote_seed: u64,
) -> Result<ForestModel, LearnerError> {
    let weights = decay_weights(&examples, now, self_user, offset)?;
    fit(examples, weights, hp, smote_seed)
}
