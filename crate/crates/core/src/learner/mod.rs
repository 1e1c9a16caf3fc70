//! Overuse classifier: a weighted random forest, SMOTE rebalancing, and the
//! training regimes behind the Control, Personalized and Adaptive arms.

mod eval;
mod forest;
mod regimes;
mod smote;
mod weights;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{Label, UserId};
use crate::time::Timestamp;

pub use eval::{evaluate, EvalReport};
pub use forest::{train_forest, ForestModel, Prediction, Tree, TrainingMeta, CHECKPOINT_FORMAT};
pub use regimes::{train_adaptive, train_personalized, Corpus, CorpusEntry};
pub use smote::{smote_upsample, SMOTE_K};
pub use weights::{
    control_probability, decay_weights, personalized_weights, recency_weight,
    CONTROL_FALLBACK_P, OTHER_WEIGHT, SELF_WEIGHT,
};

/// Where a label came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    ModelingPhasePrompt,
    InterventionFeedback,
    Posthoc,
}

/// A normalized feature vector with its label and training weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub user_id: UserId,
    pub decision_ts: Timestamp,
    /// Owner-normalized values in catalog order.
    pub features: Vec<f64>,
    pub label: Label,
    pub source: LabelSource,
    pub weight: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitCriterion {
    Gini,
}

/// Features examined per split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxFeatures {
    /// `ceil(sqrt(n_features))`.
    Sqrt,
    All,
    Fixed(usize),
}

impl MaxFeatures {
    pub fn resolve(self, n_features: usize) -> usize {
        let m = match self {
            MaxFeatures::Sqrt => (n_features as f64).sqrt().ceil() as usize,
            MaxFeatures::All => n_features,
            MaxFeatures::Fixed(m) => m,
        };
        m.clamp(1, n_features.max(1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
    pub criterion: SplitCriterion,
    pub max_features: MaxFeatures,
    /// Draw a weighted bootstrap per tree. When off every tree sees every
    /// example with its weight.
    pub bootstrap: bool,
    /// Upper bound on value bins per feature; features with at most this many
    /// distinct values are split exactly.
    pub max_bins: usize,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            n_trees: 100,
            max_depth: 10,
            min_samples_split: 5,
            criterion: SplitCriterion::Gini,
            max_features: MaxFeatures::Sqrt,
            bootstrap: true,
            max_bins: 64,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), LearnerError> {
        let bad = |m: &str| Err(LearnerError::InvalidHyperparams(m.to_string()));
        if self.n_trees == 0 {
            return bad("n_trees must be positive");
        }
        if self.max_depth == 0 {
            return bad("max_depth must be positive");
        }
        if self.min_samples_split < 2 {
            return bad("min_samples_split must be at least 2");
        }
        if !(2..=256).contains(&self.max_bins) {
            return bad("max_bins must be within 2..=256");
        }
        if let MaxFeatures::Fixed(0) = self.max_features {
            return bad("max_features must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("cannot balance one class")]
    SingleClass,
    #[error("weight {weight} at example {index} is outside (0, 1]")]
    InvalidWeight { index: usize, weight: f64 },
    #[error("{what}: expected {expected} entries, found {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("example {index} at {ts} is later than now ({now})")]
    FutureExample {
        index: usize,
        ts: Timestamp,
        now: Timestamp,
    },
    #[error("model expects catalog version {expected}, got {found}")]
    CatalogMismatch { expected: u32, found: u32 },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("need at least {needed} examples, got {found}")]
    TooFewExamples { needed: usize, found: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] serde_json::Error),
    #[error("unsupported checkpoint format {0}")]
    CheckpointFormat(u32),
}
