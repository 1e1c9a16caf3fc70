//! Feature extraction: event windows to fixed-catalog feature vectors, plus
//! per-user imputation and z-score normalization.

mod catalog;
mod extract;
pub mod location;
mod norm;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::UserId;
use crate::time::Timestamp;

pub use catalog::{Category, Feature, FeatureCatalog, FeatureSpec, CATALOG_VERSION, FEATURE_COUNT};
pub use extract::{
    extract_features, required_window_start, ExtractContext, CONTEXT_HORIZON_MS, NIGHT_END_HOUR,
    NIGHT_START_HOUR, SAMPLE_CAP_MS,
};
pub use location::{location_entropy, Cell};
pub use norm::NormStats;

/// Dense feature values aligned with the built-in catalog order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub user_id: UserId,
    pub decision_ts: Timestamp,
    pub values: Vec<f64>,
    pub missing_mask: Vec<bool>,
}

impl FeatureVector {
    /// A vector with every feature missing.
    pub fn empty(user_id: UserId, decision_ts: Timestamp) -> Self {
        FeatureVector {
            user_id,
            decision_ts,
            values: vec![0.0; FEATURE_COUNT],
            missing_mask: vec![true; FEATURE_COUNT],
        }
    }

    pub fn get(&self, f: Feature) -> Option<f64> {
        let i = f.index();
        if self.missing_mask[i] {
            None
        } else {
            Some(self.values[i])
        }
    }

    pub fn set(&mut self, f: Feature, value: f64) {
        let i = f.index();
        self.values[i] = value;
        self.missing_mask[i] = false;
    }

    pub fn set_opt(&mut self, f: Feature, value: Option<f64>) {
        if let Some(v) = value {
            self.set(f, v);
        }
    }

    pub fn is_complete(&self) -> bool {
        !self.missing_mask.iter().any(|&m| m)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("feature vector has {found} entries, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("cannot fit normalization on an empty training set")]
    EmptyTrainingSet,
}
