use serde::{Deserialize, Serialize};

use super::{FeatureError, FeatureVector};

/// Per-feature z-score statistics and imputation values fitted on one
/// user's training vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub impute: Vec<f64>,
}

impl NormStats {
    /// Mean and population std over observed entries; imputation is the
    /// observed median, or 0 for a feature never observed.
    pub fn fit(train: &[FeatureVector]) -> Result<NormStats, FeatureError> {
        let dim = train
            .first()
            .map(|v| v.values.len())
            .ok_or(FeatureError::EmptyTrainingSet)?;
        let mut stats = NormStats {
            mean: vec![0.0; dim],
            std: vec![0.0; dim],
            impute: vec![0.0; dim],
        };
        let mut column = Vec::with_capacity(train.len());
        for j in 0..dim {
            column.clear();
            for v in train {
                if v.values.len() != dim {
                    return Err(FeatureError::DimensionMismatch {
                        expected: dim,
                        found: v.values.len(),
                    });
                }
                if !v.missing_mask[j] {
                    column.push(v.values[j]);
                }
            }
            if column.is_empty() {
                continue;
            }
            let n = column.len() as f64;
            let mean = column.iter().sum::<f64>() / n;
            let var = column.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            column.sort_by(f64::total_cmp);
            let mid = column.len() / 2;
            let median = if column.len() % 2 == 1 {
                column[mid]
            } else {
                (column[mid - 1] + column[mid]) / 2.0
            };
            stats.mean[j] = mean;
            stats.std[j] = var.sqrt();
            stats.impute[j] = median;
        }
        Ok(stats)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Impute missing entries, then z-score; zero-variance features map to 0.
    pub fn apply(&self, vec: &FeatureVector) -> Result<FeatureVector, FeatureError> {
        if vec.values.len() != self.dim() {
            return Err(FeatureError::DimensionMismatch {
                expected: self.dim(),
                found: vec.values.len(),
            });
        }
        let values = (0..self.dim())
            .map(|j| {
                let x = if vec.missing_mask[j] {
                    self.impute[j]
                } else {
                    vec.values[j]
                };
                self.z(j, x)
            })
            .collect();
        Ok(FeatureVector {
            user_id: vec.user_id.clone(),
            decision_ts: vec.decision_ts,
            values,
            missing_mask: vec![false; self.dim()],
        })
    }

    fn z(&self, j: usize, x: f64) -> f64 {
        if self.std[j] > 0.0 {
            (x - self.mean[j]) / self.std[j]
        } else {
            0.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::UserId;

    fn vec1(values: &[Option<f64>]) -> FeatureVector {
        FeatureVector {
            user_id: UserId::new("u"),
            decision_ts: 0,
            values: values.iter().map(|v| v.unwrap_or(0.0)).collect(),
            missing_mask: values.iter().map(|v| v.is_none()).collect(),
        }
    }

    #[test]
    fn fit_basic_and_degenerate() {
        let train = vec![
            vec1(&[Some(1.0), None]),
            vec1(&[Some(2.0), None]),
            vec1(&[Some(3.0), None]),
        ];
        let s = NormStats::fit(&train).unwrap();
        assert_eq!(s.mean[0], 2.0);
        assert_eq!(s.impute[0], 2.0);
        assert!((s.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!((s.mean[1], s.std[1], s.impute[1]), (0.0, 0.0, 0.0));
    }

    #[test]
    fn apply_centers_and_imputes() {
        let train = vec![vec1(&[Some(1.0)]), vec1(&[Some(3.0)]), vec1(&[Some(8.0)])];
        let s = NormStats::fit(&train).unwrap();
        let at_mean = s.apply(&vec1(&[Some(4.0)])).unwrap();
        assert_eq!(at_mean.values[0], 0.0);
        let imputed = s.apply(&vec1(&[None])).unwrap();
        assert_eq!(imputed.values[0], (3.0 - 4.0) / s.std[0]);
        assert!(imputed.missing_mask.iter().all(|m| !m));
    }

    #[test]
    fn mismatch_and_empty() {
        assert_eq!(
            NormStats::fit(&[]).unwrap_err(),
            FeatureError::EmptyTrainingSet
        );
        let s = NormStats::fit(&[vec1(&[Some(1.0)])]).unwrap();
        assert!(matches!(
            s.apply(&vec1(&[Some(1.0), Some(2.0)])),
            Err(FeatureError::DimensionMismatch { .. })
        ));
    }
}
