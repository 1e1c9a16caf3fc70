use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LabeledExample, LearnerError};
use crate::event::Label;

/// Neighbors considered per minority point.
pub const SMOTE_K: usize = 5;

/// Up-sample the minority class until both classes have equal counts.
///
/// Each synthetic point interpolates a uniformly drawn minority parent toward
/// one of its `k` nearest minority neighbors (Euclidean, ties by position),
/// with a uniform coefficient in `[0, 1)`. Synthetic points copy the parent's
/// owner, timestamp, source and weight and are appended after the input.
pub fn smote_upsample(
    dataset: &[LabeledExample],
    k: usize,
    seed: u64,
) -> Result<Vec<LabeledExample>, LearnerError> {
    if dataset.is_empty() {
        return Err(LearnerError::EmptyDataset);
    }
    let overuse: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset[i].label == Label::Overuse)
        .collect();
    let not: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset[i].label == Label::NotOveruse)
        .collect();
    if overuse.is_empty() || not.is_empty() {
        return Err(LearnerError::SingleClass);
    }
    let (minority, deficit) = if overuse.len() < not.len() {
        let d = not.len() - overuse.len();
        (overuse, d)
    } else {
        let d = overuse.len() - not.len();
        (not, d)
    };
    let mut out = dataset.to_vec();
    if deficit == 0 {
        return Ok(out);
    }
    out.reserve(deficit);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    if minority.len() < 2 {
        log::warn!(
            "minority class has {} example(s); duplicating instead of interpolating",
            minority.len()
        );
        for _ in 0..deficit {
            let parent = minority[rng.random_range(0..minority.len())];
            out.push(dataset[parent].clone());
        }
        return Ok(out);
    }

    let k = k.max(1).min(minority.len() - 1);
    let mut neighbors: HashMap<usize, Vec<usize>> = HashMap::new();
    for _ in 0..deficit {
        let a = rng.random_range(0..minority.len());
        let nn = neighbors
            .entry(a)
            .or_insert_with(|| nearest(dataset, &minority, a, k));
        let b = nn[rng.random_range(0..nn.len())];
        let lambda: f64 = rng.random();
        let parent = &dataset[minority[a]];
        let other = &dataset[minority[b]];
        let features = parent
            .features
            .iter()
            .zip(&other.features)
            .map(|(x, y)| x + lambda * (y - x))
            .collect();
        out.push(LabeledExample {
            features,
            ..parent.clone()
        });
    }
    Ok(out)
}

/// Positions (into `minority`) of the `k` nearest minority points to `a`.
fn nearest(dataset: &[LabeledExample], minority: &[usize], a: usize, k: usize) -> Vec<usize> {
    let xa = &dataset[minority[a]].features;
    let mut d: Vec<(f64, usize)> = minority
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != a)
        .map(|(j, &i)| {
            let dist = xa
                .iter()
                .zip(&dataset[i].features)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>();
            (dist, j)
        })
        .collect();
    let cmp = |p: &(f64, usize), q: &(f64, usize)| p.0.total_cmp(&q.0).then(p.1.cmp(&q.1));
    if k < d.len() {
        d.select_nth_unstable_by(k - 1, cmp);
        d.truncate(k);
    }
    d.sort_by(cmp);
    d.into_iter().map(|(_, j)| j).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::UserId;
    use crate::learner::LabelSource;

    fn ex(x: f64, label: Label) -> LabeledExample {
        LabeledExample {
            user_id: UserId::new("u"),
            decision_ts: 0,
            features: vec![x, -x],
            label,
            source: LabelSource::ModelingPhasePrompt,
            weight: 0.5,
        }
    }

    fn counts(d: &[LabeledExample]) -> (usize, usize) {
        let o = d.iter().filter(|e| e.label == Label::Overuse).count();
        (d.len() - o, o)
    }

    #[test]
    fn default_balance_equalizes() {
        let mut d: Vec<_> = (0..622).map(|i| ex(i as f64, Label::NotOveruse)).collect();
        d.extend((0..378).map(|i| ex(i as f64 * 0.1, Label::Overuse)));
        let out = smote_upsample(&d, SMOTE_K, 1).unwrap();
        assert_eq!(counts(&out), (622, 622));
        assert_eq!(&out[..d.len()], &d[..]);
    }

    #[test]
    fn balanced_is_unchanged() {
        let d = vec![ex(0.0, Label::Overuse), ex(1.0, Label::NotOveruse)];
        assert_eq!(smote_upsample(&d, 5, 3).unwrap(), d);
    }

    #[test]
    fn single_class_errors() {
        let d = vec![ex(0.0, Label::Overuse); 3];
        let err = smote_upsample(&d, 5, 0).unwrap_err();
        assert_eq!(err.to_string(), "cannot balance one class");
    }

    #[test]
    fn tiny_minority_duplicates() {
        let mut d: Vec<_> = (0..4).map(|i| ex(i as f64, Label::NotOveruse)).collect();
        d.push(ex(9.0, Label::Overuse));
        let out = smote_upsample(&d, 5, 0).unwrap();
        assert_eq!(counts(&out), (4, 4));
        assert!(out[5..].iter().all(|e| e.features == vec![9.0, -9.0]));
    }

    #[test]
    fn overuse_majority_is_balanced_too() {
        let mut d: Vec<_> = (0..7).map(|i| ex(i as f64, Label::Overuse)).collect();
        d.extend((0..3).map(|i| ex(i as f64, Label::NotOveruse)));
        let out = smote_upsample(&d, 5, 0).unwrap();
        assert_eq!(counts(&out), (7, 7));
    }

    #[test]
    fn seeded_determinism() {
        let mut d: Vec<_> = (0..30).map(|i| ex(i as f64, Label::NotOveruse)).collect();
        d.extend((0..9).map(|i| ex(i as f64 * 0.3, Label::Overuse)));
        assert_eq!(
            smote_upsample(&d, 5, 42).unwrap(),
            smote_upsample(&d, 5, 42).unwrap()
        );
    }
}
