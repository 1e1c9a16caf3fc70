//! Forest weighting, SMOTE and recency decay checked against independent
//! oracles.

use nudge_core::event::{Label, UserId};
use nudge_core::learner::{
    decay_weights, recency_weight, smote_upsample, train_forest, Hyperparams, LabelSource,
    LabeledExample, MaxFeatures, SMOTE_K,
};
use nudge_core::time::{UtcOffset, DAY_MS, HOUR_MS};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn example(i: usize, features: Vec<f64>, overuse: bool) -> LabeledExample {
    LabeledExample {
        user_id: UserId::new("u"),
        // Unique per example so SMOTE parents can be identified.
        decision_ts: i as i64,
        features,
        label: if overuse {
            Label::Overuse
        } else {
            Label::NotOveruse
        },
        source: LabelSource::ModelingPhasePrompt,
        weight: 1.0,
    }
}

fn random_dataset(seed: u64, n: usize, dim: usize, p_overuse: f64) -> Vec<LabeledExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            // Coarse grid values so ties and repeated values occur.
            let x: Vec<f64> = (0..dim)
                .map(|_| f64::from(rng.random_range(0..12u8)) * 0.5)
                .collect();
            let overuse = rng.random::<f64>() < p_overuse || x[0] > 4.5;
            example(i, x, overuse)
        })
        .collect()
}

// Recency decay ------------------------------------------------------------

#[test]
fn decay_schedule_exact_values() {
    check_decay_schedule_exact_values();
}

pub fn check_decay_schedule_exact_values() {
    assert_eq!(recency_weight(0), 1.0);
    assert_eq!(recency_weight(7), 0.75);
    assert_eq!(recency_weight(14), 0.5);
    assert_eq!(recency_weight(1000), 0.5);
    // Half-week steps: 0-3 days at 1.0, 4-6 at 0.875, 7-10 at 0.75, 11-13 at
    // 0.625. Written out by hand rather than recomputed.
    let expected = [
        1.0, 1.0, 1.0, 1.0, 0.875, 0.875, 0.875, 0.75, 0.75, 0.75, 0.75, 0.625, 0.625, 0.625,
        0.5,
    ];
    for (age, &w) in expected.iter().enumerate() {
        assert_eq!(recency_weight(age as i64), w, "age {age}");
    }
    let mut prev = f64::INFINITY;
    for age in 0..400 {
        let w = recency_weight(age);
        assert!(w <= prev && w >= 0.5, "age {age}");
        prev = w;
    }
}

#[test]
fn decay_uses_local_days_and_personal_factor() {
    let offset = UtcOffset(120);
    let me = UserId::new("me");
    let now = offset.midnight_of_day(100) + 9 * HOUR_MS;
    let at = |day: i64, hour: i64| offset.midnight_of_day(day) + hour * HOUR_MS;
    let mut data = vec![
        example(0, vec![0.0], true),
        example(1, vec![0.0], false),
        example(2, vec![0.0], true),
        example(3, vec![0.0], true),
    ];
    data[0].user_id = me.clone();
    data[0].decision_ts = at(93, 23); // 7 local days old
    data[1].user_id = me.clone();
    data[1].decision_ts = at(100, 0); // today
    data[2].user_id = UserId::new("other");
    data[2].decision_ts = at(86, 1); // 14 days old, someone else
    data[3].user_id = me.clone();
    data[3].decision_ts = at(97, 0) - 1; // last ms of day 96: 4 days old
    let w = decay_weights(&data, now, &me, offset).unwrap();
    assert_eq!(w, vec![0.75, 1.0, 0.05, 0.875]);

    data[1].decision_ts = now + DAY_MS;
    assert!(decay_weights(&data, now, &me, offset).is_err());
}

// Weighted forest -----------------------------------------------------------

fn no_bootstrap(seed: u64) -> Hyperparams {
    Hyperparams {
        n_trees: 12,
        max_depth: 8,
        min_samples_split: 2,
        bootstrap: false,
        max_features: MaxFeatures::Fixed(2),
        seed,
        ..Hyperparams::default()
    }
}

/// Integer multiplicity `m` expressed as weight `m/4` must grow the same
/// trees as `m` copies of weight `1/4`. Quarter weights keep every sum exact.
fn duplication_case(seed: u64) {
    let data = random_dataset(seed, 60, 4, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let mult: Vec<u32> = data.iter().map(|_| rng.random_range(1..=4)).collect();
    let weights: Vec<f64> = mult.iter().map(|&m| f64::from(m) / 4.0).collect();
    let mut dup = Vec::new();
    for (e, &m) in data.iter().zip(&mult) {
        for _ in 0..m {
            dup.push(e.clone());
        }
    }
    let hp = no_bootstrap(seed);
    let a = train_forest(&data, &weights, &hp).unwrap();
    let b = train_forest(&dup, &vec![0.25; dup.len()], &hp).unwrap();
    assert_eq!(a.trees, b.trees, "seed {seed}");
    for e in &data {
        assert_eq!(a.score(&e.features), b.score(&e.features));
    }
}

#[test]
fn integer_weights_equal_duplication() {
    check_integer_weights_equal_duplication();
}

pub fn check_integer_weights_equal_duplication() {
    for seed in 0..20 {
        duplication_case(seed);
    }
}

#[test]
fn training_is_bit_reproducible() {
    check_training_is_bit_reproducible();
}

pub fn check_training_is_bit_reproducible() {
    let data = random_dataset(7, 300, 6, 0.35);
    let weights: Vec<f64> = (0..data.len()).map(|i| 0.5 + 0.5 * ((i % 3) as f64 / 2.0)).collect();
    let hp = Hyperparams {
        n_trees: 30,
        seed: 99,
        ..Hyperparams::default()
    };
    let a = train_forest(&data, &weights, &hp).unwrap();
    let b = train_forest(&data, &weights, &hp).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    // Thread count must not matter either.
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let c = pool.install(|| train_forest(&data, &weights, &hp).unwrap());
    assert_eq!(a.checksum(), c.checksum());
    let d = train_forest(&data, &weights, &Hyperparams { seed: 100, ..hp }).unwrap();
    assert_ne!(a.checksum(), d.checksum());
}

// SMOTE ------------------------------------------------------------------------

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Brute-force k nearest minority neighbours of `a` (positions into the
/// dataset), ties broken by position.
fn brute_knn(data: &[LabeledExample], minority: &[usize], a: usize, k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = minority
        .iter()
        .filter(|&&j| j != a)
        .map(|&j| (sq_dist(&data[a].features, &data[j].features), j))
        .collect();
    d.sort_by(|p, q| p.0.partial_cmp(&q.0).unwrap().then(p.1.cmp(&q.1)));
    d.truncate(k);
    d.into_iter().map(|(_, j)| j).collect()
}

/// Checks balance, the untouched prefix, and that each synthetic point lies on
/// the segment from its parent to one of the parent's brute-force neighbours.
fn check_smote(data: &[LabeledExample], seed: u64) -> Result<(), TestCaseError> {
    let out = smote_upsample(data, SMOTE_K, seed).unwrap();
    let pos = data.iter().filter(|e| e.label.is_overuse()).count();
    let neg = data.len() - pos;
    let minority_label = if pos < neg {
        Label::Overuse
    } else {
        Label::NotOveruse
    };
    let out_pos = out.iter().filter(|e| e.label.is_overuse()).count();
    prop_assert_eq!(out_pos, pos.max(neg));
    prop_assert_eq!(out.len() - out_pos, pos.max(neg));
    prop_assert_eq!(&out[..data.len()], data);

    let minority: Vec<usize> = (0..data.len())
        .filter(|&i| data[i].label == minority_label)
        .collect();
    let k = SMOTE_K.min(minority.len().saturating_sub(1)).max(1);
    for s in &out[data.len()..] {
        prop_assert_eq!(s.label, minority_label);
        let parent = s.decision_ts as usize;
        prop_assert_eq!(data[parent].label, minority_label);
        if minority.len() < 2 {
            prop_assert_eq!(&s.features, &data[parent].features);
            continue;
        }
        let on_segment = brute_knn(data, &minority, parent, k).into_iter().any(|b| {
            let (x, y) = (&data[parent].features, &data[b].features);
            // Recover lambda from the widest coordinate, then check every one.
            let Some(c) = (0..x.len()).max_by(|&i, &j| {
                (y[i] - x[i]).abs().partial_cmp(&(y[j] - x[j]).abs()).unwrap()
            }) else {
                return false;
            };
            let span = y[c] - x[c];
            if span == 0.0 {
                return s.features == *x;
            }
            let lambda = (s.features[c] - x[c]) / span;
            (-1e-12..1.0).contains(&lambda)
                && (0..x.len()).all(|i| (x[i] + lambda * (y[i] - x[i]) - s.features[i]).abs() < 1e-9)
        });
        prop_assert!(on_segment, "synthetic point off every neighbour segment");
    }
    Ok(())
}

#[test]
fn smote_matches_brute_force_oracle() {
    check_smote_matches_brute_force_oracle();
}

pub fn check_smote_matches_brute_force_oracle() {
    for seed in 0..10 {
        let data = random_dataset(seed, 120, 3, 0.15);
        check_smote(&data, seed).unwrap();
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn smote_balances_and_interpolates(
        seed in any::<u64>(),
        n in 3usize..80,
        dim in 1usize..5,
        p in 0.02f64..0.98,
    ) {
        let data = random_dataset(seed, n, dim, p);
        let pos = data.iter().filter(|e| e.label.is_overuse()).count();
        prop_assume!(pos > 0 && pos < n);
        check_smote(&data, seed)?;
    }

    #[test]
    fn forest_scores_are_probabilities(seed in any::<u64>(), n in 10usize..60) {
        let data = random_dataset(seed, n, 3, 0.4);
        let weights: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { 0.3 }).collect();
        let hp = Hyperparams { n_trees: 5, seed, ..Hyperparams::default() };
        let m = train_forest(&data, &weights, &hp).unwrap();
        for e in &data {
            let s = m.score(&e.features);
            prop_assert!((0.0..=1.0).contains(&s));
        }
    }
}
