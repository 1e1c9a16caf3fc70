use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use nudge_bench::{examples, trace};
use nudge_core::event::EventLog;
use nudge_core::explain::sample_background;
use nudge_core::features::{extract_features, required_window_start, ExtractContext};
use nudge_core::learner::{smote_upsample, train_forest, Hyperparams, SMOTE_K};
use nudge_core::time::HOUR_MS;
use nudge_core::{Explainer, FeatureCatalog};

fn features(c: &mut Criterion) {
    let (meta, events) = trace();
    let mut log = EventLog::new();
    for e in events.iter().cloned() {
        log.append(e).unwrap();
    }
    let t = events[0].timestamp + 20 * HOUR_MS;
    let ctx = ExtractContext {
        utc_offset: meta.utc_offset,
        monitored_apps: &meta.monitored_apps,
        home: None,
    };
    c.bench_function("extract_features_evening", |b| {
        b.iter(|| {
            let w = log
                .window(&meta.user_id, required_window_start(t, meta.utc_offset), t)
                .unwrap();
            black_box(extract_features(&w, &ctx))
        })
    });
}

fn training(c: &mut Criterion) {
    let dim = FeatureCatalog::builtin().len();
    let data = examples(1500, dim, 1);
    let weights = vec![1.0; data.len()];
    let hp = Hyperparams::default();
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("smote_1500", |b| {
        b.iter(|| black_box(smote_upsample(&data, SMOTE_K, 5).unwrap()))
    });
    group.bench_function("forest_1500", |b| b.iter(|| black_box(train_forest(&data, &weights, &hp).unwrap())));
    group.finish();
}

fn explanation(c: &mut Criterion) {
    let catalog = FeatureCatalog::builtin();
    let data = examples(600, catalog.len(), 2);
    let model = train_forest(&data, &vec![1.0; data.len()], &Hyperparams::default()).unwrap();
    let vectors: Vec<Vec<f64>> = data.iter().map(|e| e.features.clone()).collect();
    let explainer = Explainer::new(sample_background(&vectors, 3), catalog).unwrap();
    let x = &vectors[7];
    c.bench_function("shapley_categories", |b| {
        b.iter(|| black_box(explainer.explain(&model, x, 0, 2).unwrap()))
    });
    c.bench_function("forest_score", |b| b.iter(|| black_box(model.score(x))));
}

criterion_group!(benches, features, training, explanation);
criterion_main!(benches);
