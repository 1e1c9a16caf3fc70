//! Arm rotation and model-update schedule over a simulated study.

#[path = "common/mod.rs"]
mod common;

use std::collections::BTreeSet;

use nudge_core::engine::UpdateKind;
use nudge_core::schedule::latin_square;
use nudge_core::sim::{drive, user_id_for, Agent, Input, LiveSource, Source};
use nudge_core::time::HOUR_MS;
use nudge_core::{Arm, Engine, Output, Phase, Timestamp, UserMeta, UtcOffset};

use common::short_config;

#[test]
fn latin_square_is_balanced() {
    check_latin_square_is_balanced();
}

pub fn check_latin_square_is_balanced() {
    let sq = latin_square(4).unwrap();
    let all: BTreeSet<Arm> = Arm::ALL.into_iter().collect();
    for i in 0..4 {
        let row: BTreeSet<Arm> = sq[i].iter().copied().collect();
        let col: BTreeSet<Arm> = (0..4).map(|r| sq[r][i]).collect();
        assert_eq!(row, all, "row {i}");
        assert_eq!(col, all, "column {i}");
    }
    // Williams design: every ordered pair of distinct arms is adjacent in
    // exactly one row.
    for a in Arm::ALL {
        for b in Arm::ALL.into_iter().filter(|&b| b != a) {
            let n = sq
                .iter()
                .flat_map(|r| r.windows(2))
                .filter(|w| w[0] == a && w[1] == b)
                .count();
            assert_eq!(n, 1, "{a} -> {b}");
        }
    }
}

/// Per-update snapshot of the user's model checksums.
struct Snapshot {
    user: usize,
    kind: UpdateKind,
    at: Timestamp,
    corpus_size: usize,
    personalized: Option<String>,
    adaptive: Option<String>,
}

/// Passes everything through to the live source and snapshots models after
/// each training job.
struct Watch {
    inner: LiveSource,
    seen: usize,
    snapshots: Vec<Snapshot>,
}

impl Source for Watch {
    fn peek_ts(&mut self) -> Option<Timestamp> {
        self.inner.peek_ts()
    }

    fn pop(&mut self) -> Option<Input> {
        self.inner.pop()
    }

    fn react(&mut self, engine: &Engine, outputs: &[Output]) {
        for up in &engine.updates()[self.seen..] {
            let u = engine.user_index(&up.user_id).unwrap();
            let rt = &engine.users()[u];
            self.snapshots.push(Snapshot {
                user: u,
                kind: up.kind,
                at: up.at,
                corpus_size: up.corpus_size,
                personalized: rt.personalized.as_ref().map(|m| m.checksum()),
                adaptive: rt.adaptive.as_ref().map(|m| m.checksum()),
            });
        }
        self.seen = engine.updates().len();
        self.inner.react(engine, outputs);
    }
}

fn watched_run(seed: u64, freeze: bool) -> (Engine, Vec<Snapshot>) {
    let mut config = short_config(seed);
    config.freeze_adaptive = freeze;
    let profile = config.resolve_profile().unwrap();
    let plan = config.plan();
    let drift = profile.drift.as_ref().map(|d| d.intervention_day);
    let mut users = Vec::new();
    let mut agents = Vec::new();
    for i in 0..config.n_users {
        let p = profile.instantiate(seed, i);
        users.push(UserMeta {
            user_id: user_id_for(i),
            user_index: i,
            utc_offset: UtcOffset(p.utc_offset_minutes),
            monitored_apps: p.monitored_apps(),
        });
        agents.push(Agent::new(i, user_id_for(i), p, seed, plan, drift));
    }
    let mut engine = Engine::new(config.engine_config(), users).unwrap();
    let mut watch = Watch {
        inner: LiveSource::new(agents, &config),
        seen: 0,
        snapshots: Vec::new(),
    };
    drive(&mut engine, &mut watch, None).unwrap();
    (engine, watch.snapshots)
}

#[test]
fn every_block_holds_each_arm_once() {
    check_every_block_holds_each_arm_once();
}

pub fn check_every_block_holds_each_arm_once() {
    let exp = common::short_study(5);
    let engine = &exp.engine;
    let plan = exp.config.plan();
    let first = plan.first_day_of(Phase::Intervention);
    for m in &exp.users {
        let u = m.user_index;
        let noon = |day: u32| m.utc_offset.midnight_of(plan.date_of(day)) + 12 * HOUR_MS;
        for block in 0..plan.intervention_days / 4 {
            let arms: BTreeSet<Arm> = (0..4)
                .map(|d| engine.phase_at(u, noon(first + block * 4 + d)).1.unwrap())
                .collect();
            assert_eq!(arms.len(), 4, "{} block {block}", m.user_id);
        }
        for day in 0..first {
            assert_eq!(engine.phase_at(u, noon(day)).1, None);
        }
    }
    // Delivered interventions carry the arm of their day.
    for r in engine.records() {
        let u = engine.user_index(&r.user_id).unwrap();
        assert_eq!(engine.phase_at(u, r.ts).1, Some(r.arm));
    }
}

#[test]
fn personalized_is_frozen_and_adaptive_corpus_grows() {
    check_personalized_is_frozen_and_adaptive_corpus_grows();
}

pub fn check_personalized_is_frozen_and_adaptive_corpus_grows() {
    let (engine, snaps) = watched_run(21, false);
    for u in 0..engine.users().len() {
        let mine: Vec<&Snapshot> = snaps.iter().filter(|s| s.user == u).collect();
        let trained = mine
            .iter()
            .find(|s| s.kind == UpdateKind::Personalized)
            .expect("personalized training ran");
        let checksum = trained.personalized.clone().unwrap();
        let nightly: Vec<&&Snapshot> = mine.iter().filter(|s| s.kind == UpdateKind::Nightly).collect();
        assert!(nightly.len() >= 6, "user {u}: {} nightly updates", nightly.len());
        let mut adaptive_changes = 0;
        for pair in nightly.windows(2) {
            let (prev, next) = (pair[0], pair[1]);
            assert_eq!(next.personalized.as_deref(), Some(checksum.as_str()));
            let feedback_between = engine.records().iter().any(|r| {
                r.feedback_ts
                    .is_some_and(|t| t >= prev.at && t < next.at)
            });
            if feedback_between {
                assert!(
                    next.corpus_size > prev.corpus_size,
                    "user {u}: corpus {} -> {} despite feedback",
                    prev.corpus_size,
                    next.corpus_size
                );
            } else {
                assert!(next.corpus_size >= prev.corpus_size);
            }
            if next.adaptive != prev.adaptive {
                adaptive_changes += 1;
            }
        }
        assert!(adaptive_changes > 0, "user {u}: adaptive model never changed");
        let rt = &engine.users()[u];
        assert_eq!(rt.personalized.as_ref().unwrap().checksum(), checksum);
    }
}

#[test]
fn frozen_adaptive_stays_personalized() {
    let (engine, snaps) = watched_run(22, true);
    assert!(snaps.iter().any(|s| s.kind == UpdateKind::Nightly));
    for s in snaps.iter().filter(|s| s.kind == UpdateKind::Nightly) {
        assert_eq!(s.adaptive, s.personalized, "user {}", s.user);
    }
    assert!(engine.updates().iter().all(|u| u.kind != UpdateKind::Nightly || !u.trained));
}
