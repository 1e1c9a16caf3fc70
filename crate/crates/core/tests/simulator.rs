//! Synthetic users: event rates, response mechanics and the schedule they
//! run under.

mod common;

use chrono::NaiveDate;
use nudge_core::event::{EventBody, Label, ResponseBody};
use nudge_core::learner::LabelSource;
use nudge_core::schedule::{Arm, Phase, PhasePlan};
use nudge_core::sim::{run_experiment, user_id_for, Agent, UserProfile};
use nudge_core::time::{MINUTE_MS, SECOND_MS};
use nudge_core::Timestamp;

fn long_plan(days: u32) -> PhasePlan {
    PhasePlan {
        study_start: NaiveDate::from_ymd_opt(2025, 3, 3).unwrap(),
        modeling_days: days,
        break_days: 0,
        baseline_days: 1,
        intervention_days: 4,
    }
}

fn agent(profile: UserProfile, seed: u64) -> Agent {
    Agent::new(0, user_id_for(0), profile, seed, long_plan(200), None)
}

/// Plans `day` and feeds the agent everything up to the first monitored
/// entry, returning its time and planned exit.
fn enter_first_session(agent: &mut Agent, day: u32) -> Option<(Timestamp, Timestamp)> {
    let mut planned = agent.plan_day(day);
    planned.sort_by_key(|p| p.ts);
    let i = planned.iter().position(|p| match &p.body {
        EventBody::AppEnter { app_id, .. } => agent.is_monitored(app_id),
        _ => false,
    })?;
    let episode = planned[i].episode;
    let exit = planned[i..]
        .iter()
        .find(|p| p.episode == episode && matches!(p.body, EventBody::AppExit { .. }))?
        .ts;
    for p in &planned[..=i] {
        let event = nudge_core::event::SensorEvent::new(agent.user_id.clone(), p.ts, p.body.clone());
        agent.observe(&event, p.episode);
    }
    Some((planned[i].ts, exit))
}

#[test]
fn monitored_visit_rate_matches_profile() {
    let profile = UserProfile::builtin().instantiate(3, 0);
    let expected: f64 = profile.apps.iter().filter(|a| a.monitored).map(|a| a.sessions_per_day).sum();
    let mut a = agent(profile, 3);
    let mut visits = 0usize;
    for day in 0..200 {
        visits += a
            .plan_day(day)
            .iter()
            .filter(|p| matches!(&p.body, EventBody::AppEnter { app_id, .. } if a.is_monitored(app_id)))
            .count();
    }
    let rate = visits as f64 / 200.0;
    assert!((rate / expected - 1.0).abs() < 0.05, "{rate} per day vs {expected}");
}

#[test]
fn explanation_card_never_lowers_quitting() {
    let mut quits = [0usize; 2];
    let mut tried = 0;
    for day in 0..60 {
        let mut a = agent(UserProfile::builtin(), 21);
        a.profile.receptivity.qe = 0.3;
        let Some((enter, exit)) = enter_first_session(&mut a, day) else {
            continue;
        };
        let mut ts = enter;
        while ts + 20 * SECOND_MS < exit {
            let without = a.on_intervention(ts, false).cancel_episode.is_some();
            let with = a.on_intervention(ts, true).cancel_episode.is_some();
            // Same draws either way, so a quit without the card is a quit with it.
            assert!(!without || with, "day {day} ts {ts}");
            quits[0] += without as usize;
            quits[1] += with as usize;
            tried += 1;
            ts += 7 * SECOND_MS;
        }
    }
    assert!(tried > 300, "{tried} instants");
    assert!(quits[1] > quits[0], "{quits:?}");
    // qe = 0.3 adds roughly 0.3 to the quit probability.
    let lift = (quits[1] - quits[0]) as f64 / tried as f64;
    assert!((0.2..0.4).contains(&lift), "lift {lift}");
}

#[test]
fn overuse_with_full_receptivity_always_quits() {
    let mut hits = 0;
    for day in 0..40 {
        let mut a = agent(UserProfile::builtin(), 22);
        a.profile.receptivity.q0 = 0.0;
        a.profile.receptivity.qa = 1.0;
        a.profile.receptivity.qe = 0.0;
        let Some((enter, exit)) = enter_first_session(&mut a, day) else {
            continue;
        };
        let mut ts = enter;
        // Leave room for the reaction delay before the planned exit.
        while ts + 12 * SECOND_MS < exit {
            let quit = a.on_intervention(ts, false).cancel_episode.is_some();
            if a.latent(ts) {
                assert!(quit, "day {day} ts {ts}");
                hits += 1;
            } else {
                assert!(!quit, "q0 = 0 and no card, yet quit at {ts}");
            }
            ts += 5 * SECOND_MS;
        }
    }
    assert!(hits > 20, "{hits} overuse instants");
}

#[test]
fn noiseless_answers_equal_the_latent_state() {
    let mut a = agent(UserProfile::builtin(), 23);
    a.profile.responses.label_noise = 0.0;
    a.profile.responses.label_response_p = 1.0;
    a.profile.responses.feedback_response_p = 1.0;
    let (enter, exit) = (0..20).find_map(|d| enter_first_session(&mut a, d).filter(|(e, x)| x - e > 2 * MINUTE_MS)).unwrap();
    let mut seen = [0usize; 2];
    let mut ts = enter;
    while ts < exit {
        let latent = a.latent(ts);
        seen[latent as usize] += 1;
        let Some((_, ResponseBody::LabelAnswer { label, .. })) = a.on_prompt(ts) else {
            panic!("no label at {ts}");
        };
        assert_eq!(label == Label::Overuse, latent);
        let feedback = a
            .on_intervention(ts, false)
            .responses
            .into_iter()
            .find_map(|(_, r)| match r {
                ResponseBody::Feedback { agree, .. } => Some(agree),
                _ => None,
            })
            .expect("always answers");
        assert_eq!(feedback, latent);
        ts += 3 * SECOND_MS;
    }
    assert!(seen[0] > 0 && seen[1] > 0, "{seen:?}");
}

#[test]
fn silent_users_leave_no_feedback_labels() {
    let mut profile = UserProfile::builtin();
    profile.responses.feedback_response_p = 0.0;
    let exp = run_experiment(nudge_core::sim::SimConfig {
        profile: Some(profile),
        keep_log: false,
        ..common::short_config(51)
    })
    .unwrap();
    assert!(!exp.engine.records().is_empty());
    let sources: Vec<LabelSource> = exp.engine.corpus().entries().iter().map(|e| e.example.source).collect();
    assert!(sources.contains(&LabelSource::ModelingPhasePrompt));
    assert!(!sources.contains(&LabelSource::InterventionFeedback));
    assert!(exp.engine.records().iter().all(|r| r.feedback.is_none()));
}

#[test]
fn card_lifts_quitting_at_study_level() {
    // Share of AdaptiveExp interventions followed by leaving the app within
    // ten seconds, with and without an effect of the card.
    let quit_share = |card: bool| {
        let mut profile = UserProfile::builtin();
        profile.receptivity.q0 = 0.0;
        profile.receptivity.qa = 0.0;
        profile.receptivity.qe = if card { 1.0 } else { 0.0 };
        let exp = run_experiment(nudge_core::sim::SimConfig {
            profile: Some(profile),
            ..common::short_config(52)
        })
        .unwrap();
        let sessions = common::sessions(&common::events_of(&exp.log_records().unwrap()));
        let shown: Vec<_> = exp.engine.records().iter().filter(|r| r.arm == Arm::AdaptiveExp).collect();
        let quit = shown
            .iter()
            .filter(|r| {
                sessions[&r.user_id]
                    .iter()
                    .any(|s| s.start <= r.ts && r.ts < s.end && s.end <= r.ts + 10 * SECOND_MS)
            })
            .count();
        quit as f64 / shown.len().max(1) as f64
    };
    let (off, on) = (quit_share(false), quit_share(true));
    // Only the card makes anyone quit here; what remains are sessions that
    // were about to end anyway.
    assert!(off < 0.1, "{off}");
    assert!(on > 0.9, "{on}");
}

#[test]
fn every_intervention_day_runs_all_four_arms() {
    let exp = common::short_study(53);
    let plan = exp.config.plan();
    let schedule = exp.engine.schedule();
    let first = plan.first_day_of(Phase::Intervention);
    for day in first..plan.total_days() {
        let mut arms: Vec<Arm> = (0..4).map(|u| schedule.arm_on_day(u, &plan, day).unwrap()).collect();
        arms.sort_by_key(|a| a.index());
        assert_eq!(arms, [Arm::Control, Arm::Personalized, Arm::AdaptiveNoExp, Arm::AdaptiveExp], "day {day}");
    }
    // And records carry the arm scheduled for their day.
    for r in exp.engine.records() {
        let u = exp.engine.user_index(&r.user_id).unwrap();
        let day = exp.engine.study_day(u, r.ts).unwrap();
        assert_eq!(Some(r.arm), schedule.arm_on_day(u, &plan, day));
    }
}
