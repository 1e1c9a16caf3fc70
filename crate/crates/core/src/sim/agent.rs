//! Synthetic phone users.
//!
//! An agent plans each local day up front (places, context samples, phone
//! episodes) and reacts to prompts and interventions as they arrive. Every
//! draw comes from a stream keyed by (seed, purpose, user, day or instant),
//! so reactions never perturb later plans.

use std::collections::HashMap;

use chrono::Datelike;
use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, Poisson};

use crate::event::{ActivityState, EventBody, Label, ResponseBody, SensorEvent, UserId};
use crate::features::{NIGHT_END_HOUR, NIGHT_START_HOUR};
use crate::schedule::{Phase, PhasePlan};
use crate::seeds::{stream, Stream};
use crate::time::{Timestamp, UtcOffset, HOUR_MS, MINUTE_MS, SECOND_MS};

use super::profile::{Latent, PlaceWeights, UserProfile};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlaceKind {
    Home,
    Work,
    Other,
    Transit,
}

#[derive(Clone, Copy, Debug)]
struct Segment {
    start: Timestamp,
    end: Timestamp,
    place: PlaceKind,
    from: [f64; 2],
    to: [f64; 2],
}

/// One planned sensor event; `episode` ties it to a cancellable phone episode.
#[derive(Clone, Debug, PartialEq)]
pub struct PlannedEvent {
    pub ts: Timestamp,
    pub episode: Option<u64>,
    pub body: EventBody,
}

/// What an agent does in response to something shown to it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Reaction {
    /// Drop every not-yet-delivered event of this episode.
    pub cancel_episode: Option<u64>,
    pub events: Vec<(Timestamp, EventBody)>,
    pub responses: Vec<(Timestamp, ResponseBody)>,
}

#[derive(Clone, Debug)]
struct Current {
    episode: Option<u64>,
    app_id: String,
    app_category: String,
    monitored: bool,
    start: Timestamp,
}

#[derive(Clone, Debug)]
pub struct Agent {
    pub index: usize,
    pub user_id: UserId,
    pub profile: UserProfile,
    pub offset: UtcOffset,
    seed: u64,
    plan: PhasePlan,
    drift_from: Option<Timestamp>,
    battery: f64,
    busy_until: Timestamp,
    next_episode: u64,
    segments: Vec<Segment>,
    planned_end: HashMap<u64, Timestamp>,
    current: Option<Current>,
    usage_day: i64,
    usage_ms: i64,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

const CONTACTS: [&str; 6] = ["c1", "c2", "c3", "c4", "c5", "c6"];

impl Agent {
    /// `drift_day` is an intervention-phase day index.
    pub fn new(
        index: usize,
        user_id: UserId,
        profile: UserProfile,
        seed: u64,
        plan: PhasePlan,
        drift_day: Option<u32>,
    ) -> Agent {
        let offset = UtcOffset(profile.utc_offset_minutes);
        let drift_from = drift_day.and_then(|d| {
            (d < plan.intervention_days).then(|| {
                offset.midnight_of(plan.date_of(plan.first_day_of(Phase::Intervention) + d))
            })
        });
        let start = offset.midnight_of(plan.study_start);
        Agent {
            index,
            user_id,
            profile,
            offset,
            seed,
            plan,
            drift_from,
            battery: 80.0,
            busy_until: start,
            next_episode: 0,
            segments: Vec::new(),
            planned_end: HashMap::new(),
            current: None,
            usage_day: offset.local_day(start),
            usage_ms: 0,
        }
    }

    pub fn plan(&self) -> &PhasePlan {
        &self.plan
    }

    pub fn is_monitored(&self, app_id: &str) -> bool {
        self.profile
            .apps
            .iter()
            .any(|a| a.app_id == app_id && a.monitored)
    }

    fn place_at(&self, ts: Timestamp) -> PlaceKind {
        self.segments
            .iter()
            .rev()
            .find(|s| s.start <= ts && ts < s.end)
            .map(|s| s.place)
            .unwrap_or(PlaceKind::Home)
    }

    fn usage_weights(&self, ts: Timestamp) -> PlaceWeights {
        match (&self.profile.drift, self.drift_from) {
            (Some(d), Some(from)) if ts >= from => d.usage_by_place.unwrap_or(self.profile.usage_by_place),
            _ => self.profile.usage_by_place,
        }
    }

    fn coefficients(&self, ts: Timestamp) -> &Latent {
        match (&self.profile.drift, self.drift_from) {
            (Some(d), Some(from)) if ts >= from => &d.latent,
            _ => &self.profile.latent,
        }
    }

    /// Monitored-app time today, including the open session, in hours.
    fn usage_hours(&self, ts: Timestamp) -> f64 {
        let today = self.offset.local_day(ts);
        let mut ms = if self.usage_day == today {
            self.usage_ms
        } else {
            0
        };
        if let Some(c) = self.current.as_ref().filter(|c| c.monitored) {
            ms += ts - c.start.max(self.offset.local_midnight(ts));
        }
        ms as f64 / HOUR_MS as f64
    }

    fn session_minutes(&self, ts: Timestamp) -> f64 {
        self.current
            .as_ref()
            .filter(|c| c.monitored)
            .map_or(0.0, |c| (ts - c.start) as f64 / MINUTE_MS as f64)
    }

    /// Probability that the user is truly overusing at `ts`.
    pub fn latent_probability(&self, ts: Timestamp) -> f64 {
        let c = self.coefficients(ts);
        let hour = self.offset.local_hour(ts);
        let night = hour >= NIGHT_START_HOUR as f64 || hour < NIGHT_END_HOUR as f64;
        let place = match self.place_at(ts) {
            PlaceKind::Home => c.home,
            PlaceKind::Work => c.work,
            PlaceKind::Transit => c.transit,
            PlaceKind::Other => 0.0,
        };
        let z = c.intercept
            + if night { c.night } else { 0.0 }
            + c.usage_per_hour * self.usage_hours(ts)
            + place
            + c.session_per_10min * self.session_minutes(ts).min(30.0) / 10.0;
        sigmoid(z)
    }

    pub fn latent(&self, ts: Timestamp) -> bool {
        let u: f64 = stream(self.seed, Stream::Latent, &self.user_id, ts).random();
        u < self.latent_probability(ts)
    }

    /// Updates session and usage bookkeeping as events are delivered.
    pub fn observe(&mut self, event: &SensorEvent, episode: Option<u64>) {
        match &event.body {
            EventBody::AppEnter {
                app_id,
                app_category,
            } => {
                self.current = Some(Current {
                    episode,
                    app_id: app_id.clone(),
                    app_category: app_category.clone(),
                    monitored: self.is_monitored(app_id),
                    start: event.timestamp,
                });
            }
            EventBody::AppExit { .. } => {
                if let Some(c) = self.current.take() {
                    if let Some(e) = c.episode {
                        self.planned_end.remove(&e);
                    }
                    if c.monitored {
                        let day = self.offset.local_day(event.timestamp);
                        let from = c.start.max(self.offset.local_midnight(event.timestamp));
                        if day != self.usage_day {
                            self.usage_day = day;
                            self.usage_ms = 0;
                        }
                        self.usage_ms += event.timestamp - from;
                    }
                }
            }
            _ => {}
        }
    }

    /// Answers a label prompt, maybe.
    pub fn on_prompt(&self, ts: Timestamp) -> Option<(Timestamp, ResponseBody)> {
        let r = &self.profile.responses;
        let mut rng = stream(self.seed, Stream::Label, &self.user_id, ts);
        let respond = rng.random::<f64>() < r.label_response_p;
        let flip = rng.random::<f64>() < r.label_noise;
        let delay = rng.random_range(2 * SECOND_MS..15 * SECOND_MS);
        if !respond {
            return None;
        }
        let overuse = self.latent(ts) != flip;
        let label = if overuse {
            Label::Overuse
        } else {
            Label::NotOveruse
        };
        Some((
            ts + delay,
            ResponseBody::LabelAnswer {
                prompt_ts: ts,
                label,
            },
        ))
    }

    /// Reaction to an intervention shown at `ts`.
    pub fn on_intervention(&self, ts: Timestamp, card_shown: bool) -> Reaction {
        let mut out = Reaction::default();
        let Some(current) = &self.current else {
            return out;
        };
        let planned_end = current
            .episode
            .and_then(|e| self.planned_end.get(&e).copied())
            .unwrap_or(ts);
        let latent = self.latent(ts);
        let q = &self.profile.receptivity;
        let mut rng = stream(self.seed, Stream::Reaction, &self.user_id, ts);
        let u_quit: f64 = rng.random();
        let lock_screen = rng.random::<f64>() < 0.5;
        let delay = rng.random_range(2 * SECOND_MS..10 * SECOND_MS);
        let typing = rng.random_range(8 * SECOND_MS..20 * SECOND_MS);
        let p_quit = q.q0 + if latent { q.qa } else { 0.0 } + if card_shown { q.qe } else { 0.0 };
        let quit_at = ts + delay;
        let answered_at;
        if u_quit < p_quit && quit_at + SECOND_MS < planned_end {
            out.cancel_episode = current.episode;
            let exit = EventBody::AppExit {
                app_id: current.app_id.clone(),
                app_category: current.app_category.clone(),
            };
            if lock_screen {
                out.events.push((quit_at, EventBody::ScreenOff));
                out.events.push((quit_at + 1, exit));
            } else {
                out.events.push((quit_at, exit));
                out.events.push((quit_at + SECOND_MS, EventBody::ScreenOff));
            }
            answered_at = quit_at - SECOND_MS;
        } else {
            if ts + typing < planned_end {
                out.responses.push((
                    ts + typing,
                    ResponseBody::ChallengeCompleted {
                        intervention_ts: ts,
                    },
                ));
            }
            answered_at = ts + typing + SECOND_MS;
        }
        let r = &self.profile.responses;
        let mut fb = stream(self.seed, Stream::Feedback, &self.user_id, ts);
        let respond = fb.random::<f64>() < r.feedback_response_p;
        let flip = fb.random::<f64>() < r.label_noise;
        if respond {
            out.responses.push((
                answered_at,
                ResponseBody::Feedback {
                    intervention_ts: ts,
                    agree: latent != flip,
                },
            ));
        }
        out
    }

    /// Plans study day `day`: places, context samples and phone episodes.
    pub fn plan_day(&mut self, day: u32) -> Vec<PlannedEvent> {
        let date = self.plan.date_of(day);
        let midnight = self.offset.midnight_of(date);
        let mut rng = stream(self.seed, Stream::Agent, &self.user_id, i64::from(day));
        let segments = self.day_segments(&mut rng, midnight, date.weekday().number_from_monday() >= 6);
        self.segments.retain(|s| s.end > midnight - HOUR_MS);
        self.segments.extend(segments.iter().copied());
        let mut out = Vec::new();
        self.context_samples(&mut rng, midnight, &mut out);
        self.social_samples(&mut rng, midnight, &mut out);
        self.episodes(&mut rng, midnight, &mut out);
        out
    }

    fn day_segments(&self, rng: &mut ChaCha8Rng, midnight: Timestamp, weekend: bool) -> Vec<Segment> {
        let p = &self.profile.places;
        let h = |x: f64| midnight + (x * HOUR_MS as f64) as i64;
        let jitter = Normal::new(0.0, 0.4).expect("finite");
        let mut plan: Vec<(f64, PlaceKind, [f64; 2], [f64; 2])> = Vec::new();
        let mut push = |t: f64, k: PlaceKind, from: [f64; 2], to: [f64; 2]| plan.push((t, k, from, to));
        if weekend {
            push(0.0, PlaceKind::Home, p.home, p.home);
            if rng.random::<f64>() < 0.6 {
                let out_at = 13.0 + jitter.sample(rng);
                push(out_at, PlaceKind::Transit, p.home, p.other);
                push(out_at + 0.33, PlaceKind::Other, p.other, p.other);
                let back = 17.0 + jitter.sample(rng);
                push(back, PlaceKind::Transit, p.other, p.home);
                push(back + 0.33, PlaceKind::Home, p.home, p.home);
            }
        } else {
            let leave = 8.0 + jitter.sample(rng);
            let back = 17.5 + jitter.sample(rng);
            push(0.0, PlaceKind::Home, p.home, p.home);
            push(leave, PlaceKind::Transit, p.home, p.work);
            push(leave + 0.5, PlaceKind::Work, p.work, p.work);
            push(back, PlaceKind::Transit, p.work, p.home);
            push(back + 0.5, PlaceKind::Home, p.home, p.home);
            if rng.random::<f64>() < 0.3 {
                push(19.0, PlaceKind::Transit, p.home, p.other);
                push(19.25, PlaceKind::Other, p.other, p.other);
                push(21.0, PlaceKind::Transit, p.other, p.home);
                push(21.25, PlaceKind::Home, p.home, p.home);
            }
        }
        let n = plan.len();
        (0..n)
            .map(|i| {
                let (t, place, from, to) = plan[i];
                let end = if i + 1 < n { plan[i + 1].0 } else { 24.0 };
                Segment {
                    start: h(t),
                    end: h(end),
                    place,
                    from,
                    to,
                }
            })
            .collect()
    }

    fn position(&self, ts: Timestamp) -> ([f64; 2], PlaceKind) {
        let seg = self
            .segments
            .iter()
            .rev()
            .find(|s| s.start <= ts && ts < s.end);
        match seg {
            Some(s) => {
                let f = (ts - s.start) as f64 / (s.end - s.start).max(1) as f64;
                (
                    [
                        s.from[0] + (s.to[0] - s.from[0]) * f,
                        s.from[1] + (s.to[1] - s.from[1]) * f,
                    ],
                    s.place,
                )
            }
            None => (self.profile.places.home, PlaceKind::Home),
        }
    }

    fn context_samples(&mut self, rng: &mut ChaCha8Rng, midnight: Timestamp, out: &mut Vec<PlannedEvent>) {
        let ev = |ts, body| PlannedEvent {
            ts,
            episode: None,
            body,
        };
        for k in 0..144 {
            let ts = midnight + k * 10 * MINUTE_MS + rng.random_range(0..30 * SECOND_MS);
            let (pos, place) = self.position(ts);
            out.push(ev(
                ts,
                EventBody::LocationSample {
                    latitude: pos[0] + rng.random_range(-0.0001..0.0001),
                    longitude: pos[1] + rng.random_range(-0.0001..0.0001),
                },
            ));
            let mobile = place == PlaceKind::Transit || rng.random::<f64>() < 0.05;
            out.push(ev(
                ts + 1,
                EventBody::ActivitySample {
                    state: if mobile {
                        ActivityState::Mobile
                    } else {
                        ActivityState::Stationary
                    },
                },
            ));
        }
        let user_tag = self.index;
        for k in 0..96 {
            let ts = midnight + k * 15 * MINUTE_MS + 2 * MINUTE_MS + rng.random_range(0..30 * SECOND_MS);
            let (_, place) = self.position(ts);
            let hour = self.offset.local_hour(ts);
            let dark = !(7.0..23.0).contains(&hour);
            let lux = match (place, dark) {
                (PlaceKind::Transit, false) => rng.random_range(1000.0..20000.0),
                (_, true) => rng.random_range(0.0..8.0),
                _ => rng.random_range(100.0..600.0),
            };
            out.push(ev(ts, EventBody::LightSample { lux }));
            let (visible, connected) = match place {
                PlaceKind::Home => (rng.random_range(5..10), Some(format!("ap-home-{user_tag}"))),
                PlaceKind::Work => (rng.random_range(10..21), Some("ap-work".to_string())),
                PlaceKind::Other => (
                    rng.random_range(3..11),
                    (rng.random::<f64>() < 0.5).then(|| "ap-cafe".to_string()),
                ),
                PlaceKind::Transit => (rng.random_range(0..7), None),
            };
            out.push(ev(
                ts + 1,
                EventBody::WifiScan {
                    visible_aps: visible,
                    connected_ap: connected,
                },
            ));
            let devices: Vec<String> = match place {
                PlaceKind::Home => {
                    let mut d = vec![format!("bt-tv-{user_tag}"), format!("bt-speaker-{user_tag}")];
                    if rng.random::<f64>() < 0.5 {
                        d.push(format!("bt-family-{user_tag}"));
                    }
                    d
                }
                PlaceKind::Work => (0..rng.random_range(3..9))
                    .map(|_| format!("bt-work-{}", rng.random_range(0..15)))
                    .collect(),
                PlaceKind::Other | PlaceKind::Transit => (0..rng.random_range(0..5))
                    .map(|_| format!("bt-pub-{}", rng.random_range(0..40)))
                    .collect(),
            };
            out.push(ev(ts + 2, EventBody::BluetoothScan { devices }));
            let charging = place == PlaceKind::Home && dark;
            self.battery = if charging {
                (self.battery + 5.0).min(100.0)
            } else {
                (self.battery - rng.random_range(0.5..1.5)).max(5.0)
            };
            out.push(ev(
                ts + 3,
                EventBody::BatterySample {
                    level: (self.battery * 10.0).round() / 10.0,
                    charging,
                },
            ));
        }
    }

    fn hour_sampler(&self) -> WeightedIndex<f64> {
        WeightedIndex::new(&self.profile.diurnal.weights).expect("validated weights")
    }

    fn social_samples(&self, rng: &mut ChaCha8Rng, midnight: Timestamp, out: &mut Vec<PlannedEvent>) {
        let hours = self.hour_sampler();
        let at = |rng: &mut ChaCha8Rng| {
            midnight + hours.sample(rng) as i64 * HOUR_MS + rng.random_range(0..HOUR_MS)
        };
        let contacts = WeightedIndex::new([6.0, 5.0, 4.0, 3.0, 2.0, 1.0]).expect("weights");
        let ctx = &self.profile.context;
        let n_msg = sample_poisson(rng, ctx.messages_per_day);
        for _ in 0..n_msg {
            let ts = at(rng);
            let contact = CONTACTS[contacts.sample(rng)].to_string();
            let body = if rng.random::<f64>() < 0.5 {
                EventBody::MessageSent { contact }
            } else {
                EventBody::MessageReceived { contact }
            };
            out.push(PlannedEvent {
                ts,
                episode: None,
                body,
            });
        }
        let apps = &self.profile.apps;
        let n_notif = sample_poisson(rng, ctx.notifications_per_day);
        for _ in 0..n_notif {
            let ts = at(rng);
            let app_id = apps[rng.random_range(0..apps.len())].app_id.clone();
            out.push(PlannedEvent {
                ts,
                episode: None,
                body: EventBody::Notification { app_id },
            });
        }
    }

    fn episodes(&mut self, rng: &mut ChaCha8Rng, midnight: Timestamp, out: &mut Vec<PlannedEvent>) {
        let hours = self.hour_sampler();
        let weights = self.usage_weights(midnight + 12 * HOUR_MS);
        let w_max = weights.max();
        let mut starts: Vec<(Timestamp, usize)> = Vec::new();
        for (i, app) in self.profile.apps.iter().enumerate() {
            for _ in 0..sample_poisson(rng, app.sessions_per_day) {
                // Thin candidate times by place so the daily count is kept.
                let mut ts = 0;
                for _ in 0..64 {
                    ts = midnight + hours.sample(rng) as i64 * HOUR_MS + rng.random_range(0..HOUR_MS);
                    let w = match self.place_at(ts) {
                        PlaceKind::Home => weights.home,
                        PlaceKind::Work => weights.work,
                        PlaceKind::Other => weights.other,
                        PlaceKind::Transit => weights.transit,
                    };
                    if rng.random::<f64>() * w_max < w {
                        break;
                    }
                }
                starts.push((ts, i));
            }
        }
        starts.sort_unstable();
        let ui_rate = self.profile.context.ui_events_per_minute;
        for (start, app_idx) in starts {
            let app = &self.profile.apps[app_idx];
            let s = start.max(self.busy_until + 30 * SECOND_MS);
            let len = LogNormal::new(app.median_minutes.ln(), app.sigma)
                .expect("validated")
                .sample(rng);
            let len_ms = ((len * MINUTE_MS as f64) as i64).max(20 * SECOND_MS);
            let enter = s + 2 * SECOND_MS;
            let exit = enter + len_ms;
            let id = self.next_episode;
            self.next_episode += 1;
            self.planned_end.insert(id, exit);
            let ep = |ts, body| PlannedEvent {
                ts,
                episode: Some(id),
                body,
            };
            out.push(ep(s, EventBody::ScreenOn));
            out.push(ep(s + SECOND_MS, EventBody::Unlock));
            out.push(ep(
                enter,
                EventBody::AppEnter {
                    app_id: app.app_id.clone(),
                    app_category: app.category.clone(),
                },
            ));
            let n_ui = sample_poisson(rng, ui_rate * len_ms as f64 / MINUTE_MS as f64);
            let mut ui: Vec<Timestamp> = (0..n_ui)
                .map(|_| rng.random_range(enter + 1..exit))
                .collect();
            ui.sort_unstable();
            for ts in ui {
                let id = app.app_id.clone();
                let r: f64 = rng.random();
                let body = if r < 0.6 {
                    EventBody::UiScroll { app_id: id }
                } else if r < 0.85 {
                    EventBody::UiClick { app_id: id }
                } else if r < 0.95 {
                    EventBody::UiFocus { app_id: id }
                } else {
                    EventBody::UiWindowChange { app_id: id }
                };
                out.push(ep(ts, body));
            }
            out.push(ep(
                exit,
                EventBody::AppExit {
                    app_id: app.app_id.clone(),
                    app_category: app.category.clone(),
                },
            ));
            out.push(ep(exit + SECOND_MS, EventBody::ScreenOff));
            self.busy_until = exit + SECOND_MS;
        }
    }
}

fn sample_poisson(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng) as u64
}
