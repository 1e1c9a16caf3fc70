use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::event::{ActivityState, EventBody, EventWindow};
use crate::time::{Timestamp, UtcOffset, MINUTE_MS, SECOND_MS};

use super::location::{self, haversine_m, Cell, MIN_DWELL_MS};
use super::{Feature, FeatureVector};

/// Trailing horizon for context features (activity, light, scans, location,
/// messages).
pub const CONTEXT_HORIZON_MS: i64 = 60 * MINUTE_MS;
/// A periodic sample represents at most this much time.
pub const SAMPLE_CAP_MS: i64 = 15 * MINUTE_MS;
/// Night is local `[22:00, 06:00)`.
pub const NIGHT_START_HOUR: u32 = 22;
pub const NIGHT_END_HOUR: u32 = 6;

const METERS_PER_DEGREE: f64 = 111_320.0;

/// Per-user inputs to extraction besides the event window.
#[derive(Clone, Copy, Debug)]
pub struct ExtractContext<'a> {
    pub utc_offset: UtcOffset,
    pub monitored_apps: &'a [String],
    pub home: Option<Cell>,
}

/// Earliest timestamp a window must cover for a decision at `decision_ts`.
pub fn required_window_start(decision_ts: Timestamp, offset: UtcOffset) -> Timestamp {
    offset
        .local_midnight(decision_ts)
        .min(decision_ts - CONTEXT_HORIZON_MS)
}

fn secs(ms: i64) -> f64 {
    ms as f64 / SECOND_MS as f64
}

/// (min, max, mean, population std); `None` for an empty sample.
fn summary(xs: &[f64]) -> Option<(f64, f64, f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Some((min, max, mean, var.sqrt()))
}

/// Extract the feature vector for the decision instant `window.window_end`.
///
/// Usage features cover local midnight up to the instant; context features
/// cover the trailing [`CONTEXT_HORIZON_MS`]. Features without supporting
/// events are flagged in the missing mask.
pub fn extract_features(window: &EventWindow<'_>, ctx: &ExtractContext<'_>) -> FeatureVector {
    let t = window.window_end;
    let mut v = FeatureVector::empty(window.user_id.clone(), t);
    usage_features(&mut v, &window.sub(ctx.utc_offset.local_midnight(t), t), ctx);
    let context = window.sub(t - CONTEXT_HORIZON_MS, t);
    activity_features(&mut v, &context);
    social_features(&mut v, &context, ctx.utc_offset);
    location_features(&mut v, &context, ctx.home);

    let hour = (ctx.utc_offset.local_hour(t).floor() as u32).min(23);
    v.set(Feature::HourOfDay, f64::from(hour));
    let night = !(NIGHT_END_HOUR..NIGHT_START_HOUR).contains(&hour);
    v.set(Feature::IsNight, if night { 1.0 } else { 0.0 });
    v
}

fn usage_features(v: &mut FeatureVector, w: &EventWindow<'_>, ctx: &ExtractContext<'_>) {
    let t = w.window_end;
    let mut unlocks = 0u32;
    let mut unlocked_since: Option<Timestamp> = None;
    let mut unlocked_ms = 0i64;
    let mut battery: Vec<(Timestamp, f64, bool)> = Vec::new();
    let mut categories: HashMap<&str, &str> = HashMap::new();
    let mut open: Option<(&str, &str, Timestamp, bool)> = None;
    let mut visits: BTreeMap<&str, u32> = BTreeMap::new();
    let mut durations: Vec<f64> = Vec::new();
    let mut ui = [0u32; 4];
    let mut scroll_apps: Vec<&str> = Vec::new();
    let mut notifications = 0u32;
    let mut notifying: BTreeSet<&str> = BTreeSet::new();

    for e in w.events {
        match &e.body {
            EventBody::Unlock => {
                unlocks += 1;
                unlocked_since.get_or_insert(e.timestamp);
            }
            EventBody::ScreenOff => {
                if let Some(s) = unlocked_since.take() {
                    unlocked_ms += e.timestamp - s;
                }
            }
            EventBody::BatterySample { level, charging } => {
                battery.push((e.timestamp, *level, *charging))
            }
            EventBody::AppEnter {
                app_id,
                app_category,
            } => {
                categories.insert(app_id, app_category);
                let monitored = ctx.monitored_apps.iter().any(|m| m == app_id);
                if monitored {
                    *visits.entry(app_id).or_default() += 1;
                }
                open = Some((app_id, app_category, e.timestamp, monitored));
            }
            EventBody::AppExit { app_id, .. } => {
                if let Some((open_app, _, start, monitored)) = open {
                    if open_app == app_id {
                        if monitored {
                            durations.push(secs(e.timestamp - start));
                        }
                        open = None;
                    }
                }
            }
            EventBody::UiScroll { app_id } => {
                ui[0] += 1;
                scroll_apps.push(app_id);
            }
            EventBody::UiClick { .. } => ui[1] += 1,
            EventBody::UiFocus { .. } => ui[2] += 1,
            EventBody::UiWindowChange { .. } => ui[3] += 1,
            EventBody::Notification { app_id } => {
                notifications += 1;
                notifying.insert(app_id);
            }
            _ => {}
        }
    }
    if let Some(s) = unlocked_since {
        unlocked_ms += t - s;
    }
    if let Some((_, _, start, true)) = open {
        durations.push(secs(t - start));
    }

    v.set(Feature::CountUnlock, f64::from(unlocks));
    v.set(Feature::SumDurationUnlock, secs(unlocked_ms));

    if let Some(&(last_ts, _, last_charging)) = battery.last() {
        let (mut charge_ms, mut discharge_ms, mut drop) = (0i64, 0i64, 0.0);
        for pair in battery.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if a.2 {
                charge_ms += b.0 - a.0;
            } else {
                discharge_ms += b.0 - a.0;
                drop += (a.1 - b.1).max(0.0);
            }
        }
        if discharge_ms > 0 {
            // Percentage points per hour while discharging.
            v.set(
                Feature::BatteryConsumptionRate,
                drop / (discharge_ms as f64 / 3_600_000.0),
            );
        }
        let tail = t - last_ts;
        if last_charging {
            charge_ms += tail;
        } else {
            discharge_ms += tail;
        }
        v.set(Feature::SumDurationCharge, secs(charge_ms));
        v.set(Feature::SumDurationDischarge, secs(discharge_ms));
    }

    let per_app: Vec<f64> = visits.values().map(|&c| f64::from(c)).collect();
    v.set(Feature::CountAppsVisited, per_app.len() as f64);
    v.set(Feature::SumVisits, per_app.iter().sum());
    if let Some((min, max, mean, std)) = summary(&per_app) {
        v.set(Feature::MinVisitsPerApp, min);
        v.set(Feature::MaxVisitsPerApp, max);
        v.set(Feature::MeanVisitsPerApp, mean);
        v.set(Feature::StdVisitsPerApp, std);
    }
    v.set(Feature::SumSessionDuration, durations.iter().sum());
    if let Some((min, max, mean, std)) = summary(&durations) {
        v.set(Feature::MinSessionDuration, min);
        v.set(Feature::MaxSessionDuration, max);
        v.set(Feature::MeanSessionDuration, mean);
        v.set(Feature::StdSessionDuration, std);
    }

    let counts = [
        Feature::CountScroll,
        Feature::CountClick,
        Feature::CountFocus,
        Feature::CountWindowChange,
    ];
    let props = [
        Feature::PropScroll,
        Feature::PropClick,
        Feature::PropFocus,
        Feature::PropWindowChange,
    ];
    let total: u32 = ui.iter().sum();
    for i in 0..4 {
        v.set(counts[i], f64::from(ui[i]));
        if total > 0 {
            v.set(props[i], f64::from(ui[i]) / f64::from(total));
        }
    }
    if let Some((_, current_category, _, _)) = open {
        let n = scroll_apps
            .iter()
            .filter(|a| categories.get(*a) == Some(&current_category))
            .count();
        v.set(Feature::ScrollsCurrentAppCategory, n as f64);
    }
    v.set(Feature::CountNotifications, f64::from(notifications));
    v.set(Feature::NotificationDiversity, notifying.len() as f64);
}

fn activity_features(v: &mut FeatureVector, w: &EventWindow<'_>) {
    let t = w.window_end;
    let samples: Vec<(Timestamp, ActivityState)> = w
        .events
        .iter()
        .filter_map(|e| match e.body {
            EventBody::ActivitySample { state } => Some((e.timestamp, state)),
            _ => None,
        })
        .collect();
    if !samples.is_empty() {
        let (mut stationary, mut mobile) = (0i64, 0i64);
        for (i, &(ts, state)) in samples.iter().enumerate() {
            let next = samples.get(i + 1).map_or(t, |s| s.0);
            let dwell = (next - ts).clamp(0, SAMPLE_CAP_MS);
            match state {
                ActivityState::Stationary => stationary += dwell,
                ActivityState::Mobile => mobile += dwell,
            }
        }
        v.set(Feature::DurationStationary, secs(stationary));
        v.set(Feature::DurationMobile, secs(mobile));
    }

    let lux: Vec<f64> = w
        .events
        .iter()
        .filter_map(|e| match e.body {
            EventBody::LightSample { lux } => Some(lux),
            _ => None,
        })
        .collect();
    if let Some((min, max, mean, std)) = summary(&lux) {
        v.set(Feature::MinLux, min);
        v.set(Feature::MaxLux, max);
        v.set(Feature::AvgLux, mean);
        v.set(Feature::StdLux, std);
    }
}

fn social_features(v: &mut FeatureVector, w: &EventWindow<'_>, offset: UtcOffset) {
    let mut sent = 0u32;
    let mut received = 0u32;
    let mut first_sent: Option<Timestamp> = None;
    let mut per_contact: HashMap<&str, u32> = HashMap::new();
    let mut scan_sizes: Vec<f64> = Vec::new();
    let mut device_scans: HashMap<&str, u32> = HashMap::new();

    for e in w.events {
        match &e.body {
            EventBody::MessageSent { contact } => {
                sent += 1;
                first_sent.get_or_insert(e.timestamp);
                *per_contact.entry(contact).or_default() += 1;
            }
            EventBody::MessageReceived { contact } => {
                received += 1;
                *per_contact.entry(contact).or_default() += 1;
            }
            EventBody::BluetoothScan { devices } => {
                let unique: BTreeSet<&str> = devices.iter().map(String::as_str).collect();
                scan_sizes.push(unique.len() as f64);
                for d in unique {
                    *device_scans.entry(d).or_default() += 1;
                }
            }
            _ => {}
        }
    }
    v.set(Feature::CountMessagesSent, f64::from(sent));
    v.set(Feature::CountMessagesReceived, f64::from(received));
    v.set_opt(
        Feature::TimeFirstSent,
        first_sent.map(|ts| offset.minutes_since_midnight(ts)),
    );
    v.set_opt(
        Feature::CountTopContactMessages,
        per_contact.values().max().map(|&c| f64::from(c)),
    );
    if let Some((_, _, mean, std)) = summary(&scan_sizes) {
        v.set(Feature::MeanDevicesPerScan, mean);
        v.set(Feature::StdDevicesPerScan, std);
        v.set(Feature::CountUniqueDevices, device_scans.len() as f64);
        v.set(
            Feature::CountScansMostFrequentDevice,
            f64::from(device_scans.values().copied().max().unwrap_or(0)),
        );
    }
}

fn location_features(v: &mut FeatureVector, w: &EventWindow<'_>, home: Option<Cell>) {
    let t = w.window_end;
    let fixes = location::fixes(w.events, t, SAMPLE_CAP_MS);
    if !fixes.is_empty() {
        let n = fixes.len() as f64;
        let mean_lat = fixes.iter().map(|f| f.lat).sum::<f64>() / n;
        let kx = METERS_PER_DEGREE * mean_lat.to_radians().cos();
        let xs: Vec<f64> = fixes.iter().map(|f| f.lon * kx).collect();
        let ys: Vec<f64> = fixes.iter().map(|f| f.lat * METERS_PER_DEGREE).collect();
        let var = |zs: &[f64]| {
            let m = zs.iter().sum::<f64>() / n;
            zs.iter().map(|z| (z - m).powi(2)).sum::<f64>() / n
        };
        v.set(Feature::LocationVariance, (var(&xs) + var(&ys)).ln_1p());

        let mut dwell: BTreeMap<Cell, i64> = BTreeMap::new();
        for f in &fixes {
            *dwell.entry(f.cell).or_default() += f.dwell_ms;
        }
        let mut clusters: Vec<i64> = dwell
            .values()
            .copied()
            .filter(|&d| d >= MIN_DWELL_MS)
            .collect();
        clusters.sort_unstable_by(|a, b| b.cmp(a));
        let top1 = clusters.first().copied().unwrap_or(0);
        let top2 = top1 + clusters.get(1).copied().unwrap_or(0);
        v.set(Feature::TimeAtTopOneLocation, secs(top1));
        v.set(Feature::TimeAtTopTwoLocation, secs(top2));
        let cluster_secs: Vec<f64> = clusters.iter().map(|&d| secs(d)).collect();
        v.set_opt(
            Feature::LocationEntropy,
            location::location_entropy(&cluster_secs),
        );
        if let Some(home) = home {
            v.set(
                Feature::TimeAtHome,
                secs(dwell.get(&home).copied().unwrap_or(0)),
            );
        }

        // Stays: maximal runs of consecutive fixes in one cell that is a place.
        let mut stays: Vec<f64> = Vec::new();
        let mut run: Option<(Cell, i64)> = None;
        for f in &fixes {
            match &mut run {
                Some((cell, len)) if *cell == f.cell => *len += f.dwell_ms,
                _ => {
                    if let Some((cell, len)) = run.take() {
                        if dwell[&cell] >= MIN_DWELL_MS {
                            stays.push(secs(len));
                        }
                    }
                    run = Some((f.cell, f.dwell_ms));
                }
            }
        }
        if let Some((cell, len)) = run {
            if dwell[&cell] >= MIN_DWELL_MS {
                stays.push(secs(len));
            }
        }
        if let Some((min, max, mean, _)) = summary(&stays) {
            v.set(Feature::MinLengthStayAtClusters, min);
            v.set(Feature::MaxLengthStayAtClusters, max);
            v.set(Feature::MeanLengthStayAtClusters, mean);
        }

        let mut distance = 0.0;
        let (mut moving, mut stationary) = (0i64, 0i64);
        for (i, f) in fixes.iter().enumerate() {
            match fixes.get(i + 1) {
                Some(next) => {
                    distance += haversine_m((f.lat, f.lon), (next.lat, next.lon));
                    if next.cell != f.cell {
                        moving += f.dwell_ms;
                    } else {
                        stationary += f.dwell_ms;
                    }
                }
                None => stationary += f.dwell_ms,
            }
        }
        v.set(Feature::TotalTravelDistance, distance);
        v.set(
            Feature::MovingToStaticRatio,
            secs(moving) / secs(stationary).max(1.0),
        );
    }

    let mut visible: Vec<f64> = Vec::new();
    let mut connected_scans = 0u32;
    let mut connected: BTreeSet<&str> = BTreeSet::new();
    for e in w.events {
        if let EventBody::WifiScan {
            visible_aps,
            connected_ap,
        } = &e.body
        {
            visible.push(f64::from(*visible_aps));
            if let Some(ap) = connected_ap {
                connected_scans += 1;
                connected.insert(ap);
            }
        }
    }
    if let Some((_, _, mean, std)) = summary(&visible) {
        v.set(Feature::MeanVisibleAps, mean);
        v.set(Feature::StdVisibleAps, std);
        v.set(Feature::CountConnectedScans, f64::from(connected_scans));
        v.set(Feature::CountUniqueConnectedAps, connected.len() as f64);
    }
}
