//! Per-user, per-arm endpoints: accuracy, receptivity, intervention
//! frequency, usage relative to the baseline week, and block time series.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{EventBody, EventLog, UserId, UserMeta};
use crate::policy::InterventionRecord;
use crate::schedule::{Arm, ArmSchedule, Phase, PhasePlan};
use crate::time::MINUTE_MS;

/// Intervention days per time-series block.
pub const BLOCK_DAYS: u32 = 4;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("user `{0}` has no baseline-week usage")]
    EmptyBaseline(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// A proportion that is undefined when nothing was counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rate {
    pub hits: usize,
    pub total: usize,
}

impl Rate {
    pub fn value(self) -> Option<f64> {
        (self.total > 0).then(|| self.hits as f64 / self.total as f64)
    }
}

/// Agreeing answers over all answered feedback questions.
pub fn intervention_accuracy<'a>(records: impl IntoIterator<Item = &'a InterventionRecord>) -> Rate {
    let mut r = Rate::default();
    for rec in records {
        if let Some(agree) = rec.feedback {
            r.total += 1;
            r.hits += usize::from(agree);
        }
    }
    r
}

/// Receptive reactions over all delivered interventions.
pub fn receptivity<'a>(records: impl IntoIterator<Item = &'a InterventionRecord>) -> Rate {
    let mut r = Rate::default();
    for rec in records {
        r.total += 1;
        r.hits += usize::from(rec.is_receptive());
    }
    r
}

/// Why a user was left out of a normalized aggregate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    ControlUndefined,
    ControlZero,
}

/// Divides every arm's value by the Control value.
pub fn normalize_against_control(
    values: &BTreeMap<Arm, Option<f64>>,
) -> Result<BTreeMap<Arm, Option<f64>>, ExclusionReason> {
    let control = values
        .get(&Arm::Control)
        .copied()
        .flatten()
        .ok_or(ExclusionReason::ControlUndefined)?;
    if control <= 0.0 {
        return Err(ExclusionReason::ControlZero);
    }
    Ok(values
        .iter()
        .map(|(&arm, v)| {
            let n = if arm == Arm::Control {
                Some(1.0)
            } else {
                v.map(|v| v / control)
            };
            (arm, n)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserArmMetrics {
    pub user_id: UserId,
    pub arm: Arm,
    pub interventions: usize,
    pub receptive: usize,
    pub feedback_answered: usize,
    pub agree: usize,
    pub accuracy: Option<f64>,
    pub receptivity: Option<f64>,
    pub arm_days: u32,
    pub daily_interventions: f64,
    pub normalized_accuracy: Option<f64>,
    pub normalized_receptivity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub user_id: UserId,
    pub metric: String,
    pub reason: ExclusionReason,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub mean_accuracy: Option<f64>,
    pub mean_receptivity: Option<f64>,
    pub mean_normalized_accuracy: Option<f64>,
    pub mean_normalized_receptivity: Option<f64>,
    pub users_accuracy: usize,
    pub users_receptivity: usize,
    pub mean_daily_interventions: f64,
    pub interventions: usize,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

fn records_by_user_arm(
    records: &[InterventionRecord],
) -> BTreeMap<(UserId, Arm), Vec<&InterventionRecord>> {
    let mut out: BTreeMap<(UserId, Arm), Vec<&InterventionRecord>> = BTreeMap::new();
    for r in records {
        out.entry((r.user_id.clone(), r.arm)).or_default().push(r);
    }
    out
}

/// Per-user, per-arm table plus the users excluded from each normalization.
pub fn arm_metrics(
    records: &[InterventionRecord],
    users: &[UserMeta],
    plan: &PhasePlan,
) -> (Vec<UserArmMetrics>, Vec<Exclusion>) {
    let schedule = ArmSchedule::default();
    let grouped = records_by_user_arm(records);
    let first = plan.first_day_of(Phase::Intervention);
    let mut rows = Vec::new();
    let mut exclusions = Vec::new();
    for meta in users {
        let mut user_rows: Vec<UserArmMetrics> = Arm::ALL
            .iter()
            .map(|&arm| {
                let recs = grouped
                    .get(&(meta.user_id.clone(), arm))
                    .map(Vec::as_slice)
                    .unwrap_or(&[]);
                let acc = intervention_accuracy(recs.iter().copied());
                let rec = receptivity(recs.iter().copied());
                let arm_days = (first..first + plan.intervention_days)
                    .filter(|&d| schedule.arm_on_day(meta.user_index, plan, d) == Some(arm))
                    .count() as u32;
                UserArmMetrics {
                    user_id: meta.user_id.clone(),
                    arm,
                    interventions: rec.total,
                    receptive: rec.hits,
                    feedback_answered: acc.total,
                    agree: acc.hits,
                    accuracy: acc.value(),
                    receptivity: rec.value(),
                    arm_days,
                    daily_interventions: if arm_days > 0 {
                        rec.total as f64 / f64::from(arm_days)
                    } else {
                        0.0
                    },
                    normalized_accuracy: None,
                    normalized_receptivity: None,
                }
            })
            .collect();
        let acc: BTreeMap<Arm, Option<f64>> = user_rows.iter().map(|r| (r.arm, r.accuracy)).collect();
        match normalize_against_control(&acc) {
            Ok(n) => user_rows
                .iter_mut()
                .for_each(|r| r.normalized_accuracy = n[&r.arm]),
            Err(reason) => exclusions.push(Exclusion {
                user_id: meta.user_id.clone(),
                metric: "accuracy".into(),
                reason,
            }),
        }
        let rec: BTreeMap<Arm, Option<f64>> =
            user_rows.iter().map(|r| (r.arm, r.receptivity)).collect();
        match normalize_against_control(&rec) {
            Ok(n) => user_rows
                .iter_mut()
                .for_each(|r| r.normalized_receptivity = n[&r.arm]),
            Err(reason) => exclusions.push(Exclusion {
                user_id: meta.user_id.clone(),
                metric: "receptivity".into(),
                reason,
            }),
        }
        rows.extend(user_rows);
    }
    (rows, exclusions)
}

/// Means over users of each arm's raw and normalized values.
pub fn summarize(rows: &[UserArmMetrics]) -> Vec<ArmSummary> {
    Arm::ALL
        .iter()
        .map(|&arm| {
            let r: Vec<&UserArmMetrics> = rows.iter().filter(|r| r.arm == arm).collect();
            let na: Vec<f64> = r.iter().filter_map(|r| r.normalized_accuracy).collect();
            let nr: Vec<f64> = r.iter().filter_map(|r| r.normalized_receptivity).collect();
            ArmSummary {
                arm,
                mean_accuracy: mean(r.iter().filter_map(|r| r.accuracy)),
                mean_receptivity: mean(r.iter().filter_map(|r| r.receptivity)),
                users_accuracy: na.len(),
                users_receptivity: nr.len(),
                mean_normalized_accuracy: mean(na),
                mean_normalized_receptivity: mean(nr),
                mean_daily_interventions: mean(r.iter().map(|r| r.daily_interventions)).unwrap_or(0.0),
                interventions: r.iter().map(|r| r.interventions).sum(),
            }
        })
        .collect()
}

/// Interventions per user per intervention-phase study day.
pub fn daily_counts(
    records: &[InterventionRecord],
    users: &[UserMeta],
    plan: &PhasePlan,
) -> BTreeMap<(UserId, u32), usize> {
    let offsets: BTreeMap<&UserId, _> = users.iter().map(|m| (&m.user_id, m.utc_offset)).collect();
    let mut out = BTreeMap::new();
    for r in records {
        let Some(offset) = offsets.get(&r.user_id) else {
            continue;
        };
        let Ok(day) = plan.study_day(offset.local_date(r.ts)) else {
            continue;
        };
        if plan.phase_of_day(day) == Phase::Intervention {
            *out.entry((r.user_id.clone(), day)).or_insert(0) += 1;
        }
    }
    out
}

/// Monitored-app visits and minutes per local study day.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DayUsage {
    pub visits: u32,
    pub minutes: f64,
}

/// Sessions count toward the day they started on.
pub fn daily_usage(log: &EventLog, meta: &UserMeta, plan: &PhasePlan) -> BTreeMap<u32, DayUsage> {
    let monitored: BTreeSet<&str> = meta.monitored_apps.iter().map(String::as_str).collect();
    let mut out: BTreeMap<u32, DayUsage> = BTreeMap::new();
    let mut open: Option<(u32, i64)> = None;
    for e in log.events(&meta.user_id) {
        match &e.body {
            EventBody::AppEnter { app_id, .. } => {
                open = None;
                if !monitored.contains(app_id.as_str()) {
                    continue;
                }
                let Ok(day) = plan.study_day(meta.utc_offset.local_date(e.timestamp)) else {
                    continue;
                };
                out.entry(day).or_default().visits += 1;
                open = Some((day, e.timestamp));
            }
            EventBody::AppExit { .. } => {
                if let Some((day, start)) = open.take() {
                    out.entry(day).or_default().minutes +=
                        (e.timestamp - start) as f64 / MINUTE_MS as f64;
                }
            }
            _ => {}
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UsageRatio {
    pub user_id: UserId,
    pub arm: Arm,
    pub baseline_visits: f64,
    pub baseline_minutes: f64,
    pub arm_visits: f64,
    pub arm_minutes: f64,
    pub visit_ratio: f64,
    pub duration_ratio: f64,
}

/// Mean daily usage on each arm's days divided by the baseline-week mean.
pub fn usage_ratios(
    log: &EventLog,
    users: &[UserMeta],
    plan: &PhasePlan,
) -> Result<Vec<UsageRatio>, MetricsError> {
    let schedule = ArmSchedule::default();
    let base = plan.first_day_of(Phase::Baseline);
    let first = plan.first_day_of(Phase::Intervention);
    let mut out = Vec::new();
    for meta in users {
        let days = daily_usage(log, meta, plan);
        let get = |d: u32| days.get(&d).copied().unwrap_or_default();
        let baseline: Vec<DayUsage> = (base..base + plan.baseline_days).map(get).collect();
        let bv = mean(baseline.iter().map(|d| f64::from(d.visits))).unwrap_or(0.0);
        let bm = mean(baseline.iter().map(|d| d.minutes)).unwrap_or(0.0);
        if bv <= 0.0 || bm <= 0.0 {
            return Err(MetricsError::EmptyBaseline(meta.user_id.to_string()));
        }
        for &arm in &Arm::ALL {
            let arm_days: Vec<DayUsage> = (first..first + plan.intervention_days)
                .filter(|&d| schedule.arm_on_day(meta.user_index, plan, d) == Some(arm))
                .map(get)
                .collect();
            let av = mean(arm_days.iter().map(|d| f64::from(d.visits))).unwrap_or(0.0);
            let am = mean(arm_days.iter().map(|d| d.minutes)).unwrap_or(0.0);
            out.push(UsageRatio {
                user_id: meta.user_id.clone(),
                arm,
                baseline_visits: bv,
                baseline_minutes: bm,
                arm_visits: av,
                arm_minutes: am,
                visit_ratio: av / bv,
                duration_ratio: am / bm,
            });
        }
    }
    Ok(out)
}

/// Ordinary least-squares slope of `ys` against `xs`.
pub fn least_squares_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len().min(ys.len());
    if n < 2 {
        return None;
    }
    let mx = xs[..n].iter().sum::<f64>() / n as f64;
    let my = ys[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for i in 0..n {
        sxy += (xs[i] - mx) * (ys[i] - my);
        sxx += (xs[i] - mx) * (xs[i] - mx);
    }
    (sxx > 0.0).then(|| sxy / sxx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockPoint {
    /// 1-based block number.
    pub block: u32,
    pub arm: Arm,
    pub mean_normalized_receptivity: Option<f64>,
    pub users: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSeries {
    pub points: Vec<BlockPoint>,
    /// Slope over the blocks with a defined value.
    pub slopes: BTreeMap<Arm, Option<f64>>,
}

/// Receptivity per 4-day block and arm, normalized by each user's overall
/// Control receptivity and averaged over users.
pub fn block_series(
    records: &[InterventionRecord],
    users: &[UserMeta],
    plan: &PhasePlan,
) -> BlockSeries {
    let n_blocks = plan.intervention_days / BLOCK_DAYS;
    let mut per_user: BTreeMap<(UserId, u32, Arm), Rate> = BTreeMap::new();
    let mut control: BTreeMap<UserId, Rate> = BTreeMap::new();
    let offsets: BTreeMap<&UserId, _> = users.iter().map(|m| (&m.user_id, m.utc_offset)).collect();
    for r in records {
        let Some(offset) = offsets.get(&r.user_id) else {
            continue;
        };
        let Some(iday) = plan
            .study_day(offset.local_date(r.ts))
            .ok()
            .and_then(|d| plan.intervention_day(d))
        else {
            continue;
        };
        let block = iday / BLOCK_DAYS + 1;
        if block > n_blocks {
            continue;
        }
        let e = per_user.entry((r.user_id.clone(), block, r.arm)).or_default();
        e.total += 1;
        e.hits += usize::from(r.is_receptive());
        if r.arm == Arm::Control {
            let c = control.entry(r.user_id.clone()).or_default();
            c.total += 1;
            c.hits += usize::from(r.is_receptive());
        }
    }
    let mut points = Vec::new();
    let mut slopes = BTreeMap::new();
    for &arm in &Arm::ALL {
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for block in 1..=n_blocks {
            let vals: Vec<f64> = users
                .iter()
                .filter_map(|m| {
                    let c = control.get(&m.user_id)?.value().filter(|c| *c > 0.0)?;
                    let v = per_user.get(&(m.user_id.clone(), block, arm))?.value()?;
                    Some(v / c)
                })
                .collect();
            let m = mean(vals.iter().copied());
            if let Some(m) = m {
                xs.push(f64::from(block));
                ys.push(m);
            }
            points.push(BlockPoint {
                block,
                arm,
                mean_normalized_receptivity: m,
                users: vals.len(),
            });
        }
        slopes.insert(arm, least_squares_slope(&xs, &ys));
    }
    BlockSeries { points, slopes }
}

/// Everything the `report` command emits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub users: Vec<UserArmMetrics>,
    pub exclusions: Vec<Exclusion>,
    pub arms: Vec<ArmSummary>,
    pub blocks: BlockSeries,
    pub usage: Vec<UsageRatio>,
    pub usage_error: Option<String>,
}

impl Report {
    pub fn build(
        records: &[InterventionRecord],
        log: &EventLog,
        users: &[UserMeta],
        plan: &PhasePlan,
    ) -> Report {
        let (rows, exclusions) = arm_metrics(records, users, plan);
        let arms = summarize(&rows);
        let (usage, usage_error) = match usage_ratios(log, users, plan) {
            Ok(u) => (u, None),
            Err(e) => (Vec::new(), Some(e.to_string())),
        };
        Report {
            users: rows,
            exclusions,
            arms,
            blocks: block_series(records, users, plan),
            usage,
            usage_error,
        }
    }

    pub fn summary(&self, arm: Arm) -> &ArmSummary {
        &self.arms[arm.index()]
    }

    /// Writes `per_user.csv`, `per_arm.csv`, `per_block.csv`, `usage.csv`
    /// and `summary.json` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<(), MetricsError> {
        std::fs::create_dir_all(dir)?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();

        let mut w = csv::Writer::from_path(dir.join("per_user.csv"))?;
        w.write_record([
            "user_id",
            "arm",
            "interventions",
            "receptive",
            "feedback_answered",
            "agree",
            "accuracy",
            "receptivity",
            "arm_days",
            "daily_interventions",
            "normalized_accuracy",
            "normalized_receptivity",
        ])?;
        for r in &self.users {
            w.write_record([
                r.user_id.to_string(),
                r.arm.as_str().to_string(),
                r.interventions.to_string(),
                r.receptive.to_string(),
                r.feedback_answered.to_string(),
                r.agree.to_string(),
                opt(r.accuracy),
                opt(r.receptivity),
                r.arm_days.to_string(),
                r.daily_interventions.to_string(),
                opt(r.normalized_accuracy),
                opt(r.normalized_receptivity),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("per_arm.csv"))?;
        w.write_record([
            "arm",
            "interventions",
            "mean_daily_interventions",
            "mean_accuracy",
            "mean_receptivity",
            "mean_normalized_accuracy",
            "mean_normalized_receptivity",
            "users_accuracy",
            "users_receptivity",
        ])?;
        for a in &self.arms {
            w.write_record([
                a.arm.as_str().to_string(),
                a.interventions.to_string(),
                a.mean_daily_interventions.to_string(),
                opt(a.mean_accuracy),
                opt(a.mean_receptivity),
                opt(a.mean_normalized_accuracy),
                opt(a.mean_normalized_receptivity),
                a.users_accuracy.to_string(),
                a.users_receptivity.to_string(),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("per_block.csv"))?;
        w.write_record(["block", "arm", "mean_normalized_receptivity", "users"])?;
        for p in &self.blocks.points {
            w.write_record([
                p.block.to_string(),
                p.arm.as_str().to_string(),
                opt(p.mean_normalized_receptivity),
                p.users.to_string(),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("usage.csv"))?;
        w.write_record([
            "user_id",
            "arm",
            "baseline_visits",
            "baseline_minutes",
            "arm_visits",
            "arm_minutes",
            "visit_ratio",
            "duration_ratio",
        ])?;
        for u in &self.usage {
            w.write_record([
                u.user_id.to_string(),
                u.arm.as_str().to_string(),
                u.baseline_visits.to_string(),
                u.baseline_minutes.to_string(),
                u.arm_visits.to_string(),
                u.arm_minutes.to_string(),
                u.visit_ratio.to_string(),
                u.duration_ratio.to_string(),
            ])?;
        }
        w.flush()?;

        let mut f = std::fs::File::create(dir.join("summary.json"))?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }
}
