//! Study phases, the Latin-square arm rotation and schedule export.

use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::UserId;
use crate::time::{day_of_date, date_from_day};

/// The four intervention types.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Control,
    Personalized,
    AdaptiveNoExp,
    AdaptiveExp,
}

impl Arm {
    pub const ALL: [Arm; 4] = [
        Arm::Control,
        Arm::Personalized,
        Arm::AdaptiveNoExp,
        Arm::AdaptiveExp,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Control => "control",
            Arm::Personalized => "personalized",
            Arm::AdaptiveNoExp => "adaptive_no_exp",
            Arm::AdaptiveExp => "adaptive_exp",
        }
    }

    pub fn is_adaptive(self) -> bool {
        matches!(self, Arm::AdaptiveNoExp | Arm::AdaptiveExp)
    }

    pub fn shows_explanation(self) -> bool {
        self == Arm::AdaptiveExp
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Modeling,
    Break,
    Baseline,
    Intervention,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Modeling => "modeling",
            Phase::Break => "break",
            Phase::Baseline => "baseline",
            Phase::Intervention => "intervention",
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("{date} is outside the study ({start} to {end})")]
    OutsideStudy {
        date: NaiveDate,
        start: NaiveDate,
        end: NaiveDate,
    },
    #[error("only a 4x4 Latin square is supported (got n={0})")]
    UnsupportedSquare(usize),
    #[error("invalid phase plan: {0}")]
    InvalidPlan(String),
}

/// Contiguous study phases starting at `study_start` (a local date).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhasePlan {
    pub study_start: NaiveDate,
    pub modeling_days: u32,
    pub break_days: u32,
    pub baseline_days: u32,
    pub intervention_days: u32,
}

impl PhasePlan {
    /// The standard plan: 14 modeling, 7 break, 7 baseline, 28 intervention days.
    pub fn standard(study_start: NaiveDate) -> PhasePlan {
        PhasePlan {
            study_start,
            modeling_days: 14,
            break_days: 7,
            baseline_days: 7,
            intervention_days: 28,
        }
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        if self.modeling_days == 0 || self.baseline_days == 0 || self.intervention_days == 0 {
            return Err(ScheduleError::InvalidPlan(
                "modeling, baseline and intervention phases must be non-empty".into(),
            ));
        }
        if self.intervention_days % 4 != 0 {
            return Err(ScheduleError::InvalidPlan(
                "intervention days must be a multiple of 4".into(),
            ));
        }
        Ok(())
    }

    pub fn total_days(&self) -> u32 {
        self.modeling_days + self.break_days + self.baseline_days + self.intervention_days
    }

    pub fn end_date(&self) -> NaiveDate {
        date_from_day(day_of_date(self.study_start) + i64::from(self.total_days()) - 1)
    }

    /// Days since `study_start`, or an error outside the study.
    pub fn study_day(&self, date: NaiveDate) -> Result<u32, ScheduleError> {
        let d = day_of_date(date) - day_of_date(self.study_start);
        if d < 0 || d >= i64::from(self.total_days()) {
            return Err(ScheduleError::OutsideStudy {
                date,
                start: self.study_start,
                end: self.end_date(),
            });
        }
        Ok(d as u32)
    }

    pub fn date_of(&self, study_day: u32) -> NaiveDate {
        date_from_day(day_of_date(self.study_start) + i64::from(study_day))
    }

    pub fn phase_of_day(&self, study_day: u32) -> Phase {
        let m = self.modeling_days;
        let b = m + self.break_days;
        let base = b + self.baseline_days;
        if study_day < m {
            Phase::Modeling
        } else if study_day < b {
            Phase::Break
        } else if study_day < base {
            Phase::Baseline
        } else {
            Phase::Intervention
        }
    }

    pub fn phase_of(&self, date: NaiveDate) -> Result<Phase, ScheduleError> {
        Ok(self.phase_of_day(self.study_day(date)?))
    }

    pub fn first_day_of(&self, phase: Phase) -> u32 {
        match phase {
            Phase::Modeling => 0,
            Phase::Break => self.modeling_days,
            Phase::Baseline => self.modeling_days + self.break_days,
            Phase::Intervention => self.modeling_days + self.break_days + self.baseline_days,
        }
    }

    pub fn days_in(&self, phase: Phase) -> u32 {
        match phase {
            Phase::Modeling => self.modeling_days,
            Phase::Break => self.break_days,
            Phase::Baseline => self.baseline_days,
            Phase::Intervention => self.intervention_days,
        }
    }

    /// Index within the intervention phase, if `study_day` falls in it.
    pub fn intervention_day(&self, study_day: u32) -> Option<u32> {
        let first = self.first_day_of(Phase::Intervention);
        (study_day >= first && study_day < self.total_days()).then(|| study_day - first)
    }
}

/// The balanced 4x4 Latin square over A=Control, B=Personalized,
/// C=AdaptiveNoExp, D=AdaptiveExp.
pub fn latin_square(n: usize) -> Result<[[Arm; 4]; 4], ScheduleError> {
    if n != 4 {
        return Err(ScheduleError::UnsupportedSquare(n));
    }
    use Arm::{AdaptiveExp as D, AdaptiveNoExp as C, Control as A, Personalized as B};
    Ok([[A, B, D, C], [B, C, A, D], [C, D, B, A], [D, A, C, B]])
}

/// Per-user Latin rows, assigned round-robin by enrollment index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArmSchedule {
    square: [[Arm; 4]; 4],
}

impl Default for ArmSchedule {
    fn default() -> Self {
        ArmSchedule {
            square: latin_square(4).expect("n = 4"),
        }
    }
}

impl ArmSchedule {
    pub fn row_of(&self, user_index: usize) -> usize {
        user_index % 4
    }

    pub fn row(&self, user_index: usize) -> [Arm; 4] {
        self.square[self.row_of(user_index)]
    }

    /// Arm on a study day; `None` outside the intervention phase.
    pub fn arm_on_day(&self, user_index: usize, plan: &PhasePlan, study_day: u32) -> Option<Arm> {
        plan.intervention_day(study_day)
            .map(|d| self.row(user_index)[d as usize % 4])
    }

    pub fn arm_for(
        &self,
        user_index: usize,
        date: NaiveDate,
        plan: &PhasePlan,
    ) -> Result<Option<Arm>, ScheduleError> {
        let day = plan.study_day(date)?;
        Ok(self.arm_on_day(user_index, plan, day))
    }

    /// CSV with columns `user_id,date,study_day,phase,arm` (arm empty outside
    /// the intervention phase).
    pub fn export_csv(&self, plan: &PhasePlan, users: &[(UserId, usize)]) -> String {
        let mut out = String::from("user_id,date,study_day,phase,arm\n");
        for (user, index) in users {
            for day in 0..plan.total_days() {
                let arm = self
                    .arm_on_day(*index, plan, day)
                    .map(Arm::as_str)
                    .unwrap_or("");
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    user,
                    plan.date_of(day),
                    day,
                    plan.phase_of_day(day).as_str(),
                    arm
                ));
            }
        }
        out
    }
}
