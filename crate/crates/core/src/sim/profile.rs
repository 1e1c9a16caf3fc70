//! Synthetic user profiles and simulation configuration.

use std::path::PathBuf;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::engine::EngineConfig;
use crate::learner::Hyperparams;
use crate::schedule::PhasePlan;
use crate::seeds::{derive_seed, Stream};

use super::SimError;

/// The shipped default profile.
pub const DEFAULT_PROFILE_TOML: &str = include_str!("../../fixtures/default_profile.toml");

pub const PROFILE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppProfile {
    pub app_id: String,
    pub category: String,
    pub monitored: bool,
    /// Mean sessions per day.
    pub sessions_per_day: f64,
    /// Log-normal session length.
    pub median_minutes: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Responses {
    pub label_response_p: f64,
    pub feedback_response_p: f64,
    /// Probability that a label or feedback answer contradicts the latent state.
    pub label_noise: f64,
}

/// Quit probability is `q0 + qa·[latent overuse] + qe·[card shown]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Receptivity {
    pub q0: f64,
    pub qa: f64,
    pub qe: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextRates {
    pub ui_events_per_minute: f64,
    pub notifications_per_day: f64,
    pub messages_per_day: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diurnal {
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Places {
    pub home: [f64; 2],
    pub work: [f64; 2],
    pub other: [f64; 2],
}

/// Logistic coefficients of the latent overuse process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    pub intercept: f64,
    pub night: f64,
    pub usage_per_hour: f64,
    pub home: f64,
    pub work: f64,
    pub transit: f64,
    pub session_per_10min: f64,
}

/// Relative phone-use intensity by place; only ratios matter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaceWeights {
    pub home: f64,
    pub work: f64,
    pub other: f64,
    pub transit: f64,
}

impl Default for PlaceWeights {
    fn default() -> Self {
        PlaceWeights {
            home: 1.0,
            work: 1.0,
            other: 1.0,
            transit: 1.0,
        }
    }
}

impl PlaceWeights {
    pub fn max(&self) -> f64 {
        self.home.max(self.work).max(self.other).max(self.transit)
    }

    fn validate(&self) -> Result<(), SimError> {
        let all = [self.home, self.work, self.other, self.transit];
        if all.iter().any(|w| !(*w >= 0.0)) || self.max() <= 0.0 {
            return Err(SimError::Config(
                "place weights must be non-negative and not all zero".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Drift {
    /// Intervention-phase day from which the drifted coefficients apply.
    pub intervention_day: u32,
    /// Where the phone gets used after the drift; unchanged when absent.
    #[serde(default)]
    pub usage_by_place: Option<PlaceWeights>,
    #[serde(flatten)]
    pub latent: Latent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub version: u32,
    pub utc_offset_minutes: i32,
    /// Log-normal spread of per-user rates and latent intercepts.
    pub jitter: f64,
    /// Standard deviation of per-user shifts to the latent context coefficients.
    #[serde(default)]
    pub latent_jitter: f64,
    pub responses: Responses,
    pub receptivity: Receptivity,
    pub context: ContextRates,
    pub diurnal: Diurnal,
    pub places: Places,
    #[serde(default)]
    pub usage_by_place: PlaceWeights,
    pub latent: Latent,
    pub drift: Option<Drift>,
    pub apps: Vec<AppProfile>,
}

fn prob(name: &str, p: f64) -> Result<(), SimError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(SimError::Config(format!("{name} = {p} is not a probability")))
    }
}

impl UserProfile {
    pub fn from_toml(text: &str) -> Result<UserProfile, SimError> {
        let p: UserProfile = toml::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn builtin() -> UserProfile {
        UserProfile::from_toml(DEFAULT_PROFILE_TOML).expect("shipped profile is valid")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.version != PROFILE_VERSION {
            return Err(SimError::Config(format!(
                "profile version {} (expected {PROFILE_VERSION})",
                self.version
            )));
        }
        let r = &self.receptivity;
        prob("q0", r.q0)?;
        prob("qa", r.qa)?;
        prob("qe", r.qe)?;
        prob("q0 + qa + qe", r.q0 + r.qa + r.qe)?;
        prob("label_response_p", self.responses.label_response_p)?;
        prob("feedback_response_p", self.responses.feedback_response_p)?;
        prob("label_noise", self.responses.label_noise)?;
        if self.diurnal.weights.len() != 24
            || self.diurnal.weights.iter().any(|w| !(*w >= 0.0))
            || self.diurnal.weights.iter().sum::<f64>() <= 0.0
        {
            return Err(SimError::Config(
                "diurnal weights need 24 non-negative values".into(),
            ));
        }
        self.usage_by_place.validate()?;
        if let Some(w) = self.drift.as_ref().and_then(|d| d.usage_by_place) {
            w.validate()?;
        }
        if !self.apps.iter().any(|a| a.monitored) {
            return Err(SimError::Config("no monitored app".into()));
        }
        for a in &self.apps {
            if !(a.sessions_per_day >= 0.0 && a.median_minutes > 0.0 && a.sigma >= 0.0) {
                return Err(SimError::Config(format!("bad rates for app {}", a.app_id)));
            }
        }
        if self.jitter < 0.0 || self.latent_jitter < 0.0 {
            return Err(SimError::Config("jitter must be non-negative".into()));
        }
        Ok(())
    }

    pub fn monitored_apps(&self) -> Vec<String> {
        self.apps
            .iter()
            .filter(|a| a.monitored)
            .map(|a| a.app_id.clone())
            .collect()
    }

    /// A per-user variant: rates scaled log-normally, latent intercepts
    /// shifted, places moved so users do not share cells.
    pub fn instantiate(&self, seed: u64, user_index: usize) -> UserProfile {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
            seed,
            Stream::Agent as u64,
            user_index as u64,
            u64::MAX,
        ]));
        let mut p = self.clone();
        if self.jitter > 0.0 {
            let n = Normal::new(0.0, self.jitter).expect("finite jitter");
            for a in &mut p.apps {
                a.sessions_per_day *= n.sample(&mut rng).exp();
                a.median_minutes *= n.sample(&mut rng).exp();
            }
            let shift = n.sample(&mut rng) * 2.0;
            p.latent.intercept += shift;
            if let Some(d) = &mut p.drift {
                d.latent.intercept += shift;
            }
        }
        if self.latent_jitter > 0.0 {
            let n = Normal::new(0.0, self.latent_jitter).expect("finite jitter");
            let shifts: Vec<f64> = (0..5).map(|_| n.sample(&mut rng)).collect();
            let apply = |l: &mut Latent| {
                l.night += shifts[0];
                l.home += shifts[1];
                l.work += shifts[2];
                l.transit += shifts[3];
                l.session_per_10min += shifts[4] * 0.5;
            };
            apply(&mut p.latent);
            if let Some(d) = &mut p.drift {
                apply(&mut d.latent);
            }
        }
        let dlat = 0.05 * user_index as f64;
        for place in [&mut p.places.home, &mut p.places.work, &mut p.places.other] {
            place[0] += dlat + rng.random_range(-0.002..0.002);
            place[1] += rng.random_range(-0.002..0.002);
        }
        p
    }
}

/// Phase lengths; the standard plan unless overridden.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Spans {
    pub modeling_days: u32,
    pub break_days: u32,
    pub baseline_days: u32,
    pub intervention_days: u32,
}

impl Default for Spans {
    fn default() -> Self {
        Spans {
            modeling_days: 14,
            break_days: 7,
            baseline_days: 7,
            intervention_days: 28,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputPaths {
    pub log: Option<PathBuf>,
    pub records: Option<PathBuf>,
    pub schedule: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_users: usize,
    pub study_start: NaiveDate,
    pub seed: u64,
    /// Overrides the profile's drift day (intervention-phase index).
    pub drift_day: Option<u32>,
    pub freeze_adaptive: bool,
    pub spans: Spans,
    pub hyperparams: Hyperparams,
    /// Profile file; the shipped default when absent.
    pub profile_path: Option<PathBuf>,
    #[serde(skip)]
    pub profile: Option<UserProfile>,
    /// Keep every log record in memory so the run can be persisted.
    pub keep_log: bool,
    pub output: OutputPaths,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_users: 8,
            study_start: NaiveDate::from_ymd_opt(2024, 3, 4).expect("date"),
            seed: 0,
            drift_day: None,
            freeze_adaptive: false,
            spans: Spans::default(),
            hyperparams: Hyperparams::default(),
            profile_path: None,
            profile: None,
            keep_log: false,
            output: OutputPaths::default(),
        }
    }
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<SimConfig, SimError> {
        Ok(toml::from_str(text)?)
    }

    pub fn plan(&self) -> PhasePlan {
        PhasePlan {
            study_start: self.study_start,
            modeling_days: self.spans.modeling_days,
            break_days: self.spans.break_days,
            baseline_days: self.spans.baseline_days,
            intervention_days: self.spans.intervention_days,
        }
    }

    /// The profile in effect: inline, then file, then the shipped default.
    pub fn resolve_profile(&self) -> Result<UserProfile, SimError> {
        if let Some(p) = &self.profile {
            p.validate()?;
            return Ok(p.clone());
        }
        if let Some(path) = &self.profile_path {
            let text = std::fs::read_to_string(path)?;
            return UserProfile::from_toml(&text);
        }
        Ok(UserProfile::builtin())
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_users < 4 {
            return Err(SimError::Config(
                "n_users must be at least 4 to fill the Latin square".into(),
            ));
        }
        self.plan().validate()?;
        self.hyperparams.validate()?;
        Ok(())
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            plan: self.plan(),
            seed: self.seed,
            hyperparams: self.hyperparams.clone(),
            freeze_adaptive: self.freeze_adaptive,
            ..EngineConfig::default()
        }
    }
}
