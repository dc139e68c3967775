//! The sequential scheduling environment.
//!
//! One step represents `step_minutes` (default 15) of simulated time. Each
//! step the agent either assigns one available nurse to one waiting patient
//! or takes the null action. A step proceeds in a fixed phase order:
//!
//! 1. score the action against the pre-step state (reward),
//! 2. apply the assignment (mark served, set busy horizon, add fatigue),
//! 3. advance the clock,
//! 4. decay fatigue of idle nurses,
//! 5. expire patients that waited past their `max_wait`,
//! 6. sample Poisson arrivals, dropping any beyond the queue capacity.
//!
//! The episode ends when the clock reaches the horizon.
//!
//! # Feature encoding layout
//!
//! `encode_features` produces fixed-size matrices with every value in
//! [0, 1]; padded slots are zeroed and masked out via the presence flags.
//!
//! Nurse features (`NURSE_FEATURES` = 18 per slot):
//!
//! | idx   | feature                                        |
//! |-------|------------------------------------------------|
//! | 0, 1  | region-relative latitude, longitude            |
//! | 2     | available now (not busy)                       |
//! | 3     | min(fatigue / 60, 1)                           |
//! | 4     | assignments served this episode / horizon      |
//! | 5     | (experience - 1) / 4                           |
//! | 6-8   | shift preference one-hot (day, evening, night) |
//! | 9     | full-time employment flag                      |
//! | 10-17 | skill set multi-hot, vocabulary order          |
//!
//! Patient features (`PATIENT_FEATURES` = 21 per slot):
//!
//! | idx   | feature                                         |
//! |-------|-------------------------------------------------|
//! | 0, 1  | region-relative latitude, longitude             |
//! | 2-4   | urgency one-hot (routine, urgent, emergency)    |
//! | 5-7   | care level one-hot (low, medium, high)          |
//! | 8     | min(minutes waited / max_wait, 1)               |
//! | 9     | (max_wait - 30) / 90                            |
//! | 10    | (service_duration - 20) / 70                    |
//! | 11    | prefers-continuity flag                         |
//! | 12    | already-assigned flag (0 for queued patients)   |
//! | 13-20 | requirements multi-hot, vocabulary order        |
//!
//! Edge features (`EDGE_FEATURES` = 3 per nurse-patient pair):
//! `[min(dist / d_max_km, 1), skill_match / 3, continuity eligibility]`,
//! where the continuity bit is 1 when this nurse already served this
//! patient id in this episode.

use serde::{Deserialize, Serialize};

use crate::domain::{
    generate_patient, sample_arrival_count, skill_match, ArrivalModel, CareLevel,
    ConstraintConfig, EmploymentType, Nurse, Patient, Roster, ShiftPreference,
    Urgency, SKILL_VOCABULARY,
};
use crate::geo::haversine_km;
use crate::numcore::Tensor;
use crate::rng::SplitMix64;

pub const NURSE_FEATURES: usize = 18;
pub const PATIENT_FEATURES: usize = 21;
pub const EDGE_FEATURES: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("validation error: {0}")]
    Validation(String),
    /// The caller tried to execute an action the feasibility mask forbids.
    #[error("infeasible action: {0}")]
    Infeasible(String),
}

/// Static environment parameters. Defaults follow the experimental setup:
/// 12 nurses, at most 8 waiting patients, 32-step episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub constraints: ConstraintConfig,
    pub arrivals: ArrivalModel,
    /// Nurses active per episode.
    pub max_nurses: usize,
    /// Waiting-queue capacity.
    pub max_patients: usize,
    /// Steps per episode.
    pub horizon: usize,
    /// Simulated minutes per step.
    pub step_minutes: f64,
    /// Assumed travel speed used to turn distance into busy time.
    pub travel_speed_kmh: f64,
    /// Fatigue recovered per step by idle nurses, in minutes.
    pub fatigue_decay_per_step: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            constraints: ConstraintConfig::default(),
            arrivals: ArrivalModel::default(),
            max_nurses: 12,
            max_patients: 8,
            horizon: 32,
            step_minutes: 15.0,
            travel_speed_kmh: 40.0,
            fatigue_decay_per_step: 5.0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        self.constraints
            .validate()
            .map_err(|e| EnvError::Validation(e.to_string()))?;
        self.arrivals
            .validate()
            .map_err(|e| EnvError::Validation(e.to_string()))?;
        for (name, v) in [
            ("max_nurses", self.max_nurses),
            ("max_patients", self.max_patients),
            ("horizon", self.horizon),
        ] {
            if v == 0 {
                return Err(EnvError::Validation(format!("{name} must be > 0")));
            }
        }
        for (name, v) in [
            ("step_minutes", self.step_minutes),
            ("travel_speed_kmh", self.travel_speed_kmh),
        ] {
            if !(v > 0.0) {
                return Err(EnvError::Validation(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.fatigue_decay_per_step < 0.0 {
            return Err(EnvError::Validation("fatigue_decay_per_step must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-episode nurse state layered over the static [`Nurse`] record.
#[derive(Debug, Clone, PartialEq)]
pub struct NurseRuntime {
    pub nurse: Nurse,
    /// Accumulated workload minutes; never negative.
    pub fatigue: f64,
    /// Step at which the nurse becomes free again, when busy.
    pub busy_until: Option<usize>,
    /// Patient ids served so far this episode.
    pub assignments_served: Vec<String>,
}

impl NurseRuntime {
    pub fn is_busy(&self, t: usize) -> bool {
        self.busy_until.is_some_and(|until| until > t)
    }

    pub fn has_served(&self, patient_id: &str) -> bool {
        self.assignments_served.iter().any(|id| id == patient_id)
    }
}

/// A waiting-queue entry.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRuntime {
    pub patient: Patient,
    /// Step at which the patient entered the queue.
    pub waiting_since: usize,
    pub assigned: bool,
    pub served_by: Option<String>,
}

impl PatientRuntime {
    /// Minutes spent waiting as of step `t`.
    pub fn minutes_waited(&self, t: usize, step_minutes: f64) -> f64 {
        (t.saturating_sub(self.waiting_since)) as f64 * step_minutes
    }
}

/// Full bipartite scheduling state at one step. Plain value: cloning it and
/// stepping the clone leaves the original untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub t: usize,
    pub nurses: Vec<NurseRuntime>,
    /// Waiting, unassigned patients only; at most `config.max_patients`.
    pub patients: Vec<PatientRuntime>,
    /// (step, nurse id, patient id) per executed assignment.
    pub history: Vec<(usize, String, String)>,
    pub rng: SplitMix64,
    pub config: EnvConfig,
    /// Patients enqueued so far (excludes arrivals dropped at capacity).
    pub arrivals_total: usize,
    pub assigned_total: usize,
    pub expired_total: usize,
    pub dropped_total: usize,
}

/// Boolean assignment-feasibility matrix A over (nurse, patient) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityMask {
    /// `mask[n][p]` — nurse `n` free, patient `p` waiting, within range.
    pub mask: Vec<Vec<bool>>,
    /// The null action is always available.
    pub null_allowed: bool,
}

impl FeasibilityMask {
    pub fn popcount(&self) -> usize {
        self.mask
            .iter()
            .map(|row| row.iter().filter(|&&b| b).count())
            .sum()
    }

    /// Flatten into the fixed action index space used by the policy:
    /// `max_nurses * max_patients` pair slots in nurse-major order, then
    /// the null action. Absent pairs are masked off.
    pub fn flat(&self, max_nurses: usize, max_patients: usize) -> Vec<bool> {
        let mut flat = vec![false; max_nurses * max_patients + 1];
        for (n, row) in self.mask.iter().enumerate() {
            for (p, &ok) in row.iter().enumerate() {
                flat[n * max_patients + p] = ok;
            }
        }
        *flat.last_mut().unwrap() = self.null_allowed;
        flat
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    Assign { nurse: usize, patient: usize },
    Null,
}

/// Aggregate step diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepInfo {
    /// Skill overlap of the executed assignment, 0 for null.
    pub skill_match: u32,
    /// Travel distance of the executed assignment in km.
    pub travel_km: f64,
    /// Patients expired during this transition.
    pub expired: usize,
    /// Patients enqueued during this transition.
    pub arrivals: usize,
    /// Arrivals dropped because the queue was full.
    pub dropped: usize,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub reward: f64,
    pub state: EnvState,
    pub done: bool,
    pub info: StepInfo,
}

/// One line of the episode trace export (JSON-lines).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    pub action: Action,
    pub reward: f64,
    pub mask_popcount: usize,
    pub expired: usize,
}

/// Fixed-size policy input. Padded slots are zero rows with presence false.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureEncoding {
    /// `max_nurses x NURSE_FEATURES`.
    pub nurse_features: Tensor,
    /// `max_patients x PATIENT_FEATURES`.
    pub patient_features: Tensor,
    /// `(max_nurses * max_patients) x EDGE_FEATURES`, nurse-major.
    pub edge_features: Tensor,
    pub nurse_present: Vec<bool>,
    pub patient_present: Vec<bool>,
}

impl EnvState {
    /// Start an episode: sample `config.max_nurses` nurses uniformly
    /// without replacement from the roster, empty queue, `t = 0`.
    pub fn reset(seed: u64, roster: &Roster, config: &EnvConfig) -> Result<EnvState, EnvError> {
        config.validate()?;
        roster
            .validate()
            .map_err(|e| EnvError::Validation(e.to_string()))?;
        if roster.len() < config.max_nurses {
            return Err(EnvError::Validation(format!(
                "roster has {} nurses, need at least {}",
                roster.len(),
                config.max_nurses
            )));
        }
        let mut rng = SplitMix64::new(seed);
        let chosen = rng.sample_indices(roster.len(), config.max_nurses);
        let nurses = chosen
            .into_iter()
            .map(|i| {
                let nurse = roster.nurses[i].clone();
                let fatigue = nurse.initial_fatigue;
                NurseRuntime {
                    nurse,
                    fatigue,
                    busy_until: None,
                    assignments_served: Vec::new(),
                }
            })
            .collect();
        Ok(EnvState {
            t: 0,
            nurses,
            patients: Vec::new(),
            history: Vec::new(),
            rng,
            config: config.clone(),
            arrivals_total: 0,
            assigned_total: 0,
            expired_total: 0,
            dropped_total: 0,
        })
    }

    /// Recompute the feasibility matrix from scratch: nurse free, patient
    /// waiting and unassigned, travel distance within `d_max_km`.
    pub fn feasibility_mask(&self) -> FeasibilityMask {
        let d_max = self.config.constraints.d_max_km;
        let mask = self
            .nurses
            .iter()
            .map(|n| {
                let free = !n.is_busy(self.t);
                self.patients
                    .iter()
                    .map(|p| {
                        free && !p.assigned
                            && haversine_km(&n.nurse.base_location, &p.patient.location) <= d_max
                    })
                    .collect()
            })
            .collect();
        FeasibilityMask {
            mask,
            null_allowed: true,
        }
    }

    /// All feasible actions: assign pairs in nurse-major order, then null.
    pub fn enumerate_actions(&self) -> Vec<Action> {
        let mask = self.feasibility_mask();
        let mut actions = Vec::with_capacity(mask.popcount() + 1);
        for (n, row) in mask.mask.iter().enumerate() {
            for (p, &ok) in row.iter().enumerate() {
                if ok {
                    actions.push(Action::Assign { nurse: n, patient: p });
                }
            }
        }
        actions.push(Action::Null);
        actions
    }

    /// Composite assignment reward:
    ///
    /// `2.0 + 5 * skill_match - 0.0005 * dist_km - 0.2 * min(fatigue/60, 1)
    ///  + continuity_bonus`
    ///
    /// The continuity bonus is `continuity_weight` when the patient prefers
    /// continuity and this nurse already served them this episode. The null
    /// action scores 0.
    pub fn reward(&self, action: &Action) -> Result<f64, EnvError> {
        let (n_idx, p_idx) = match action {
            Action::Null => return Ok(0.0),
            Action::Assign { nurse, patient } => (*nurse, *patient),
        };
        self.check_feasible(n_idx, p_idx)?;
        let nurse = &self.nurses[n_idx];
        let patient = &self.patients[p_idx];
        let matched = skill_match(&nurse.nurse, &patient.patient) as f64;
        let dist = haversine_km(&nurse.nurse.base_location, &patient.patient.location);
        let fatigue_penalty = 0.2 * (nurse.fatigue / 60.0).min(1.0);
        let continuity = if patient.patient.prefers_continuity
            && nurse.has_served(&patient.patient.id)
        {
            self.config.constraints.continuity_weight
        } else {
            0.0
        };
        Ok(2.0 + 5.0 * matched - 0.0005 * dist - fatigue_penalty + continuity)
    }

    fn check_feasible(&self, n_idx: usize, p_idx: usize) -> Result<(), EnvError> {
        if n_idx >= self.nurses.len() || p_idx >= self.patients.len() {
            return Err(EnvError::Infeasible(format!(
                "indices ({n_idx}, {p_idx}) out of bounds for {}x{} state",
                self.nurses.len(),
                self.patients.len()
            )));
        }
        let nurse = &self.nurses[n_idx];
        let patient = &self.patients[p_idx];
        if nurse.is_busy(self.t) {
            return Err(EnvError::Infeasible(format!(
                "nurse {} is busy at step {}",
                nurse.nurse.id, self.t
            )));
        }
        if patient.assigned {
            return Err(EnvError::Infeasible(format!(
                "patient {} already assigned",
                patient.patient.id
            )));
        }
        let dist = haversine_km(&nurse.nurse.base_location, &patient.patient.location);
        if dist > self.config.constraints.d_max_km {
            return Err(EnvError::Infeasible(format!(
                "pair ({}, {}) at {dist:.2} km exceeds d_max {}",
                nurse.nurse.id, patient.patient.id, self.config.constraints.d_max_km
            )));
        }
        Ok(())
    }

    /// Execute one action and advance the simulation by one step.
    pub fn step(&self, action: &Action) -> Result<StepOutcome, EnvError> {
        let reward = self.reward(action)?;
        let mut next = self.clone();
        let mut info = StepInfo::default();

        if let Action::Assign { nurse, patient } = *action {
            let entry = next.patients.remove(patient);
            let runtime = &mut next.nurses[nurse];
            let dist = haversine_km(&runtime.nurse.base_location, &entry.patient.location);
            let travel_minutes = dist / next.config.travel_speed_kmh * 60.0;
            let busy_steps = ((entry.patient.service_duration + travel_minutes)
                / next.config.step_minutes)
                .ceil() as usize;
            runtime.busy_until = Some(next.t + busy_steps.max(1));
            runtime.fatigue += entry.patient.service_duration;
            runtime.assignments_served.push(entry.patient.id.clone());
            next.history
                .push((next.t, runtime.nurse.id.clone(), entry.patient.id.clone()));
            next.assigned_total += 1;
            info.skill_match = skill_match(&runtime.nurse, &entry.patient);
            info.travel_km = dist;
        }

        next.t += 1;
        let t = next.t;

        // Idle nurses recover.
        let decay = next.config.fatigue_decay_per_step;
        for n in &mut next.nurses {
            if !n.is_busy(t) {
                n.fatigue = (n.fatigue - decay).max(0.0);
            }
        }

        // Expire patients that waited too long.
        let step_minutes = next.config.step_minutes;
        let before = next.patients.len();
        next.patients
            .retain(|p| p.minutes_waited(t, step_minutes) <= p.patient.max_wait);
        info.expired = before - next.patients.len();
        next.expired_total += info.expired;

        // New arrivals, truncated at queue capacity.
        let count = sample_arrival_count(&mut next.rng, next.config.arrivals.lambda);
        for _ in 0..count {
            let patient = generate_patient(&mut next.rng, &next.config.arrivals, t);
            if next.patients.len() < next.config.max_patients {
                next.patients.push(PatientRuntime {
                    patient,
                    waiting_since: t,
                    assigned: false,
                    served_by: None,
                });
                next.arrivals_total += 1;
                info.arrivals += 1;
            } else {
                next.dropped_total += 1;
                info.dropped += 1;
            }
        }

        let done = t >= next.config.horizon;
        Ok(StepOutcome {
            reward,
            state: next,
            done,
            info,
        })
    }

    /// Encode the state into fixed-size, [0, 1]-normalized feature
    /// matrices. See the module docs for the exact layout.
    pub fn encode_features(&self) -> FeatureEncoding {
        let cfg = &self.config;
        let region = &cfg.arrivals.region;
        let mut nurse_features = Tensor::zeros(&[cfg.max_nurses, NURSE_FEATURES]);
        let mut nurse_present = vec![false; cfg.max_nurses];
        for (i, n) in self.nurses.iter().enumerate().take(cfg.max_nurses) {
            nurse_present[i] = true;
            let (lat, lon) = region.normalize(&n.nurse.base_location);
            let row = nurse_features.row_mut(i);
            row[0] = lat;
            row[1] = lon;
            row[2] = if n.is_busy(self.t) { 0.0 } else { 1.0 };
            row[3] = (n.fatigue / 60.0).min(1.0);
            row[4] = (n.assignments_served.len() as f64 / cfg.horizon as f64).min(1.0);
            row[5] = (n.nurse.experience_level as f64 - 1.0) / 4.0;
            row[6 + match n.nurse.shift_preference {
                ShiftPreference::Day => 0,
                ShiftPreference::Evening => 1,
                ShiftPreference::Night => 2,
            }] = 1.0;
            row[9] = match n.nurse.employment_type {
                EmploymentType::FullTime => 1.0,
                EmploymentType::PartTime => 0.0,
            };
            for (k, skill) in SKILL_VOCABULARY.iter().enumerate() {
                if n.nurse.skills.contains(*skill) {
                    row[10 + k] = 1.0;
                }
            }
        }

        let mut patient_features = Tensor::zeros(&[cfg.max_patients, PATIENT_FEATURES]);
        let mut patient_present = vec![false; cfg.max_patients];
        for (j, p) in self.patients.iter().enumerate().take(cfg.max_patients) {
            patient_present[j] = true;
            let (lat, lon) = region.normalize(&p.patient.location);
            let row = patient_features.row_mut(j);
            row[0] = lat;
            row[1] = lon;
            row[2 + match p.patient.urgency {
                Urgency::Routine => 0,
                Urgency::Urgent => 1,
                Urgency::Emergency => 2,
            }] = 1.0;
            row[5 + match p.patient.care_level {
                CareLevel::Low => 0,
                CareLevel::Medium => 1,
                CareLevel::High => 2,
            }] = 1.0;
            row[8] = (p.minutes_waited(self.t, cfg.step_minutes) / p.patient.max_wait).min(1.0);
            row[9] = (p.patient.max_wait - 30.0) / 90.0;
            row[10] = (p.patient.service_duration - 20.0) / 70.0;
            row[11] = if p.patient.prefers_continuity { 1.0 } else { 0.0 };
            row[12] = if p.assigned { 1.0 } else { 0.0 };
            for (k, skill) in SKILL_VOCABULARY.iter().enumerate() {
                if p.patient.requirements.contains(*skill) {
                    row[13 + k] = 1.0;
                }
            }
        }

        let mut edge_features =
            Tensor::zeros(&[cfg.max_nurses * cfg.max_patients, EDGE_FEATURES]);
        for (i, n) in self.nurses.iter().enumerate().take(cfg.max_nurses) {
            for (j, p) in self.patients.iter().enumerate().take(cfg.max_patients) {
                let dist = haversine_km(&n.nurse.base_location, &p.patient.location);
                let row = edge_features.row_mut(i * cfg.max_patients + j);
                row[0] = (dist / cfg.constraints.d_max_km).min(1.0);
                row[1] = skill_match(&n.nurse, &p.patient) as f64 / 3.0;
                row[2] = if n.has_served(&p.patient.id) { 1.0 } else { 0.0 };
            }
        }

        FeatureEncoding {
            nurse_features,
            patient_features,
            edge_features,
            nurse_present,
            patient_present,
        }
    }
}
