//! Domain entities, JSON dataset ingestion, and seeded synthetic generation
//! of rosters and patient streams.
//!
//! The on-disk formats are:
//!
//! * `nurses.json` — `{ "nurses": [ { "id", "lat", "lon", "skills",
//!   "experience", "shift", "employment", "max_weekly_hours",
//!   "initial_fatigue" } ] }`
//! * `constraints.json` — `{ "d_max_km", "max_shift_minutes",
//!   "continuity_weight" }`
//!
//! All generators are pure functions of `(seed, config)` via [`SplitMix64`],
//! so datasets are bitwise reproducible.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::rng::SplitMix64;

#[derive(Debug, thiserror::Error)]
pub enum DomainError {
    /// The file did not match the expected JSON schema.
    #[error("schema error: {0}")]
    Schema(String),
    /// The data parsed but violated an invariant.
    #[error("validation error: {0}")]
    Validation(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

// ---------------------------------------------------------------------------
// Skills
// ---------------------------------------------------------------------------

/// The fixed care-skill vocabulary. Both nurse skills and patient
/// requirements are subsets of these eight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Skill {
    #[serde(rename = "wound care")]
    WoundCare,
    #[serde(rename = "medication")]
    Medication,
    #[serde(rename = "elderly care")]
    ElderlyCare,
    #[serde(rename = "mobility assistance")]
    MobilityAssistance,
    #[serde(rename = "ICU")]
    Icu,
    #[serde(rename = "emergency")]
    Emergency,
    #[serde(rename = "dementia care")]
    DementiaCare,
    #[serde(rename = "physio")]
    Physio,
}

pub const SKILL_VOCABULARY: [Skill; 8] = [
    Skill::WoundCare,
    Skill::Medication,
    Skill::ElderlyCare,
    Skill::MobilityAssistance,
    Skill::Icu,
    Skill::Emergency,
    Skill::DementiaCare,
    Skill::Physio,
];

impl Skill {
    fn bit(self) -> u8 {
        SKILL_VOCABULARY.iter().position(|&s| s == self).unwrap() as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Skill::WoundCare => "wound care",
            Skill::Medication => "medication",
            Skill::ElderlyCare => "elderly care",
            Skill::MobilityAssistance => "mobility assistance",
            Skill::Icu => "ICU",
            Skill::Emergency => "emergency",
            Skill::DementiaCare => "dementia care",
            Skill::Physio => "physio",
        }
    }
}

impl fmt::Display for Skill {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A duplicate-free subset of the skill vocabulary, stored as a bitmask.
/// Serializes as an array of skill names in vocabulary order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SkillSet(u8);

impl SkillSet {
    pub fn empty() -> Self {
        SkillSet(0)
    }

    pub fn insert(&mut self, s: Skill) {
        self.0 |= 1 << s.bit();
    }

    pub fn remove(&mut self, s: Skill) {
        self.0 &= !(1 << s.bit());
    }

    pub fn contains(&self, s: Skill) -> bool {
        self.0 & (1 << s.bit()) != 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = Skill> + '_ {
        SKILL_VOCABULARY.iter().copied().filter(|&s| self.contains(s))
    }

    /// |self ∩ other| — the overlap score between a nurse's skills and a
    /// patient's requirements.
    pub fn intersection_count(&self, other: &SkillSet) -> u32 {
        (self.0 & other.0).count_ones()
    }
}

impl FromIterator<Skill> for SkillSet {
    fn from_iter<I: IntoIterator<Item = Skill>>(iter: I) -> Self {
        let mut set = SkillSet::empty();
        for s in iter {
            set.insert(s);
        }
        set
    }
}

impl Serialize for SkillSet {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        ser.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for SkillSet {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let skills = Vec::<Skill>::deserialize(de)?;
        Ok(skills.into_iter().collect())
    }
}

// ---------------------------------------------------------------------------
// Geography
// ---------------------------------------------------------------------------

/// A latitude/longitude pair in degrees. Construction validates finiteness
/// and range, so downstream distance code never sees a malformed point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, DomainError> {
        if !lat.is_finite() || !lon.is_finite() {
            return Err(DomainError::Validation(format!(
                "coordinates must be finite, got ({lat}, {lon})"
            )));
        }
        if !(-90.0..=90.0).contains(&lat) {
            return Err(DomainError::Validation(format!(
                "latitude {lat} outside [-90, 90]"
            )));
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(DomainError::Validation(format!(
                "longitude {lon} outside [-180, 180]"
            )));
        }
        Ok(GeoPoint { lat, lon })
    }
}

/// A rectangular lat/lon operating region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl Region {
    pub fn validate(&self) -> Result<(), DomainError> {
        GeoPoint::new(self.lat_min, self.lon_min)?;
        GeoPoint::new(self.lat_max, self.lon_max)?;
        if self.lat_min >= self.lat_max || self.lon_min >= self.lon_max {
            return Err(DomainError::Validation(format!(
                "degenerate region: lat [{}, {}], lon [{}, {}]",
                self.lat_min, self.lat_max, self.lon_min, self.lon_max
            )));
        }
        Ok(())
    }

    pub fn contains(&self, p: &GeoPoint) -> bool {
        p.lat >= self.lat_min
            && p.lat <= self.lat_max
            && p.lon >= self.lon_min
            && p.lon <= self.lon_max
    }

    /// Map a point into `[0, 1]^2` region-relative coordinates, clamped.
    pub fn normalize(&self, p: &GeoPoint) -> (f64, f64) {
        let u = ((p.lat - self.lat_min) / (self.lat_max - self.lat_min)).clamp(0.0, 1.0);
        let v = ((p.lon - self.lon_min) / (self.lon_max - self.lon_min)).clamp(0.0, 1.0);
        (u, v)
    }

    fn sample(&self, rng: &mut SplitMix64) -> GeoPoint {
        let lat = rng.uniform(self.lat_min, self.lat_max);
        let lon = rng.uniform(self.lon_min, self.lon_max);
        GeoPoint { lat, lon }
    }
}

impl Default for Region {
    /// Default operating region: a metro-scale box roughly 55 x 50 km, so
    /// that travel distances straddle the default feasibility threshold.
    fn default() -> Self {
        Region {
            lat_min: 40.55,
            lat_max: 41.05,
            lon_min: -74.15,
            lon_max: -73.55,
        }
    }
}

// ---------------------------------------------------------------------------
// Nurses and patients
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftPreference {
    Day,
    Evening,
    Night,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmploymentType {
    FullTime,
    PartTime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Nurse {
    pub id: String,
    pub base_location: GeoPoint,
    pub skills: SkillSet,
    /// Ordinal 1..=5; feeds feature encoding only.
    pub experience_level: u8,
    pub shift_preference: ShiftPreference,
    pub employment_type: EmploymentType,
    pub max_weekly_hours: f64,
    /// Minutes of accumulated work at episode start, in [0, 60].
    pub initial_fatigue: f64,
}

impl Nurse {
    pub fn validate(&self) -> Result<(), DomainError> {
        let field = |name: &str, msg: String| {
            DomainError::Validation(format!("nurse {:?}, field {name}: {msg}", self.id))
        };
        if self.skills.is_empty() {
            return Err(field("skills", "must be non-empty".into()));
        }
        if !(self.max_weekly_hours > 0.0) {
            return Err(field(
                "max_weekly_hours",
                format!("must be > 0, got {}", self.max_weekly_hours),
            ));
        }
        if !(0.0..=60.0).contains(&self.initial_fatigue) {
            return Err(field(
                "initial_fatigue",
                format!("must be in [0, 60], got {}", self.initial_fatigue),
            ));
        }
        if !(1..=5).contains(&self.experience_level) {
            return Err(field(
                "experience",
                format!("must be in 1..=5, got {}", self.experience_level),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Urgency {
    Routine,
    Urgent,
    Emergency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CareLevel {
    Low,
    Medium,
    High,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patient {
    pub id: String,
    pub location: GeoPoint,
    pub urgency: Urgency,
    pub care_level: CareLevel,
    /// 1-3 special care requirements from the skill vocabulary.
    pub requirements: SkillSet,
    /// Maximum tolerated waiting time in minutes, in [30, 120].
    pub max_wait: f64,
    pub prefers_continuity: bool,
    /// Environment step at which the patient arrived.
    pub arrival_time: usize,
    /// Visit length in minutes, in [20, 90].
    pub service_duration: f64,
}

impl Patient {
    pub fn validate(&self) -> Result<(), DomainError> {
        if !(1..=3).contains(&self.requirements.len()) {
            return Err(DomainError::Validation(format!(
                "patient {:?}: requirements must have 1-3 skills, got {}",
                self.id,
                self.requirements.len()
            )));
        }
        if !(30.0..=120.0).contains(&self.max_wait) {
            return Err(DomainError::Validation(format!(
                "patient {:?}: max_wait must be in [30, 120], got {}",
                self.id, self.max_wait
            )));
        }
        if !(20.0..=90.0).contains(&self.service_duration) {
            return Err(DomainError::Validation(format!(
                "patient {:?}: service_duration must be in [20, 90], got {}",
                self.id, self.service_duration
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Mean Earth radius in kilometers, as used by the great-circle formula.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Hard scheduling constraints, loaded from `constraints.json`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintConfig {
    /// Travel feasibility threshold in kilometers.
    pub d_max_km: f64,
    /// Shift duration limit in minutes (carried configuration).
    pub max_shift_minutes: f64,
    /// Reward bonus for repeat nurse-patient pairings.
    pub continuity_weight: f64,
    #[serde(skip, default = "default_earth_radius")]
    pub earth_radius_km: f64,
}

fn default_earth_radius() -> f64 {
    EARTH_RADIUS_KM
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        ConstraintConfig {
            // 30 minutes of travel at 40 km/h urban speed.
            d_max_km: 20.0,
            max_shift_minutes: 480.0,
            continuity_weight: 1.0,
            earth_radius_km: EARTH_RADIUS_KM,
        }
    }
}

impl ConstraintConfig {
    pub fn validate(&self) -> Result<(), DomainError> {
        for (name, v) in [
            ("d_max_km", self.d_max_km),
            ("max_shift_minutes", self.max_shift_minutes),
            ("continuity_weight", self.continuity_weight),
            ("earth_radius_km", self.earth_radius_km),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(DomainError::Validation(format!(
                    "constraint field {name} must be strictly positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Stochastic patient arrival process parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrivalModel {
    /// Expected new patients per step.
    pub lambda: f64,
    /// P(routine), P(urgent), P(emergency).
    pub urgency_probs: [f64; 3],
    /// P(low), P(medium), P(high).
    pub care_probs: [f64; 3],
    /// P(patient prefers continuity of care).
    pub continuity_prob: f64,
    pub region: Region,
}

impl Default for ArrivalModel {
    fn default() -> Self {
        ArrivalModel {
            lambda: 0.5,
            urgency_probs: [0.7, 0.25, 0.05],
            care_probs: [0.5, 0.35, 0.15],
            continuity_prob: 0.5,
            region: Region::default(),
        }
    }
}

impl ArrivalModel {
    pub fn validate(&self) -> Result<(), DomainError> {
        if !(self.lambda > 0.0) {
            return Err(DomainError::Validation(format!(
                "lambda must be > 0, got {}",
                self.lambda
            )));
        }
        for (name, probs) in [
            ("urgency_probs", &self.urgency_probs),
            ("care_probs", &self.care_probs),
        ] {
            if probs.iter().any(|&p| p < 0.0) {
                return Err(DomainError::Validation(format!(
                    "{name} must be non-negative"
                )));
            }
            let sum: f64 = probs.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(DomainError::Validation(format!(
                    "{name} must sum to 1, got {sum}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.continuity_prob) {
            return Err(DomainError::Validation(format!(
                "continuity_prob must be in [0, 1], got {}",
                self.continuity_prob
            )));
        }
        self.region.validate()
    }
}

// ---------------------------------------------------------------------------
// Roster and dataset files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Roster {
    pub nurses: Vec<Nurse>,
}

impl Roster {
    pub fn validate(&self) -> Result<(), DomainError> {
        let mut seen = std::collections::BTreeSet::new();
        for n in &self.nurses {
            n.validate()?;
            if !seen.insert(n.id.as_str()) {
                return Err(DomainError::Validation(format!(
                    "duplicate nurse id {:?}",
                    n.id
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nurses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nurses.is_empty()
    }
}

// Wire representation matching the documented nurses.json schema, where the
// location is flattened into lat/lon fields.
#[derive(Serialize, Deserialize)]
struct NurseRecord {
    id: String,
    lat: f64,
    lon: f64,
    skills: SkillSet,
    experience: u8,
    shift: ShiftPreference,
    employment: EmploymentType,
    max_weekly_hours: f64,
    initial_fatigue: f64,
}

#[derive(Serialize, Deserialize)]
struct RosterFile {
    nurses: Vec<NurseRecord>,
}

impl TryFrom<NurseRecord> for Nurse {
    type Error = DomainError;

    fn try_from(r: NurseRecord) -> Result<Self, DomainError> {
        let base_location = GeoPoint::new(r.lat, r.lon).map_err(|e| {
            DomainError::Validation(format!("nurse {:?}, field lat/lon: {e}", r.id))
        })?;
        let nurse = Nurse {
            id: r.id,
            base_location,
            skills: r.skills,
            experience_level: r.experience,
            shift_preference: r.shift,
            employment_type: r.employment,
            max_weekly_hours: r.max_weekly_hours,
            initial_fatigue: r.initial_fatigue,
        };
        nurse.validate()?;
        Ok(nurse)
    }
}

impl From<&Nurse> for NurseRecord {
    fn from(n: &Nurse) -> Self {
        NurseRecord {
            id: n.id.clone(),
            lat: n.base_location.lat,
            lon: n.base_location.lon,
            skills: n.skills,
            experience: n.experience_level,
            shift: n.shift_preference,
            employment: n.employment_type,
            max_weekly_hours: n.max_weekly_hours,
            initial_fatigue: n.initial_fatigue,
        }
    }
}

fn read_file(path: &Path) -> Result<String, DomainError> {
    std::fs::read_to_string(path).map_err(|source| DomainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<(), DomainError> {
    std::fs::write(path, contents).map_err(|source| DomainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Load and validate a roster from a `nurses.json` file. Nurse ordering in
/// the file is preserved.
pub fn load_roster(path: &Path) -> Result<Roster, DomainError> {
    let text = read_file(path)?;
    let file: RosterFile =
        serde_json::from_str(&text).map_err(|e| DomainError::Schema(e.to_string()))?;
    let nurses = file
        .nurses
        .into_iter()
        .map(Nurse::try_from)
        .collect::<Result<Vec<_>, _>>()?;
    let roster = Roster { nurses };
    roster.validate()?;
    Ok(roster)
}

/// Serialize a roster to the `nurses.json` schema. Output is byte-stable
/// for identical input.
pub fn save_roster(roster: &Roster, path: &Path) -> Result<(), DomainError> {
    let file = RosterFile {
        nurses: roster.nurses.iter().map(NurseRecord::from).collect(),
    };
    let mut text = serde_json::to_string_pretty(&file)
        .map_err(|e| DomainError::Schema(e.to_string()))?;
    text.push('\n');
    write_file(path, &text)
}

pub fn load_constraints(path: &Path) -> Result<ConstraintConfig, DomainError> {
    let text = read_file(path)?;
    let config: ConstraintConfig =
        serde_json::from_str(&text).map_err(|e| DomainError::Schema(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn save_constraints(config: &ConstraintConfig, path: &Path) -> Result<(), DomainError> {
    let mut text = serde_json::to_string_pretty(config)
        .map_err(|e| DomainError::Schema(e.to_string()))?;
    text.push('\n');
    write_file(path, &text)
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

/// Number of distinct recurring patient identities per episode. Repeat
/// visits by the same identity are what make continuity-of-care bonuses
/// reachable.
pub const PATIENT_ID_POOL: u64 = 24;

/// Generate a synthetic roster. Deterministic in `(seed, count, region)`.
///
/// Skills are sampled as 2-4 elements uniformly without replacement; after
/// sampling, any vocabulary skill missing from the whole roster is inserted
/// into a random nurse, so every skill is represented when `count >= 8`.
pub fn generate_roster(seed: u64, count: usize, region: &Region) -> Result<Roster, DomainError> {
    if count < 1 {
        return Err(DomainError::Validation("roster count must be >= 1".into()));
    }
    region.validate()?;
    let mut rng = SplitMix64::new(seed);
    let mut nurses = Vec::with_capacity(count);
    for i in 0..count {
        let base_location = region.sample(&mut rng);
        let k = 2 + rng.next_below(3) as usize;
        let skills: SkillSet = rng
            .sample_indices(SKILL_VOCABULARY.len(), k)
            .into_iter()
            .map(|j| SKILL_VOCABULARY[j])
            .collect();
        let experience_level = 1 + rng.next_below(5) as u8;
        let shift_preference = match rng.next_below(3) {
            0 => ShiftPreference::Day,
            1 => ShiftPreference::Evening,
            _ => ShiftPreference::Night,
        };
        let employment_type = if rng.next_below(2) == 0 {
            EmploymentType::FullTime
        } else {
            EmploymentType::PartTime
        };
        let max_weekly_hours = match employment_type {
            EmploymentType::FullTime => 40.0,
            EmploymentType::PartTime => 20.0,
        };
        let initial_fatigue = rng.uniform(0.0, 60.0);
        nurses.push(Nurse {
            id: format!("n{:03}", i + 1),
            base_location,
            skills,
            experience_level,
            shift_preference,
            employment_type,
            max_weekly_hours,
            initial_fatigue,
        });
    }
    // Coverage repair: every vocabulary skill must appear somewhere.
    for skill in SKILL_VOCABULARY {
        if nurses.iter().any(|n| n.skills.contains(skill)) {
            continue;
        }
        let idx = rng.next_below(count as u64) as usize;
        let set = &mut nurses[idx].skills;
        if set.len() >= 4 {
            let victim = set.iter().nth(rng.next_below(set.len() as u64) as usize);
            if let Some(v) = victim {
                set.remove(v);
            }
        }
        set.insert(skill);
    }
    let roster = Roster { nurses };
    roster.validate()?;
    Ok(roster)
}

/// Number of new patients this step, `N_t ~ Poisson(lambda)`.
pub fn sample_arrival_count(rng: &mut SplitMix64, lambda: f64) -> usize {
    rng.poisson(lambda) as usize
}

/// Sample one arriving patient at step `t` from the arrival model.
pub fn generate_patient(rng: &mut SplitMix64, model: &ArrivalModel, t: usize) -> Patient {
    let id = format!("p{:02}", rng.next_below(PATIENT_ID_POOL));
    let location = model.region.sample(rng);
    let urgency = match rng.categorical(&model.urgency_probs) {
        0 => Urgency::Routine,
        1 => Urgency::Urgent,
        _ => Urgency::Emergency,
    };
    let care_level = match rng.categorical(&model.care_probs) {
        0 => CareLevel::Low,
        1 => CareLevel::Medium,
        _ => CareLevel::High,
    };
    let k = 1 + rng.next_below(3) as usize;
    let requirements: SkillSet = rng
        .sample_indices(SKILL_VOCABULARY.len(), k)
        .into_iter()
        .map(|j| SKILL_VOCABULARY[j])
        .collect();
    let max_wait = rng.uniform(30.0, 120.0);
    let prefers_continuity = rng.bernoulli(model.continuity_prob);
    let service_duration = rng.uniform(20.0, 90.0);
    Patient {
        id,
        location,
        urgency,
        care_level,
        requirements,
        max_wait,
        prefers_continuity,
        arrival_time: t,
        service_duration,
    }
}

/// Overlap score |Skills(n) ∩ Requirements(p)|.
pub fn skill_match(nurse: &Nurse, patient: &Patient) -> u32 {
    nurse.skills.intersection_count(&patient.requirements)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roster_round_trip_preserves_everything() {
        let roster = generate_roster(7, 40, &Region::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nurses.json");
        save_roster(&roster, &path).unwrap();
        let loaded = load_roster(&path).unwrap();
        assert_eq!(roster, loaded);
    }

    #[test]
    fn load_preserves_order_of_two_nurses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nurses.json");
        std::fs::write(
            &path,
            r#"{"nurses":[
                {"id":"b","lat":40.6,"lon":-74.0,"skills":["ICU"],"experience":3,
                 "shift":"day","employment":"full_time","max_weekly_hours":40,"initial_fatigue":0},
                {"id":"a","lat":40.7,"lon":-74.0,"skills":["physio"],"experience":1,
                 "shift":"night","employment":"part_time","max_weekly_hours":20,"initial_fatigue":5}
            ]}"#,
        )
        .unwrap();
        let roster = load_roster(&path).unwrap();
        assert_eq!(roster.len(), 2);
        assert_eq!(roster.nurses[0].id, "b");
        assert_eq!(roster.nurses[1].id, "a");
    }

    #[test]
    fn missing_skills_field_names_it() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nurses.json");
        std::fs::write(
            &path,
            r#"{"nurses":[{"id":"x","lat":0,"lon":0,"experience":3,
                "shift":"day","employment":"full_time","max_weekly_hours":40,"initial_fatigue":0}]}"#,
        )
        .unwrap();
        let err = load_roster(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("skills"), "error should name skills: {msg}");
        assert!(matches!(err, DomainError::Schema(_)));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut roster = generate_roster(1, 2, &Region::default()).unwrap();
        roster.nurses[1].id = roster.nurses[0].id.clone();
        let err = roster.validate().unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn generate_roster_is_deterministic() {
        let region = Region::default();
        let a = generate_roster(1, 40, &region).unwrap();
        let b = generate_roster(1, 40, &region).unwrap();
        assert_eq!(a, b);
        let c = generate_roster(2, 40, &region).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn generated_locations_inside_region() {
        let region = Region::default();
        let roster = generate_roster(3, 40, &region).unwrap();
        assert_eq!(roster.len(), 40);
        for n in &roster.nurses {
            assert!(region.contains(&n.base_location), "nurse {} outside", n.id);
        }
    }

    #[test]
    fn skill_coverage_when_count_at_least_8() {
        for seed in 0..20 {
            let roster = generate_roster(seed, 8, &Region::default()).unwrap();
            for skill in SKILL_VOCABULARY {
                assert!(
                    roster.nurses.iter().any(|n| n.skills.contains(skill)),
                    "seed {seed}: skill {skill} missing"
                );
            }
        }
    }

    #[test]
    fn degenerate_region_rejected() {
        let region = Region {
            lat_min: 40.0,
            lat_max: 40.0,
            lon_min: -74.0,
            lon_max: -73.0,
        };
        assert!(generate_roster(1, 5, &region).is_err());
    }

    #[test]
    fn generated_entities_satisfy_invariants() {
        let region = Region::default();
        let roster = generate_roster(11, 40, &region).unwrap();
        roster.validate().unwrap();
        let model = ArrivalModel::default();
        let mut rng = SplitMix64::new(5);
        for t in 0..10_000 {
            let p = generate_patient(&mut rng, &model, t);
            p.validate().unwrap();
            assert_eq!(p.arrival_time, t);
            assert!(model.region.contains(&p.location));
        }
    }

    #[test]
    fn skill_match_cases() {
        let mut nurse = generate_roster(1, 1, &Region::default())
            .unwrap()
            .nurses
            .remove(0);
        let mut rng = SplitMix64::new(2);
        let mut patient = generate_patient(&mut rng, &ArrivalModel::default(), 0);

        nurse.skills = [Skill::Icu, Skill::Physio].into_iter().collect();
        patient.requirements = [Skill::Physio].into_iter().collect();
        assert_eq!(skill_match(&nurse, &patient), 1);

        patient.requirements = [Skill::WoundCare].into_iter().collect();
        assert_eq!(skill_match(&nurse, &patient), 0);

        nurse.skills = [Skill::Icu, Skill::Physio, Skill::Emergency, Skill::Medication]
            .into_iter()
            .collect();
        patient.requirements = [Skill::Icu, Skill::Physio, Skill::Emergency]
            .into_iter()
            .collect();
        assert_eq!(skill_match(&nurse, &patient), 3);
    }

    #[test]
    fn arrival_count_statistics() {
        let mut rng = SplitMix64::new(31);
        let n = 100_000;
        let counts: Vec<usize> = (0..n).map(|_| sample_arrival_count(&mut rng, 0.5)).collect();
        let mean = counts.iter().sum::<usize>() as f64 / n as f64;
        assert!((mean - 0.5).abs() < 3.0 * (0.5f64 / n as f64).sqrt());
        let p0 = counts.iter().filter(|&&c| c == 0).count() as f64 / n as f64;
        assert!((p0 - (-0.5f64).exp()).abs() < 0.01);
    }

    #[test]
    fn patient_attribute_distributions() {
        let model = ArrivalModel::default();
        let mut rng = SplitMix64::new(17);
        let n = 100_000;
        let mut urgency = [0usize; 3];
        let mut care = [0usize; 3];
        let mut wait_sum = 0.0;
        let mut continuity = 0usize;
        for t in 0..n {
            let p = generate_patient(&mut rng, &model, t);
            urgency[p.urgency as usize] += 1;
            care[p.care_level as usize] += 1;
            wait_sum += p.max_wait;
            continuity += p.prefers_continuity as usize;
        }
        for (i, expect) in [0.7, 0.25, 0.05].iter().enumerate() {
            assert!((urgency[i] as f64 / n as f64 - expect).abs() < 0.01);
        }
        for (i, expect) in [0.5, 0.35, 0.15].iter().enumerate() {
            assert!((care[i] as f64 / n as f64 - expect).abs() < 0.01);
        }
        // mean of U[30, 120] is 75
        assert!((wait_sum / n as f64 - 75.0).abs() < 1.0);
        assert!((continuity as f64 / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn nurse_missing_initial_fatigue_range_rejected() {
        let mut roster = generate_roster(1, 1, &Region::default()).unwrap();
        roster.nurses[0].initial_fatigue = 99.0;
        let err = roster.validate().unwrap_err();
        assert!(err.to_string().contains("initial_fatigue"));
    }

    #[test]
    fn constraints_round_trip_and_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("constraints.json");
        let config = ConstraintConfig::default();
        save_constraints(&config, &path).unwrap();
        let loaded = load_constraints(&path).unwrap();
        assert_eq!(loaded.d_max_km, 20.0);
        assert_eq!(loaded.continuity_weight, 1.0);
        assert_eq!(loaded.earth_radius_km, EARTH_RADIUS_KM);
    }

    #[test]
    fn geopoint_rejects_non_finite_and_out_of_range() {
        assert!(GeoPoint::new(f64::NAN, 0.0).is_err());
        assert!(GeoPoint::new(0.0, f64::INFINITY).is_err());
        assert!(GeoPoint::new(91.0, 0.0).is_err());
        assert!(GeoPoint::new(0.0, -181.0).is_err());
        assert!(GeoPoint::new(45.0, 90.0).is_ok());
    }
}
