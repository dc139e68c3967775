//! Heuristic reference policies sharing the trained policy's act surface.

use crate::domain::skill_match;
use crate::env::{Action, EnvState};
use crate::geo::haversine_km;
use crate::ppo::{Agent, TrainError};
use crate::rng::SplitMix64;

/// Every feasible pair as `(skill_match, distance_km, nurse, patient)`.
fn feasible_pairs(state: &EnvState) -> Vec<(u32, f64, usize, usize)> {
    let mask = state.feasibility_mask();
    let mut pairs = Vec::new();
    for (n, row) in mask.mask.iter().enumerate() {
        for (p, &ok) in row.iter().enumerate() {
            if ok {
                let nurse = &state.nurses[n];
                let patient = &state.patients[p];
                pairs.push((
                    skill_match(&nurse.nurse, &patient.patient),
                    haversine_km(&nurse.nurse.base_location, &patient.patient.location),
                    n,
                    p,
                ));
            }
        }
    }
    pairs
}

/// Feasible pair maximizing skill overlap; ties broken by smaller distance,
/// then lowest nurse index, then lowest patient index. Null when no pair is
/// feasible.
pub fn greedy_skill(state: &EnvState) -> Action {
    feasible_pairs(state)
        .into_iter()
        .min_by(|a, b| {
            b.0.cmp(&a.0)
                .then(a.1.total_cmp(&b.1))
                .then(a.2.cmp(&b.2))
                .then(a.3.cmp(&b.3))
        })
        .map(|(_, _, n, p)| Action::Assign { nurse: n, patient: p })
        .unwrap_or(Action::Null)
}

/// Feasible pair minimizing travel distance; ties broken by larger skill
/// overlap, then lowest indices. Null when no pair is feasible.
pub fn greedy_nearest(state: &EnvState) -> Action {
    feasible_pairs(state)
        .into_iter()
        .min_by(|a, b| {
            a.1.total_cmp(&b.1)
                .then(b.0.cmp(&a.0))
                .then(a.2.cmp(&b.2))
                .then(a.3.cmp(&b.3))
        })
        .map(|(_, _, n, p)| Action::Assign { nurse: n, patient: p })
        .unwrap_or(Action::Null)
}

/// Uniform draw over every feasible action, the null action included.
pub fn random_feasible(state: &EnvState, rng: &mut SplitMix64) -> Action {
    let actions = state.enumerate_actions();
    actions[rng.next_below(actions.len() as u64) as usize]
}

pub struct GreedySkillAgent;

impl Agent for GreedySkillAgent {
    fn choose(&mut self, state: &EnvState) -> Result<Action, TrainError> {
        Ok(greedy_skill(state))
    }
}

pub struct GreedyNearestAgent;

impl Agent for GreedyNearestAgent {
    fn choose(&mut self, state: &EnvState) -> Result<Action, TrainError> {
        Ok(greedy_nearest(state))
    }
}

pub struct RandomAgent {
    pub rng: SplitMix64,
}

impl RandomAgent {
    pub fn new(seed: u64) -> RandomAgent {
        RandomAgent {
            rng: SplitMix64::new(seed),
        }
    }
}

impl Agent for RandomAgent {
    fn choose(&mut self, state: &EnvState) -> Result<Action, TrainError> {
        Ok(random_feasible(state, &mut self.rng))
    }
}
