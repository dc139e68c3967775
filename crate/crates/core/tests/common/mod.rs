//! Shared test utilities: the central finite-difference oracle, an
//! operation catalog for gradient sweeps, independent reward/mask oracles,
//! and synthetic state builders. Everything here is independent of the
//! implementation paths it checks.

#![allow(dead_code)] // each test binary uses a different subset

use nursesched::domain::{
    generate_patient, generate_roster, ArrivalModel, Region, Roster, SKILL_VOCABULARY,
};
use nursesched::env::{Action, EnvConfig, EnvState, FeatureEncoding, PatientRuntime};
use nursesched::geo::haversine_km;
use nursesched::numcore::{ParamStore, Tape, Tensor, Var};
use nursesched::policy::{Policy, PolicyConfig};
use nursesched::ppo::{collect_rollout, RolloutBuffer, TrainConfig};
use nursesched::rng::SplitMix64;

pub const FD_H: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_FLOOR: f64 = 1e-7;

// ---------------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------------

/// Central finite differences with step `h` against the analytic gradients
/// stored in `grads`. Passes when the absolute error is below `abs_floor`
/// or the relative error (against the larger magnitude) is below
/// `rel_tol`. Returns the number of coordinates checked.
pub fn check_gradients(
    base: &ParamStore,
    grads: &ParamStore,
    mut eval: impl FnMut(&ParamStore) -> f64,
    h: f64,
    rel_tol: f64,
    abs_floor: f64,
) -> usize {
    let mut checked = 0;
    let names: Vec<String> = base.names().map(String::from).collect();
    for name in &names {
        let len = base.get(name).unwrap().len();
        let analytic = grads.grad(name).unwrap().clone();
        for k in 0..len {
            let mut plus = base.clone();
            plus.get_mut(name).unwrap().data_mut()[k] += h;
            let mut minus = base.clone();
            minus.get_mut(name).unwrap().data_mut()[k] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[k];
            let abs_err = (numeric - a).abs();
            let denom = numeric.abs().max(a.abs());
            assert!(
                abs_err < abs_floor || abs_err / denom < rel_tol,
                "{name}[{k}]: analytic {a}, numeric {numeric}, abs {abs_err}, rel {}",
                abs_err / denom
            );
            checked += 1;
        }
    }
    checked
}

pub fn random_tensor(rng: &mut SplitMix64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.uniform(lo, hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

// ---------------------------------------------------------------------------
// Operation catalog
// ---------------------------------------------------------------------------

pub struct OpCase {
    pub name: &'static str,
    pub shapes: &'static [(&'static str, &'static [usize])],
    pub build: fn(&mut Tape, &ParamStore) -> Var,
}

/// One expression per differentiable operation (plus a few structural
/// combinations). Finite-difference checking each case exercises every
/// backward rule in the tape.
pub fn op_catalog() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            shapes: &[("a", &[3, 4]), ("b", &[4, 2])],
            build: |t, s| {
                let a = t.param(s, "a").unwrap();
                let b = t.param(s, "b").unwrap();
                t.matmul(a, b).unwrap()
            },
        },
        OpCase {
            name: "elementwise_add_sub_mul_scale",
            shapes: &[("a", &[2, 3]), ("b", &[2, 3])],
            build: |t, s| {
                let a = t.param(s, "a").unwrap();
                let b = t.param(s, "b").unwrap();
                let sum = t.add(a, b).unwrap();
                let diff = t.sub(sum, b).unwrap();
                let prod = t.mul(diff, b).unwrap();
                let scaled = t.scale(prod, 1.7);
                t.add_scalar(scaled, 0.3)
            },
        },
        OpCase {
            name: "tanh_exp_neg",
            shapes: &[("a", &[2, 4])],
            build: |t, s| {
                let a = t.param(s, "a").unwrap();
                let th = t.tanh(a);
                let e = t.exp(th);
                t.neg(e)
            },
        },
        OpCase {
            name: "relu",
            shapes: &[("a", &[2, 4])],
            build: |t, s| {
                let a = t.param(s, "a").unwrap();
                // keep inputs away from the kink
                let shifted = t.add_scalar(a, 3.0);
                t.relu(shifted)
            },
        },
        OpCase {
            name: "add_row_transpose",
            shapes: &[("a", &[3, 4]), ("bias", &[1, 4])],
            build: |t, s| {
                let a = t.param(s, "a").unwrap();
                let b = t.param(s, "bias").unwrap();
                let x = t.add_row(a, b).unwrap();
                t.transpose(x)
            },
        },
        OpCase {
            name: "masked_softmax",
            shapes: &[("logits", &[2, 4])],
            build: |t, s| {
                const MASK: [bool; 8] = [true, false, true, true, true, false, true, true];
                let l = t.param(s, "logits").unwrap();
                t.masked_softmax(l, &MASK).unwrap()
            },
        },
        OpCase {
            name: "masked_log_softmax",
            shapes: &[("logits", &[2, 4])],
            build: |t, s| {
                const MASK: [bool; 8] = [true, true, false, true, true, true, true, false];
                let l = t.param(s, "logits").unwrap();
                let lp = t.masked_log_softmax(l, &MASK).unwrap();
                // read only the defined (unmasked) entries
                let keep = Tensor::from_vec(
                    &[2, 4],
                    MASK.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
                )
                .unwrap();
                let keep = t.constant(keep);
                t.mul(lp, keep).unwrap()
            },
        },
        OpCase {
            name: "layer_norm",
            shapes: &[("x", &[3, 6]), ("gain", &[1, 6]), ("bias", &[1, 6])],
            build: |t, s| {
                let x = t.param(s, "x").unwrap();
                let g = t.param(s, "gain").unwrap();
                let b = t.param(s, "bias").unwrap();
                t.layer_norm(x, g, b).unwrap()
            },
        },
        OpCase {
            name: "mean_pool_blocks",
            shapes: &[("x", &[6, 3])],
            build: |t, s| {
                const PRESENCE: [bool; 6] = [true, false, true, true, true, false];
                let x = t.param(s, "x").unwrap();
                t.mean_pool_blocks(x, &PRESENCE, 3).unwrap()
            },
        },
        OpCase {
            name: "concat_slice_repeat_tile",
            shapes: &[("a", &[2, 3]), ("b", &[4, 3])],
            build: |t, s| {
                let a = t.param(s, "a").unwrap();
                let b = t.param(s, "b").unwrap();
                let cat = t.concat_rows(a, b).unwrap();
                let sliced = t.slice_rows(cat, 1, 4).unwrap();
                let rep = t.repeat_rows(sliced, 2);
                t.tile_row_blocks(rep, 4, 2).unwrap()
            },
        },
        OpCase {
            name: "concat_slice_cols",
            shapes: &[("a", &[3, 2]), ("b", &[3, 4])],
            build: |t, s| {
                let a = t.param(s, "a").unwrap();
                let b = t.param(s, "b").unwrap();
                let cat = t.concat_cols(a, b).unwrap();
                t.slice_cols(cat, 1, 4).unwrap()
            },
        },
        OpCase {
            name: "interleave_blocks_reshape",
            shapes: &[("a", &[4, 2]), ("b", &[6, 2])],
            build: |t, s| {
                let a = t.param(s, "a").unwrap();
                let b = t.param(s, "b").unwrap();
                let inter = t.interleave_row_blocks(a, b, 2, 3).unwrap();
                let blocks = t.slice_row_blocks(inter, 5, 1, 3).unwrap();
                t.reshape(blocks, &[3, 4]).unwrap()
            },
        },
        OpCase {
            name: "concat_rows_n",
            shapes: &[("a", &[2, 3]), ("b", &[3, 3])],
            build: |t, s| {
                let a = t.param(s, "a").unwrap();
                let b = t.param(s, "b").unwrap();
                t.concat_rows_n(&[a, b, a]).unwrap()
            },
        },
        OpCase {
            name: "min_clip_sum_mean",
            shapes: &[("a", &[2, 5]), ("b", &[2, 5])],
            build: |t, s| {
                let a = t.param(s, "a").unwrap();
                let b = t.param(s, "b").unwrap();
                let m = t.min_elem(a, b).unwrap();
                let c = t.clip(m, -0.8, 0.8);
                let total = t.sum(c);
                let mean = t.mean(a);
                t.add(total, mean).unwrap()
            },
        },
        OpCase {
            name: "gather_rows",
            shapes: &[("x", &[3, 2])],
            build: |t, s| {
                let x = t.param(s, "x").unwrap();
                t.gather_rows(x, &[1, 0, 1]).unwrap()
            },
        },
    ]
}

/// Check one catalog case: `loss = sum(direction * build(params))`, with a
/// fixed random direction so every output coordinate gets a distinct
/// upstream gradient.
pub fn check_op_case(case: &OpCase, seed: u64) -> usize {
    let mut rng = SplitMix64::new(seed);
    let mut store = ParamStore::new();
    for (name, shape) in case.shapes {
        store
            .insert(name, random_tensor(&mut rng, shape, -1.5, 1.5))
            .unwrap();
    }
    let build = case.build;
    let loss_of = |s: &ParamStore| -> (Tape, Var) {
        let mut tape = Tape::new();
        let out = build(&mut tape, s);
        let mut drng = SplitMix64::new(seed ^ 0xD1CE);
        let shape = tape.value(out).shape().to_vec();
        let direction = tape.constant(random_tensor(&mut drng, &shape, -1.0, 1.0));
        let weighted = tape.mul(out, direction).unwrap();
        let loss = tape.sum(weighted);
        (tape, loss)
    };

    let mut grads = store.clone();
    let (mut tape, loss) = loss_of(&store);
    tape.backward(loss, &mut grads).unwrap();

    check_gradients(
        &store,
        &grads,
        |s| {
            let (tape, loss) = loss_of(s);
            tape.value(loss).item()
        },
        FD_H,
        FD_REL_TOL,
        FD_ABS_FLOOR,
    )
}

// ---------------------------------------------------------------------------
// Whole-model loss fixture
// ---------------------------------------------------------------------------

/// Small environment/policy geometry so finite-difference sweeps stay fast.
pub fn tiny_policy_config() -> PolicyConfig {
    PolicyConfig {
        d_h: 8,
        n_heads: 2,
        n_layers: 1,
        max_nurses: 3,
        max_patients: 2,
        ..PolicyConfig::default()
    }
}

pub fn tiny_env_config() -> EnvConfig {
    EnvConfig {
        max_nurses: 3,
        max_patients: 2,
        horizon: 8,
        ..EnvConfig::default()
    }
}

pub fn tiny_setup() -> (Roster, EnvConfig) {
    (
        generate_roster(1, 10, &Region::default()).unwrap(),
        tiny_env_config(),
    )
}

pub struct LossFixture {
    pub buffer: RolloutBuffer,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub config: TrainConfig,
}

pub fn rollout_fixture(policy: &Policy, seed: u64, len: usize) -> LossFixture {
    let (roster, env_config) = tiny_setup();
    let state = EnvState::reset(seed, &roster, &env_config).unwrap();
    let mut rng = SplitMix64::new(seed ^ 0xFEED);
    let buffer = collect_rollout(state, policy, len, &mut rng, None).unwrap();
    let config = TrainConfig::default();
    let rewards: Vec<f64> = buffer.steps.iter().map(|s| s.reward).collect();
    let values: Vec<f64> = buffer.steps.iter().map(|s| s.value).collect();
    let dones: Vec<bool> = buffer.steps.iter().map(|s| s.done).collect();
    let (adv, ret) =
        nursesched::ppo::compute_gae(&rewards, &values, &dones, config.gamma, config.gae_lambda)
            .unwrap();
    let advantages = nursesched::ppo::normalize_advantages(&adv);
    LossFixture {
        buffer,
        advantages,
        returns: ret,
        config,
    }
}

/// Rebuild the combined clipped-surrogate + value + entropy loss from
/// public tape ops, mirroring the production update path.
pub fn combined_loss(policy: &Policy, fx: &LossFixture) -> (Tape, Var) {
    let m = fx.buffer.len();
    let encodings: Vec<&FeatureEncoding> = fx.buffer.steps.iter().map(|s| &s.encoding).collect();
    let masks: Vec<Vec<bool>> = fx.buffer.steps.iter().map(|s| s.mask.clone()).collect();
    let actions: Vec<usize> = fx.buffer.steps.iter().map(|s| s.action_index).collect();
    let old_logp: Vec<f64> = fx.buffer.steps.iter().map(|s| s.log_prob_old).collect();

    let mut tape = Tape::new();
    let fwd = policy.forward_batch(&mut tape, &encodings, &masks).unwrap();
    let logp_new = tape.gather_rows(fwd.log_probs, &actions).unwrap();
    let logp_old = tape.constant(Tensor::from_vec(&[m, 1], old_logp).unwrap());
    let adv = tape.constant(Tensor::from_vec(&[m, 1], fx.advantages.clone()).unwrap());
    let ret = tape.constant(Tensor::from_vec(&[m, 1], fx.returns.clone()).unwrap());

    let diff = tape.sub(logp_new, logp_old).unwrap();
    let ratio = tape.exp(diff);
    let s1 = tape.mul(ratio, adv).unwrap();
    let clipped = tape.clip(ratio, 1.0 - fx.config.clip_eps, 1.0 + fx.config.clip_eps);
    let s2 = tape.mul(clipped, adv).unwrap();
    let surr = tape.min_elem(s1, s2).unwrap();
    let surr_mean = tape.mean(surr);
    let policy_loss = tape.neg(surr_mean);

    let verr = tape.sub(fwd.value, ret).unwrap();
    let vsq = tape.mul(verr, verr).unwrap();
    let value_loss = tape.mean(vsq);
    let ent = tape.mean(fwd.entropy);

    let v_term = tape.scale(value_loss, fx.config.c_v);
    let e_term = tape.scale(ent, -fx.config.c_e);
    let partial = tape.add(policy_loss, v_term).unwrap();
    let loss = tape.add(partial, e_term).unwrap();
    (tape, loss)
}

/// Finite-difference check of the full combined loss for one seed; returns
/// the number of parameter coordinates verified.
pub fn check_full_loss(seed: u64, rollout_len: usize) -> usize {
    let config = tiny_policy_config();
    let policy = Policy::new(config, seed).unwrap();
    let fx = rollout_fixture(&policy, seed + 10, rollout_len);

    let mut grads = policy.store.clone();
    let (mut tape, loss) = combined_loss(&policy, &fx);
    tape.backward(loss, &mut grads).unwrap();

    check_gradients(
        &policy.store,
        &grads,
        |s| {
            let p = Policy {
                config,
                store: s.clone(),
            };
            let (tape, loss) = combined_loss(&p, &fx);
            tape.value(loss).item()
        },
        FD_H,
        FD_REL_TOL,
        FD_ABS_FLOOR,
    )
}

// ---------------------------------------------------------------------------
// Independent environment oracles
// ---------------------------------------------------------------------------

/// Independent evaluation of the assignment reward, recomputed directly
/// from state fields rather than through the environment's code path.
pub fn reward_oracle(state: &EnvState, nurse: usize, patient: usize) -> f64 {
    let n = &state.nurses[nurse];
    let p = &state.patients[patient];
    let overlap = n
        .nurse
        .skills
        .iter()
        .filter(|s| p.patient.requirements.contains(*s))
        .count() as f64;
    let dist = haversine_km(&n.nurse.base_location, &p.patient.location);
    let fatigue_ratio = n.fatigue / 60.0;
    let fatigue_term = 0.2 * if fatigue_ratio > 1.0 { 1.0 } else { fatigue_ratio };
    let continuity = if p.patient.prefers_continuity
        && n.assignments_served.iter().any(|id| *id == p.patient.id)
    {
        state.config.constraints.continuity_weight
    } else {
        0.0
    };
    2.0 + 5.0 * overlap - 0.0005 * dist - fatigue_term + continuity
}

/// Brute-force re-derivation of the three feasibility conditions.
pub fn mask_oracle(state: &EnvState) -> Vec<Vec<bool>> {
    state
        .nurses
        .iter()
        .map(|n| {
            let nurse_free = match n.busy_until {
                Some(until) => until <= state.t,
                None => true,
            };
            state
                .patients
                .iter()
                .map(|p| {
                    let waiting = !p.assigned;
                    let close = haversine_km(&n.nurse.base_location, &p.patient.location)
                        <= state.config.constraints.d_max_km;
                    nurse_free && waiting && close
                })
                .collect()
        })
        .collect()
}

/// A synthetic state with random queue contents, fatigue, and busy flags,
/// occasionally with a service history that makes continuity bonuses live.
/// Built directly, not by stepping the simulator.
pub fn random_small_state(rng: &mut SplitMix64, config: &EnvConfig, roster: &Roster) -> EnvState {
    let mut state = EnvState::reset(rng.next_u64(), roster, config).unwrap();
    state.t = rng.next_below(config.horizon as u64 * 2) as usize + 1;
    let model = ArrivalModel {
        region: config.arrivals.region,
        ..ArrivalModel::default()
    };
    let n_patients = rng.next_below(config.max_patients as u64 + 1) as usize;
    for _ in 0..n_patients {
        let waited = rng.next_below(3) as usize;
        let patient = generate_patient(rng, &model, state.t.saturating_sub(waited));
        state.patients.push(PatientRuntime {
            waiting_since: patient.arrival_time,
            patient,
            assigned: false,
            served_by: None,
        });
        state.arrivals_total += 1;
    }
    for nurse in &mut state.nurses {
        nurse.fatigue = rng.uniform(0.0, 150.0);
        if rng.bernoulli(0.3) {
            nurse.busy_until = Some(state.t + 1 + rng.next_below(4) as usize);
        }
        // Sometimes pretend this nurse already served a queued patient, so
        // continuity terms fire.
        if rng.bernoulli(0.4) && !state.patients.is_empty() {
            let idx = rng.next_below(state.patients.len() as u64) as usize;
            let id = state.patients[idx].patient.id.clone();
            nurse.assignments_served.push(id.clone());
            state.history.push((0, nurse.nurse.id.clone(), id));
        }
        // And sometimes a history entry that matches no queued patient.
        if rng.bernoulli(0.3) {
            let id = format!("p{:02}", rng.next_below(24));
            nurse.assignments_served.push(id.clone());
            state.history.push((0, nurse.nurse.id.clone(), id));
        }
    }
    state
}

/// All eight vocabulary skills, for tests that need exhaustive sets.
pub fn full_skill_set() -> nursesched::domain::SkillSet {
    SKILL_VOCABULARY.iter().copied().collect()
}

/// Uniform-random feasible action, used to drive audit trajectories.
pub fn random_action(state: &EnvState, rng: &mut SplitMix64) -> Action {
    let actions = state.enumerate_actions();
    actions[rng.next_below(actions.len() as u64) as usize]
}
