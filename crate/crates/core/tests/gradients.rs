//! Finite-difference verification of every differentiable operation and of
//! the full combined policy/value/entropy loss.

mod common;

use common::{
    check_gradients, check_op_case, op_catalog, rollout_fixture, tiny_policy_config, FD_ABS_FLOOR,
    FD_H, FD_REL_TOL,
};
use nursesched::env::FeatureEncoding;
use nursesched::numcore::{Tape, Var};
use nursesched::policy::Policy;

#[test]
fn every_op_passes_finite_differences() {
    for case in op_catalog() {
        for seed in 0..5 {
            let checked = check_op_case(&case, seed * 31 + 7);
            assert!(checked > 0, "{} checked nothing", case.name);
        }
    }
}

#[test]
fn full_ppo_loss_passes_finite_differences() {
    for seed in 0..2 {
        let checked = common::check_full_loss(seed, 3);
        assert!(checked > 1000, "only {checked} coordinates checked");
    }
}

#[test]
fn log_prob_gradients_flow_to_actor_not_critic() {
    let config = tiny_policy_config();
    let policy = Policy::new(config, 9).unwrap();
    let fx = rollout_fixture(&policy, 21, 2);

    let logp_loss = |p: &Policy| -> (Tape, Var) {
        let encodings: Vec<&FeatureEncoding> =
            fx.buffer.steps.iter().map(|s| &s.encoding).collect();
        let masks: Vec<Vec<bool>> = fx.buffer.steps.iter().map(|s| s.mask.clone()).collect();
        let actions: Vec<usize> = fx.buffer.steps.iter().map(|s| s.action_index).collect();
        let mut tape = Tape::new();
        let fwd = p.forward_batch(&mut tape, &encodings, &masks).unwrap();
        let logp = tape.gather_rows(fwd.log_probs, &actions).unwrap();
        let loss = tape.sum(logp);
        (tape, loss)
    };

    let mut grads = policy.store.clone();
    let (mut tape, loss) = logp_loss(&policy);
    tape.backward(loss, &mut grads).unwrap();

    // Critic-only parameters take exactly zero gradient from log_prob.
    for name in ["critic.w", "critic.b", "critic.v"] {
        assert!(
            grads.grad(name).unwrap().data().iter().all(|&g| g == 0.0),
            "{name} received log_prob gradient"
        );
    }
    // Actor head gradients are live and pass finite differences.
    let phi_grad = grads.grad("actor.phi").unwrap();
    assert!(phi_grad.data().iter().any(|&g| g != 0.0));

    check_gradients(
        &policy.store,
        &grads,
        |s| {
            let p = Policy {
                config,
                store: s.clone(),
            };
            let (tape, loss) = logp_loss(&p);
            tape.value(loss).item()
        },
        FD_H,
        FD_REL_TOL,
        FD_ABS_FLOOR,
    );
}
