//! Constrained nurse-patient scheduling simulator with masked-PPO training.
//!
//! The crate is organized around a discrete-time assignment environment:
//!
//! * [`domain`] — nurses, patients, constraints, JSON datasets, and the
//!   seeded synthetic generators.
//! * [`geo`] — great-circle distance.
//! * [`env`] — the sequential scheduling environment: feasibility masking,
//!   composite reward, and fixed-size feature encoding.
//! * [`numcore`] — a dense f64 tensor core with reverse-mode
//!   differentiation, Adam, and checkpointing.
//! * [`policy`] — the attention encoder over nurse/patient tokens with a
//!   pairwise actor head and pooled critic.
//! * [`ppo`] — rollout collection, advantage estimation, the clipped
//!   surrogate update, training, and evaluation.
//! * [`baselines`] — greedy and random reference policies.
//!
//! Everything is deterministic given a seed; see [`rng`] for the exact
//! generator specification.

pub mod baselines;
pub mod domain;
pub mod env;
pub mod geo;
pub mod numcore;
pub mod policy;
pub mod ppo;
pub mod rng;
