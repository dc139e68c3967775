//! Proximal policy optimization over the scheduling environment.
//!
//! One training epoch is one update cycle: collect a fixed-length rollout
//! (one episode), estimate advantages with GAE, then run K passes of the
//! clipped-surrogate update over shuffled minibatches. The combined loss is
//!
//! ```text
//! L = -min(r A, clip(r, 1-eps, 1+eps) A) + c_v (V - R)^2 - c_e H
//! ```
//!
//! averaged over the minibatch, with the buffer's feasibility masks
//! reapplied when recomputing action log-probabilities. Advantages are
//! normalized to zero mean and unit variance per rollout before the update;
//! the bootstrap value at the horizon is 0 because episodes truly end
//! there.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{DomainError, Roster};
use crate::env::{Action, EnvConfig, EnvError, EnvState, FeatureEncoding, TraceRecord};
use crate::numcore::{load_checkpoint, save_checkpoint, AdamConfig, NumError, Tape, Tensor};
use crate::policy::{Policy, PolicyConfig};
use crate::rng::SplitMix64;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("non-finite loss over buffer steps {steps:?}")]
    NonFiniteLoss { steps: Vec<usize> },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Training hyperparameters. Defaults follow the experimental setup:
/// 5000 epochs, 32-step rollouts, 4 PPO epochs, lr 3e-4, gamma 0.99,
/// clip 0.2, value coefficient 0.5, entropy coefficient 0.01.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub rollout_len: usize,
    pub ppo_epochs: usize,
    pub lr: f64,
    pub gamma: f64,
    pub clip_eps: f64,
    /// Value-loss coefficient.
    pub c_v: f64,
    /// Entropy-bonus coefficient.
    pub c_e: f64,
    pub gae_lambda: f64,
    pub minibatch_size: usize,
    pub seed: u64,
    /// Global-norm gradient clip.
    pub clip_norm: f64,
    /// Parallel environment rollouts per epoch. Each worker gets its own
    /// seed derived from the trainer stream, so results are identical to
    /// sequential collection.
    pub workers: usize,
    /// Epochs between periodic checkpoints (a final one is always written).
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5000,
            rollout_len: 32,
            ppo_epochs: 4,
            lr: 3e-4,
            gamma: 0.99,
            clip_eps: 0.2,
            c_v: 0.5,
            c_e: 0.01,
            gae_lambda: 0.95,
            minibatch_size: 32,
            seed: 0,
            clip_norm: 0.5,
            workers: 1,
            checkpoint_interval: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("epochs", self.epochs),
            ("rollout_len", self.rollout_len),
            ("ppo_epochs", self.ppo_epochs),
            ("minibatch_size", self.minibatch_size),
            ("workers", self.workers),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        for (name, v) in [
            ("lr", self.lr),
            ("gamma", self.gamma),
            ("c_v", self.c_v),
            ("c_e", self.c_e),
            ("gae_lambda", self.gae_lambda),
            ("clip_norm", self.clip_norm),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                problems.push(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            problems.push(format!("clip_eps must be in (0, 1), got {}", self.clip_eps));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Validation(problems.join("; ")))
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            clip_norm: self.clip_norm,
            ..AdamConfig::default()
        }
    }
}

/// One transition as PPO sees it.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub encoding: FeatureEncoding,
    /// Flat feasibility mask at decision time.
    pub mask: Vec<bool>,
    pub action_index: usize,
    pub log_prob_old: f64,
    pub reward: f64,
    pub value: f64,
    pub done: bool,
}

#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    pub steps: Vec<StepRecord>,
}

impl RolloutBuffer {
    pub fn new() -> RolloutBuffer {
        RolloutBuffer::default()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn push(&mut self, record: StepRecord) {
        debug_assert!(record.log_prob_old.is_finite());
        self.steps.push(record);
    }

    pub fn extend(&mut self, other: RolloutBuffer) {
        self.steps.extend(other.steps);
    }

    /// Sum of rewards, i.e. the episodic reward when the buffer holds one
    /// episode.
    pub fn episodic_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

/// Roll the policy for `len` steps from a freshly reset state, recording
/// everything the update needs. Optionally appends one trace record per
/// step.
pub fn collect_rollout(
    mut state: EnvState,
    policy: &Policy,
    len: usize,
    rng: &mut SplitMix64,
    mut trace: Option<&mut Vec<TraceRecord>>,
) -> Result<RolloutBuffer, TrainError> {
    let mut buffer = RolloutBuffer::new();
    for _ in 0..len {
        let encoding = state.encode_features();
        let mask_full = state.feasibility_mask();
        let mask = mask_full.flat(policy.config.max_nurses, policy.config.max_patients);
        let out = policy.act(&state, rng)?;
        let outcome = state.step(&out.action)?;
        if let Some(sink) = trace.as_deref_mut() {
            sink.push(TraceRecord {
                t: state.t,
                action: out.action,
                reward: outcome.reward,
                mask_popcount: mask_full.popcount(),
                expired: outcome.info.expired,
            });
        }
        buffer.push(StepRecord {
            encoding,
            mask,
            action_index: out.action_index,
            log_prob_old: out.log_prob,
            reward: outcome.reward,
            value: out.value,
            done: outcome.done,
        });
        state = outcome.state;
    }
    Ok(buffer)
}

/// Generalized advantage estimation with terminal bootstrap 0.
///
/// `A_t = sum_k (gamma * lambda)^k delta_{t+k}` with
/// `delta_t = r_t + gamma * V_{t+1} - V_t`, accumulation cut at episode
/// boundaries; returns are `A_t + V_t`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(TrainError::Validation(format!(
            "length mismatch: {n} rewards, {} values, {} dones",
            values.len(),
            dones.len()
        )));
    }
    let mut advantages = vec![0.0; n];
    let mut gae = 0.0;
    for t in (0..n).rev() {
        let next_value = if dones[t] || t + 1 == n {
            0.0
        } else {
            values[t + 1]
        };
        let delta = rewards[t] + gamma * next_value - values[t];
        gae = delta + gamma * lambda * if dones[t] { 0.0 } else { gae };
        advantages[t] = gae;
    }
    let returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((advantages, returns))
}

/// Shift/scale to zero mean and unit variance (population), guarded for
/// constant inputs.
pub fn normalize_advantages(advantages: &[f64]) -> Vec<f64> {
    let n = advantages.len() as f64;
    let mean = advantages.iter().sum::<f64>() / n;
    let var = advantages
        .iter()
        .map(|a| (a - mean) * (a - mean))
        .sum::<f64>()
        / n;
    let std = var.sqrt() + 1e-8;
    advantages.iter().map(|a| (a - mean) / std).collect()
}

/// Loss statistics averaged over every minibatch of an update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
}

/// K epochs of clipped-surrogate updates over shuffled minibatches.
/// Gradients are zeroed before each minibatch; one Adam step (with
/// global-norm clipping) follows each minibatch.
pub fn ppo_update(
    buffer: &RolloutBuffer,
    policy: &mut Policy,
    config: &TrainConfig,
    rng: &mut SplitMix64,
) -> Result<UpdateStats, TrainError> {
    if buffer.is_empty() {
        return Err(TrainError::Validation("empty rollout buffer".into()));
    }
    let rewards: Vec<f64> = buffer.steps.iter().map(|s| s.reward).collect();
    let values: Vec<f64> = buffer.steps.iter().map(|s| s.value).collect();
    let dones: Vec<bool> = buffer.steps.iter().map(|s| s.done).collect();
    let (raw_advantages, returns) =
        compute_gae(&rewards, &values, &dones, config.gamma, config.gae_lambda)?;

    // Normalize per rollout: episode boundaries delimit segments.
    let mut advantages = vec![0.0; raw_advantages.len()];
    let mut start = 0;
    for t in 0..dones.len() {
        if dones[t] || t + 1 == dones.len() {
            let segment = normalize_advantages(&raw_advantages[start..=t]);
            advantages[start..=t].copy_from_slice(&segment);
            start = t + 1;
        }
    }

    let mut indices: Vec<usize> = (0..buffer.len()).collect();
    let mut totals = UpdateStats::default();
    let mut batches = 0usize;
    for _ in 0..config.ppo_epochs {
        rng.shuffle(&mut indices);
        for chunk in indices.chunks(config.minibatch_size) {
            let stats = ppo_minibatch(buffer, policy, config, chunk, &advantages, &returns)?;
            totals.policy_loss += stats.policy_loss;
            totals.value_loss += stats.value_loss;
            totals.entropy += stats.entropy;
            totals.mean_ratio += stats.mean_ratio;
            totals.clip_fraction += stats.clip_fraction;
            batches += 1;
        }
    }
    let k = batches as f64;
    Ok(UpdateStats {
        policy_loss: totals.policy_loss / k,
        value_loss: totals.value_loss / k,
        entropy: totals.entropy / k,
        mean_ratio: totals.mean_ratio / k,
        clip_fraction: totals.clip_fraction / k,
    })
}

fn ppo_minibatch(
    buffer: &RolloutBuffer,
    policy: &mut Policy,
    config: &TrainConfig,
    chunk: &[usize],
    advantages: &[f64],
    returns: &[f64],
) -> Result<UpdateStats, TrainError> {
    let m = chunk.len();
    let encodings: Vec<&FeatureEncoding> =
        chunk.iter().map(|&i| &buffer.steps[i].encoding).collect();
    let masks: Vec<Vec<bool>> = chunk
        .iter()
        .map(|&i| buffer.steps[i].mask.clone())
        .collect();
    let actions: Vec<usize> = chunk
        .iter()
        .map(|&i| buffer.steps[i].action_index)
        .collect();
    let old_logp: Vec<f64> = chunk
        .iter()
        .map(|&i| buffer.steps[i].log_prob_old)
        .collect();
    let adv: Vec<f64> = chunk.iter().map(|&i| advantages[i]).collect();
    let ret: Vec<f64> = chunk.iter().map(|&i| returns[i]).collect();

    let mut tape = Tape::new();
    let fwd = policy.forward_batch(&mut tape, &encodings, &masks)?;
    let logp_new = tape.gather_rows(fwd.log_probs, &actions)?;
    let logp_old = tape.constant(Tensor::from_vec(&[m, 1], old_logp)?);
    let adv_t = tape.constant(Tensor::from_vec(&[m, 1], adv)?);
    let ret_t = tape.constant(Tensor::from_vec(&[m, 1], ret)?);

    let diff = tape.sub(logp_new, logp_old)?;
    let ratio = tape.exp(diff);
    let surr1 = tape.mul(ratio, adv_t)?;
    let clipped = tape.clip(ratio, 1.0 - config.clip_eps, 1.0 + config.clip_eps);
    let surr2 = tape.mul(clipped, adv_t)?;
    let surr = tape.min_elem(surr1, surr2)?;
    let surr_mean = tape.mean(surr);
    let policy_loss = tape.neg(surr_mean);

    let verr = tape.sub(fwd.value, ret_t)?;
    let vsq = tape.mul(verr, verr)?;
    let value_loss = tape.mean(vsq);

    let ent_mean = tape.mean(fwd.entropy);

    let v_term = tape.scale(value_loss, config.c_v);
    let e_term = tape.scale(ent_mean, -config.c_e);
    let partial = tape.add(policy_loss, v_term)?;
    let loss = tape.add(partial, e_term)?;

    if !tape.value(loss).item().is_finite() {
        let bad: Vec<usize> = chunk
            .iter()
            .enumerate()
            .filter(|&(row, _)| {
                !tape.value(logp_new).data()[row].is_finite()
                    || !tape.value(fwd.value).data()[row].is_finite()
            })
            .map(|(_, &i)| i)
            .collect();
        let steps = if bad.is_empty() { chunk.to_vec() } else { bad };
        return Err(TrainError::NonFiniteLoss { steps });
    }

    policy.store.zero_grads();
    tape.backward(loss, &mut policy.store)?;
    policy.store.adam_step(&config.adam())?;
    // leave the store clean so checkpoints never carry stale gradients
    policy.store.zero_grads();

    let ratios = tape.value(ratio).data();
    let mean_ratio = ratios.iter().sum::<f64>() / m as f64;
    let clip_fraction = ratios
        .iter()
        .filter(|&&r| (r - 1.0).abs() > config.clip_eps)
        .count() as f64
        / m as f64;
    Ok(UpdateStats {
        policy_loss: tape.value(policy_loss).item(),
        value_loss: tape.value(value_loss).item(),
        entropy: tape.value(ent_mean).item(),
        mean_ratio,
        clip_fraction,
    })
}

/// Per-epoch training log row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// 1-based epoch index.
    pub epoch: usize,
    /// Sum of rewards over the epoch's episode (mean across workers).
    pub episodic_reward: f64,
    pub update: UpdateStats,
}

pub const METRICS_HEADER: &str =
    "epoch,episodic_reward,policy_loss,value_loss,entropy,mean_ratio,clip_fraction";

impl EpochStats {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.episodic_reward,
            self.update.policy_loss,
            self.update.value_loss,
            self.update.entropy,
            self.update.mean_ratio,
            self.update.clip_fraction
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    epoch: usize,
    rng_state: u64,
    train_config: TrainConfig,
    env_config: EnvConfig,
    policy_config: PolicyConfig,
}

/// Owns the policy, the environment setup, and the RNG stream that drives
/// per-epoch seeds and minibatch shuffles. Fully deterministic given the
/// root seed, and resumable from a checkpoint.
pub struct Trainer {
    pub policy: Policy,
    pub train_config: TrainConfig,
    pub env_config: EnvConfig,
    roster: Roster,
    rng: SplitMix64,
    epoch: usize,
}

impl Trainer {
    pub fn new(
        train_config: TrainConfig,
        env_config: EnvConfig,
        policy_config: PolicyConfig,
        roster: Roster,
    ) -> Result<Trainer, TrainError> {
        train_config.validate()?;
        env_config.validate()?;
        let policy = Policy::new(policy_config, train_config.seed)?;
        let rng = SplitMix64::new(train_config.seed);
        Ok(Trainer {
            policy,
            train_config,
            env_config,
            roster,
            rng,
            epoch: 0,
        })
    }

    /// Completed epochs so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn roster(&self) -> &Roster {
        &self.roster
    }

    /// Collect rollouts (one per worker), then run the PPO update.
    pub fn run_epoch(&mut self) -> Result<EpochStats, TrainError> {
        let mut buffer = RolloutBuffer::new();
        let mut episodic = 0.0;
        for _ in 0..self.train_config.workers {
            let env_seed = self.rng.next_u64();
            let mut act_rng = SplitMix64::new(self.rng.next_u64());
            let state = EnvState::reset(env_seed, &self.roster, &self.env_config)?;
            let rollout = collect_rollout(
                state,
                &self.policy,
                self.train_config.rollout_len,
                &mut act_rng,
                None,
            )?;
            episodic += rollout.episodic_reward();
            buffer.extend(rollout);
        }
        episodic /= self.train_config.workers as f64;
        let update = ppo_update(&buffer, &mut self.policy, &self.train_config, &mut self.rng)?;
        self.epoch += 1;
        Ok(EpochStats {
            epoch: self.epoch,
            episodic_reward: episodic,
            update,
        })
    }

    /// Train until `train_config.epochs`, appending one CSV row per epoch
    /// to `metrics` and checkpointing into `checkpoint_dir` when given.
    pub fn train<W: Write>(
        &mut self,
        metrics: &mut W,
        checkpoint_dir: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochStats),
    ) -> Result<(), TrainError> {
        let io_err = |e: std::io::Error| TrainError::Io {
            path: PathBuf::from("<metrics stream>"),
            source: e,
        };
        while self.epoch < self.train_config.epochs {
            let stats = self.run_epoch()?;
            writeln!(metrics, "{}", stats.csv_row()).map_err(io_err)?;
            on_epoch(&stats);
            if let Some(dir) = checkpoint_dir {
                let interval = self.train_config.checkpoint_interval;
                if interval > 0
                    && self.epoch % interval == 0
                    && self.epoch < self.train_config.epochs
                {
                    self.save_checkpoint(&dir.join(format!("ckpt_{:06}.bin", self.epoch)))?;
                }
            }
        }
        if let Some(dir) = checkpoint_dir {
            self.save_checkpoint(&dir.join("final.bin"))?;
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), TrainError> {
        let meta = CheckpointMeta {
            epoch: self.epoch,
            rng_state: self.rng.state(),
            train_config: self.train_config,
            env_config: self.env_config.clone(),
            policy_config: self.policy.config,
        };
        let meta = serde_json::to_string(&meta)
            .map_err(|e| TrainError::Validation(format!("meta serialization: {e}")))?;
        save_checkpoint(&self.policy.store, &meta, path)?;
        Ok(())
    }

    /// Restore a trainer mid-run: parameters, optimizer moments, epoch
    /// counter, and the RNG stream all continue exactly where they left
    /// off.
    pub fn from_checkpoint(path: &Path, roster: Roster) -> Result<Trainer, TrainError> {
        let (store, meta) = load_checkpoint(path)?;
        let meta: CheckpointMeta = serde_json::from_str(&meta)
            .map_err(|e| TrainError::Validation(format!("checkpoint meta does not parse: {e}")))?;
        let policy = Policy::from_parts(meta.policy_config, store)?;
        Ok(Trainer {
            policy,
            train_config: meta.train_config,
            env_config: meta.env_config,
            roster,
            rng: SplitMix64::from_state(meta.rng_state),
            epoch: meta.epoch,
        })
    }
}

/// Load just the policy (+ its env config) from a checkpoint, for
/// evaluation.
pub fn load_policy_checkpoint(path: &Path) -> Result<(Policy, EnvConfig), TrainError> {
    let (store, meta) = load_checkpoint(path)?;
    let meta: CheckpointMeta = serde_json::from_str(&meta)
        .map_err(|e| TrainError::Validation(format!("checkpoint meta does not parse: {e}")))?;
    let policy = Policy::from_parts(meta.policy_config, store)?;
    Ok((policy, meta.env_config))
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Anything that can pick an action for a state: trained policies and the
/// heuristic baselines share this surface.
pub trait Agent {
    fn choose(&mut self, state: &EnvState) -> Result<Action, TrainError>;
}

/// Greedy (argmax) wrapper around a trained policy.
pub struct GreedyPolicyAgent<'a> {
    pub policy: &'a Policy,
}

impl Agent for GreedyPolicyAgent<'_> {
    fn choose(&mut self, state: &EnvState) -> Result<Action, TrainError> {
        Ok(self.policy.act_greedy(state)?.action)
    }
}

/// Aggregate evaluation metrics over a batch of episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub episodes: usize,
    /// Mean episodic reward.
    pub mean_reward: f64,
    /// Fraction of assignments whose nurse matched at least one required
    /// skill.
    pub skill_match_rate: f64,
    /// Mean total travel distance per episode, km.
    pub mean_travel_km: f64,
    /// Mean expired patients per episode.
    pub expirations: f64,
    /// Mean nurse fatigue at episode end, minutes.
    pub mean_fatigue: f64,
    /// Per-episode reward sums, in episode order.
    pub episode_rewards: Vec<f64>,
}

/// Run `episodes` fixed-horizon episodes under the agent's action choices.
/// Per-episode seeds derive from `seed`, so results are reproducible and
/// the environment streams are identical across agents evaluated with the
/// same seed.
pub fn evaluate(
    agent: &mut dyn Agent,
    roster: &Roster,
    env_config: &EnvConfig,
    episodes: usize,
    seed: u64,
    mut trace: Option<&mut Vec<TraceRecord>>,
) -> Result<EvalMetrics, TrainError> {
    let mut rng = SplitMix64::new(seed);
    let mut episode_rewards = Vec::with_capacity(episodes);
    let mut matched = 0usize;
    let mut assignments = 0usize;
    let mut travel = 0.0;
    let mut expired = 0usize;
    let mut fatigue_sum = 0.0;
    for _ in 0..episodes {
        let env_seed = rng.next_u64();
        let mut state = EnvState::reset(env_seed, roster, env_config)?;
        let mut total = 0.0;
        loop {
            let action = agent.choose(&state)?;
            let popcount = state.feasibility_mask().popcount();
            let outcome = state.step(&action)?;
            total += outcome.reward;
            if let Action::Assign { .. } = action {
                assignments += 1;
                if outcome.info.skill_match > 0 {
                    matched += 1;
                }
                travel += outcome.info.travel_km;
            }
            if let Some(sink) = trace.as_deref_mut() {
                sink.push(TraceRecord {
                    t: state.t,
                    action,
                    reward: outcome.reward,
                    mask_popcount: popcount,
                    expired: outcome.info.expired,
                });
            }
            state = outcome.state;
            if outcome.done {
                break;
            }
        }
        expired += state.expired_total;
        fatigue_sum +=
            state.nurses.iter().map(|n| n.fatigue).sum::<f64>() / state.nurses.len() as f64;
        episode_rewards.push(total);
    }
    let n = episodes as f64;
    Ok(EvalMetrics {
        episodes,
        mean_reward: episode_rewards.iter().sum::<f64>() / n,
        skill_match_rate: if assignments == 0 {
            0.0
        } else {
            matched as f64 / assignments as f64
        },
        mean_travel_km: travel / n,
        expirations: expired as f64 / n,
        mean_fatigue: fatigue_sum / n,
        episode_rewards,
    })
}
