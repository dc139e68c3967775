//! Run configuration: JSON file, flag overrides, built-in defaults.
//!
//! Precedence is CLI flag > config file > default. The config file is a
//! single JSON object in which every key is optional; unknown keys are
//! rejected so typos surface as errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use nursesched::domain::Region;
use nursesched::env::EnvConfig;
use nursesched::policy::PolicyConfig;
use nursesched::ppo::TrainConfig;

/// Seed fallback used when neither `--seed` nor the config file set one.
pub const SEED_ENV_VAR: &str = "NURSESCHED_SEED";

/// Seed used to synthesize the default roster when no nurses file is given.
pub const DEFAULT_DATA_SEED: u64 = 42;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    // training
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub rollout_len: Option<usize>,
    pub ppo_epochs: Option<usize>,
    pub lr: Option<f64>,
    pub gamma: Option<f64>,
    pub clip_eps: Option<f64>,
    pub c_v: Option<f64>,
    pub c_e: Option<f64>,
    pub gae_lambda: Option<f64>,
    pub minibatch_size: Option<usize>,
    pub clip_norm: Option<f64>,
    pub workers: Option<usize>,
    pub checkpoint_interval: Option<usize>,
    // model
    pub hidden_dim: Option<usize>,
    pub n_heads: Option<usize>,
    pub n_layers: Option<usize>,
    pub standard_block: Option<bool>,
    // environment
    pub max_nurses: Option<usize>,
    pub max_patients: Option<usize>,
    pub step_minutes: Option<f64>,
    pub travel_speed_kmh: Option<f64>,
    pub fatigue_decay_per_step: Option<f64>,
    pub d_max_km: Option<f64>,
    pub max_shift_minutes: Option<f64>,
    pub continuity_weight: Option<f64>,
    pub lambda: Option<f64>,
    pub urgency_probs: Option<[f64; 3]>,
    pub care_probs: Option<[f64; 3]>,
    pub continuity_prob: Option<f64>,
    pub region: Option<Region>,
    // data
    pub data_seed: Option<u64>,
    pub nurses: Option<PathBuf>,
    pub constraints: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))
    }
}

/// Flag-level overrides, already parsed by clap.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub workers: Option<usize>,
    pub lr: Option<f64>,
    pub nurses: Option<PathBuf>,
    pub constraints: Option<PathBuf>,
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub rollout_len: usize,
    pub ppo_epochs: usize,
    pub lr: f64,
    pub gamma: f64,
    pub clip_eps: f64,
    pub c_v: f64,
    pub c_e: f64,
    pub gae_lambda: f64,
    pub minibatch_size: usize,
    pub clip_norm: f64,
    pub workers: usize,
    pub checkpoint_interval: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub standard_block: bool,
    pub max_nurses: usize,
    pub max_patients: usize,
    pub data_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nurses: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub constraints: Option<PathBuf>,
    #[serde(skip)]
    pub env: EnvConfig,
}

/// Merge defaults, file values, flag overrides, and the seed env fallback.
pub fn resolve(file: FileConfig, flags: Overrides) -> RunConfig {
    let train = TrainConfig::default();
    let policy = PolicyConfig::default();
    let mut env = EnvConfig::default();

    let env_seed = std::env::var(SEED_ENV_VAR)
        .ok()
        .and_then(|s| s.parse::<u64>().ok());
    let seed = flags.seed.or(file.seed).or(env_seed).unwrap_or(train.seed);

    if let Some(v) = file.step_minutes {
        env.step_minutes = v;
    }
    if let Some(v) = file.travel_speed_kmh {
        env.travel_speed_kmh = v;
    }
    if let Some(v) = file.fatigue_decay_per_step {
        env.fatigue_decay_per_step = v;
    }
    if let Some(v) = file.d_max_km {
        env.constraints.d_max_km = v;
    }
    if let Some(v) = file.max_shift_minutes {
        env.constraints.max_shift_minutes = v;
    }
    if let Some(v) = file.continuity_weight {
        env.constraints.continuity_weight = v;
    }
    if let Some(v) = file.lambda {
        env.arrivals.lambda = v;
    }
    if let Some(v) = file.urgency_probs {
        env.arrivals.urgency_probs = v;
    }
    if let Some(v) = file.care_probs {
        env.arrivals.care_probs = v;
    }
    if let Some(v) = file.continuity_prob {
        env.arrivals.continuity_prob = v;
    }
    if let Some(v) = file.region {
        env.arrivals.region = v;
    }
    env.max_nurses = file.max_nurses.unwrap_or(env.max_nurses);
    env.max_patients = file.max_patients.unwrap_or(env.max_patients);

    let rollout_len = file.rollout_len.unwrap_or(train.rollout_len);
    // one rollout = one episode
    env.horizon = rollout_len;

    RunConfig {
        seed,
        epochs: flags.epochs.or(file.epochs).unwrap_or(train.epochs),
        rollout_len,
        ppo_epochs: file.ppo_epochs.unwrap_or(train.ppo_epochs),
        lr: flags.lr.or(file.lr).unwrap_or(train.lr),
        gamma: file.gamma.unwrap_or(train.gamma),
        clip_eps: file.clip_eps.unwrap_or(train.clip_eps),
        c_v: file.c_v.unwrap_or(train.c_v),
        c_e: file.c_e.unwrap_or(train.c_e),
        gae_lambda: file.gae_lambda.unwrap_or(train.gae_lambda),
        minibatch_size: file.minibatch_size.unwrap_or(train.minibatch_size),
        clip_norm: file.clip_norm.unwrap_or(train.clip_norm),
        workers: flags.workers.or(file.workers).unwrap_or(train.workers),
        checkpoint_interval: file
            .checkpoint_interval
            .unwrap_or(train.checkpoint_interval),
        hidden_dim: file.hidden_dim.unwrap_or(policy.d_h),
        n_heads: file.n_heads.unwrap_or(policy.n_heads),
        n_layers: file.n_layers.unwrap_or(policy.n_layers),
        standard_block: file.standard_block.unwrap_or(policy.standard_block),
        max_nurses: env.max_nurses,
        max_patients: env.max_patients,
        data_seed: file.data_seed.unwrap_or(DEFAULT_DATA_SEED),
        nurses: flags.nurses.or(file.nurses),
        constraints: flags.constraints.or(file.constraints),
        env,
    }
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            rollout_len: self.rollout_len,
            ppo_epochs: self.ppo_epochs,
            lr: self.lr,
            gamma: self.gamma,
            clip_eps: self.clip_eps,
            c_v: self.c_v,
            c_e: self.c_e,
            gae_lambda: self.gae_lambda,
            minibatch_size: self.minibatch_size,
            seed: self.seed,
            clip_norm: self.clip_norm,
            workers: self.workers,
            checkpoint_interval: self.checkpoint_interval,
        }
    }

    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            d_h: self.hidden_dim,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            max_nurses: self.max_nurses,
            max_patients: self.max_patients,
            standard_block: self.standard_block,
            ..PolicyConfig::default()
        }
    }
}
