//! Attention-based actor-critic over the bipartite scheduling state.
//!
//! Nurse and patient feature rows are projected into a shared latent space
//! by two independent linear encoders, tagged with learnable positional
//! vectors, and processed by a stack of transformer blocks whose attention
//! spans the concatenated nurse+patient token sequence. One block computes
//!
//! ```text
//! H_next = LayerNorm(H + MHSA(H)) + FFN(H)
//! ```
//!
//! with the feedforward branch applied to the block input. This is the
//! propagation rule implemented verbatim; set
//! [`PolicyConfig::standard_block`] for the conventional post-norm
//! transformer block instead.
//!
//! The actor scores each nurse-patient pair as
//! `phi^T tanh(W_n h_n + W_p h_p + W_e e_np)` plus a learned scalar logit
//! for the null action, masks infeasible entries to exactly zero
//! probability, and samples. The critic maps the masked mean of all token
//! embeddings through `w^T tanh(W h + b)`.
//!
//! Forward passes for a whole minibatch of states run on one tape with the
//! steps stacked row-wise, which keeps the matrix products large enough to
//! be efficient on a single core.

use serde::{Deserialize, Serialize};

use crate::env::{
    Action, EnvState, FeatureEncoding, EDGE_FEATURES, NURSE_FEATURES, PATIENT_FEATURES,
};
use crate::numcore::{gaussian, xavier_uniform, NumError, ParamStore, Tape, Tensor, Var};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Hidden width of the shared latent space.
    pub d_h: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Per-slot feature widths, matching the environment encoding.
    pub d_n: usize,
    pub d_p: usize,
    pub d_e: usize,
    pub max_nurses: usize,
    pub max_patients: usize,
    /// Use the conventional post-norm transformer block instead of the
    /// literal propagation rule.
    pub standard_block: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            d_h: 128,
            n_heads: 4,
            n_layers: 2,
            d_n: NURSE_FEATURES,
            d_p: PATIENT_FEATURES,
            d_e: EDGE_FEATURES,
            max_nurses: 12,
            max_patients: 8,
            standard_block: false,
        }
    }
}

impl PolicyConfig {
    /// A small variant for tests: full architecture, desk-toy widths.
    pub fn tiny() -> Self {
        PolicyConfig {
            d_h: 16,
            n_heads: 2,
            n_layers: 1,
            ..PolicyConfig::default()
        }
    }

    pub fn tokens(&self) -> usize {
        self.max_nurses + self.max_patients
    }

    /// Pair slots plus the null action.
    pub fn action_slots(&self) -> usize {
        self.max_nurses * self.max_patients + 1
    }

    pub fn validate(&self) -> Result<(), NumError> {
        if self.d_h == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return Err(NumError::Validation(
                "d_h, n_heads and n_layers must be positive".into(),
            ));
        }
        if self.d_h % self.n_heads != 0 {
            return Err(NumError::Validation(format!(
                "d_h {} not divisible by n_heads {}",
                self.d_h, self.n_heads
            )));
        }
        if self.max_nurses == 0 || self.max_patients == 0 {
            return Err(NumError::Validation("empty slot dimensions".into()));
        }
        Ok(())
    }
}

/// Sampled decision with the diagnostics PPO needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActOutput {
    pub action: Action,
    /// Index into the flat action space (pair slots then null).
    pub action_index: usize,
    pub log_prob: f64,
    pub value: f64,
    pub entropy: f64,
}

/// Tape handles from one batched forward pass.
pub struct PolicyForward {
    /// `(batch * tokens) x d_h` contextual embeddings.
    pub embeddings: Var,
    /// `batch x action_slots` raw actor logits (pre-masking).
    pub logits: Var,
    /// `batch x action_slots`; infeasible entries exactly 0.
    pub probs: Var,
    /// `batch x action_slots`; masked slots hold 0 placeholders.
    pub log_probs: Var,
    /// `batch x 1` state values.
    pub value: Var,
    /// `batch x 1` per-state policy entropy.
    pub entropy: Var,
}

/// Learnable weights plus the architecture description.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub config: PolicyConfig,
    pub store: ParamStore,
}

impl Policy {
    /// Fresh parameters: Glorot-uniform linear maps, N(0, 0.02) positional
    /// table, unit layer-norm gains, zero biases and null logit.
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Policy, NumError> {
        config.validate()?;
        let mut rng = SplitMix64::new(seed);
        let mut store = ParamStore::new();
        let d = config.d_h;

        store.insert("encoder.nurse.w", xavier_uniform(&mut rng, config.d_n, d))?;
        store.insert("encoder.nurse.b", Tensor::zeros(&[1, d]))?;
        store.insert("encoder.patient.w", xavier_uniform(&mut rng, config.d_p, d))?;
        store.insert("encoder.patient.b", Tensor::zeros(&[1, d]))?;
        store.insert(
            "encoder.pos",
            gaussian(&mut rng, &[config.tokens(), d], 0.02),
        )?;
        for l in 0..config.n_layers {
            let p = format!("encoder.layer{l}");
            store.insert(&format!("{p}.attn.wq"), xavier_uniform(&mut rng, d, d))?;
            store.insert(&format!("{p}.attn.wk"), xavier_uniform(&mut rng, d, d))?;
            store.insert(&format!("{p}.attn.wv"), xavier_uniform(&mut rng, d, d))?;
            store.insert(&format!("{p}.attn.wo"), xavier_uniform(&mut rng, d, d))?;
            store.insert(
                &format!("{p}.ln1.gain"),
                Tensor::from_vec(&[1, d], vec![1.0; d])?,
            )?;
            store.insert(&format!("{p}.ln1.bias"), Tensor::zeros(&[1, d]))?;
            if config.standard_block {
                store.insert(
                    &format!("{p}.ln2.gain"),
                    Tensor::from_vec(&[1, d], vec![1.0; d])?,
                )?;
                store.insert(&format!("{p}.ln2.bias"), Tensor::zeros(&[1, d]))?;
            }
            store.insert(&format!("{p}.ffn.w1"), xavier_uniform(&mut rng, d, 4 * d))?;
            store.insert(&format!("{p}.ffn.b1"), Tensor::zeros(&[1, 4 * d]))?;
            store.insert(&format!("{p}.ffn.w2"), xavier_uniform(&mut rng, 4 * d, d))?;
            store.insert(&format!("{p}.ffn.b2"), Tensor::zeros(&[1, d]))?;
        }
        store.insert("actor.wn", xavier_uniform(&mut rng, d, d))?;
        store.insert("actor.wp", xavier_uniform(&mut rng, d, d))?;
        store.insert("actor.we", xavier_uniform(&mut rng, config.d_e, d))?;
        store.insert("actor.phi", xavier_uniform(&mut rng, d, 1))?;
        store.insert("actor.null_logit", Tensor::zeros(&[1, 1]))?;
        store.insert("critic.w", xavier_uniform(&mut rng, d, d))?;
        store.insert("critic.b", Tensor::zeros(&[1, d]))?;
        store.insert("critic.v", xavier_uniform(&mut rng, d, 1))?;

        Ok(Policy { config, store })
    }

    /// Rebuild from a restored parameter store, verifying the inventory.
    pub fn from_parts(config: PolicyConfig, store: ParamStore) -> Result<Policy, NumError> {
        let reference = Policy::new(config, 0)?;
        if reference.store.len() != store.len() {
            return Err(NumError::Validation(format!(
                "checkpoint has {} parameters, config expects {}",
                store.len(),
                reference.store.len()
            )));
        }
        for name in reference.store.names() {
            let expected = reference.store.get(name).unwrap().shape();
            let got = store
                .get(name)
                .ok_or_else(|| NumError::Validation(format!("checkpoint missing {name:?}")))?
                .shape();
            if expected != got {
                return Err(NumError::Validation(format!(
                    "parameter {name:?} has shape {got:?}, config expects {expected:?}"
                )));
            }
        }
        Ok(Policy { config, store })
    }

    pub fn describe(&self) -> String {
        self.store.describe()
    }

    // -- forward pieces ----------------------------------------------------

    /// Token presence vector for a batch, `batch * tokens` long.
    fn batch_presence(&self, encodings: &[&FeatureEncoding]) -> Vec<bool> {
        let mut presence = Vec::with_capacity(encodings.len() * self.config.tokens());
        for enc in encodings {
            presence.extend_from_slice(&enc.nurse_present);
            presence.extend_from_slice(&enc.patient_present);
        }
        presence
    }

    /// Run the encoder over a batch of states stacked row-wise; returns
    /// `(batch * tokens) x d_h` embeddings.
    pub fn encode_batch(
        &self,
        tape: &mut Tape,
        encodings: &[&FeatureEncoding],
    ) -> Result<Var, NumError> {
        let cfg = &self.config;
        let batch = encodings.len();
        if batch == 0 {
            return Err(NumError::Contract("encode_batch of zero states".into()));
        }
        let (n, p, t) = (cfg.max_nurses, cfg.max_patients, cfg.tokens());
        for enc in encodings {
            if enc.nurse_features.shape() != [n, cfg.d_n]
                || enc.patient_features.shape() != [p, cfg.d_p]
            {
                return Err(NumError::Shape(format!(
                    "encoding shapes {:?}/{:?} do not match config [{n}, {}]/[{p}, {}]",
                    enc.nurse_features.shape(),
                    enc.patient_features.shape(),
                    cfg.d_n,
                    cfg.d_p
                )));
            }
        }

        // Stack raw features across the batch.
        let mut nurse_rows = Vec::with_capacity(batch * n * cfg.d_n);
        let mut patient_rows = Vec::with_capacity(batch * p * cfg.d_p);
        for enc in encodings {
            nurse_rows.extend_from_slice(enc.nurse_features.data());
            patient_rows.extend_from_slice(enc.patient_features.data());
        }
        let nurse_feats = tape.constant(Tensor::from_vec(&[batch * n, cfg.d_n], nurse_rows)?);
        let patient_feats = tape.constant(Tensor::from_vec(&[batch * p, cfg.d_p], patient_rows)?);

        // Independent linear encoders into the shared latent space.
        let wn = tape.param(&self.store, "encoder.nurse.w")?;
        let bn = tape.param(&self.store, "encoder.nurse.b")?;
        let wp = tape.param(&self.store, "encoder.patient.w")?;
        let bp = tape.param(&self.store, "encoder.patient.b")?;
        let hn = tape.matmul(nurse_feats, wn)?;
        let hn = tape.add_row(hn, bn)?;
        let hp = tape.matmul(patient_feats, wp)?;
        let hp = tape.add_row(hp, bp)?;

        // Per-state token sequence [nurses, patients] + positional table.
        let h0 = tape.interleave_row_blocks(hn, hp, n, p)?;
        let pos = tape.param(&self.store, "encoder.pos")?;
        let pos_tiled = tape.tile_row_blocks(pos, t, batch)?;
        let mut h = tape.add(h0, pos_tiled)?;

        // Attention mask: keys limited to present tokens, identical for
        // every query row of a state.
        let presence = self.batch_presence(encodings);
        let mut key_masks: Vec<Vec<bool>> = Vec::with_capacity(batch);
        for s in 0..batch {
            let slice = &presence[s * t..(s + 1) * t];
            let mut m = Vec::with_capacity(t * t);
            for _ in 0..t {
                m.extend_from_slice(slice);
            }
            key_masks.push(m);
        }

        let head_dim = cfg.d_h / cfg.n_heads;
        let scale = 1.0 / (cfg.d_h as f64).sqrt();
        for l in 0..cfg.n_layers {
            let prefix = format!("encoder.layer{l}");
            let wq = tape.param(&self.store, &format!("{prefix}.attn.wq"))?;
            let wk = tape.param(&self.store, &format!("{prefix}.attn.wk"))?;
            let wv = tape.param(&self.store, &format!("{prefix}.attn.wv"))?;
            let wo = tape.param(&self.store, &format!("{prefix}.attn.wo"))?;
            let q = tape.matmul(h, wq)?;
            let k = tape.matmul(h, wk)?;
            let v = tape.matmul(h, wv)?;

            let mut per_state = Vec::with_capacity(batch);
            for s in 0..batch {
                let qs = tape.slice_rows(q, s * t, t)?;
                let ks = tape.slice_rows(k, s * t, t)?;
                let vs = tape.slice_rows(v, s * t, t)?;
                let mut heads = Vec::with_capacity(cfg.n_heads);
                for hh in 0..cfg.n_heads {
                    let qh = tape.slice_cols(qs, hh * head_dim, head_dim)?;
                    let kh = tape.slice_cols(ks, hh * head_dim, head_dim)?;
                    let vh = tape.slice_cols(vs, hh * head_dim, head_dim)?;
                    let kt = tape.transpose(kh);
                    let scores = tape.matmul(qh, kt)?;
                    let scaled = tape.scale(scores, scale);
                    let attn = tape.masked_softmax(scaled, &key_masks[s])?;
                    heads.push(tape.matmul(attn, vh)?);
                }
                let mut cat = heads[0];
                for &head in &heads[1..] {
                    cat = tape.concat_cols(cat, head)?;
                }
                per_state.push(cat);
            }
            let attn_all = tape.concat_rows_n(&per_state)?;
            let attn_out = tape.matmul(attn_all, wo)?;

            let sum1 = tape.add(h, attn_out)?;
            let g1 = tape.param(&self.store, &format!("{prefix}.ln1.gain"))?;
            let b1 = tape.param(&self.store, &format!("{prefix}.ln1.bias"))?;
            let normed = tape.layer_norm(sum1, g1, b1)?;

            let ffn_in = if cfg.standard_block { normed } else { h };
            let w1 = tape.param(&self.store, &format!("{prefix}.ffn.w1"))?;
            let fb1 = tape.param(&self.store, &format!("{prefix}.ffn.b1"))?;
            let w2 = tape.param(&self.store, &format!("{prefix}.ffn.w2"))?;
            let fb2 = tape.param(&self.store, &format!("{prefix}.ffn.b2"))?;
            let f1 = tape.matmul(ffn_in, w1)?;
            let f1 = tape.add_row(f1, fb1)?;
            let f1 = tape.relu(f1);
            let f2 = tape.matmul(f1, w2)?;
            let f2 = tape.add_row(f2, fb2)?;

            h = if cfg.standard_block {
                let sum2 = tape.add(normed, f2)?;
                let g2 = tape.param(&self.store, &format!("{prefix}.ln2.gain"))?;
                let b2 = tape.param(&self.store, &format!("{prefix}.ln2.bias"))?;
                tape.layer_norm(sum2, g2, b2)?
            } else {
                tape.add(normed, f2)?
            };
        }
        Ok(h)
    }

    /// Contextual embeddings for one state: `tokens x d_h`.
    pub fn encode(&self, tape: &mut Tape, enc: &FeatureEncoding) -> Result<Var, NumError> {
        self.encode_batch(tape, &[enc])
    }

    /// Pair-compatibility logits plus the null logit for a batch:
    /// `batch x action_slots`, pair slots in nurse-major order.
    fn score_pairs_batch(
        &self,
        tape: &mut Tape,
        h: Var,
        encodings: &[&FeatureEncoding],
    ) -> Result<Var, NumError> {
        let cfg = &self.config;
        let batch = encodings.len();
        let (n, p, t) = (cfg.max_nurses, cfg.max_patients, cfg.tokens());

        let mut edge_rows = Vec::with_capacity(batch * n * p * cfg.d_e);
        for enc in encodings {
            if enc.edge_features.shape() != [n * p, cfg.d_e] {
                return Err(NumError::Shape(format!(
                    "edge features {:?} do not match config [{}, {}]",
                    enc.edge_features.shape(),
                    n * p,
                    cfg.d_e
                )));
            }
            edge_rows.extend_from_slice(enc.edge_features.data());
        }
        let edges = tape.constant(Tensor::from_vec(&[batch * n * p, cfg.d_e], edge_rows)?);

        let h_nurse = tape.slice_row_blocks(h, t, 0, n)?;
        let h_patient = tape.slice_row_blocks(h, t, n, p)?;

        let wn = tape.param(&self.store, "actor.wn")?;
        let wp = tape.param(&self.store, "actor.wp")?;
        let we = tape.param(&self.store, "actor.we")?;
        let phi = tape.param(&self.store, "actor.phi")?;

        let a = tape.matmul(h_nurse, wn)?;
        let b = tape.matmul(h_patient, wp)?;
        let e = tape.matmul(edges, we)?;
        let a_rep = tape.repeat_rows(a, p);
        let b_til = tape.tile_row_blocks(b, p, n)?;
        let ab = tape.add(a_rep, b_til)?;
        let abe = tape.add(ab, e)?;
        let scored = tape.tanh(abe);
        let z = tape.matmul(scored, phi)?;
        let z = tape.reshape(z, &[batch, n * p])?;

        let null = tape.param(&self.store, "actor.null_logit")?;
        let null_col = tape.tile_row_blocks(null, 1, batch)?;
        tape.concat_cols(z, null_col)
    }

    /// Single-state actor logits: `1 x action_slots`.
    pub fn score_pairs(
        &self,
        tape: &mut Tape,
        h: Var,
        enc: &FeatureEncoding,
    ) -> Result<Var, NumError> {
        self.score_pairs_batch(tape, h, &[enc])
    }

    fn value_batch(&self, tape: &mut Tape, h: Var, presence: &[bool]) -> Result<Var, NumError> {
        let pooled = tape.mean_pool_blocks(h, presence, self.config.tokens())?;
        let w = tape.param(&self.store, "critic.w")?;
        let b = tape.param(&self.store, "critic.b")?;
        let v = tape.param(&self.store, "critic.v")?;
        let z = tape.matmul(pooled, w)?;
        let z = tape.add_row(z, b)?;
        let z = tape.tanh(z);
        tape.matmul(z, v)
    }

    /// Critic value for one state's embeddings, given token presence.
    pub fn value(&self, tape: &mut Tape, h: Var, presence: &[bool]) -> Result<Var, NumError> {
        self.value_batch(tape, h, presence)
    }

    /// Full forward pass over a batch of states with their flat feasibility
    /// masks (length `action_slots` each).
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        encodings: &[&FeatureEncoding],
        masks: &[Vec<bool>],
    ) -> Result<PolicyForward, NumError> {
        let cfg = &self.config;
        let batch = encodings.len();
        if masks.len() != batch {
            return Err(NumError::Contract(format!(
                "{} masks for {batch} encodings",
                masks.len()
            )));
        }
        let slots = cfg.action_slots();
        let mut flat_mask = Vec::with_capacity(batch * slots);
        for m in masks {
            if m.len() != slots {
                return Err(NumError::Shape(format!(
                    "flat mask length {} does not match {slots} action slots",
                    m.len()
                )));
            }
            flat_mask.extend_from_slice(m);
        }

        let h = self.encode_batch(tape, encodings)?;
        let logits = self.score_pairs_batch(tape, h, encodings)?;
        let probs = tape.masked_softmax(logits, &flat_mask)?;
        let log_probs = tape.masked_log_softmax(logits, &flat_mask)?;
        let presence = self.batch_presence(encodings);
        let value = self.value_batch(tape, h, &presence)?;

        // Per-state entropy: -sum_a p_a log p_a; masked slots contribute
        // exactly 0 on both factors.
        let plogp = tape.mul(probs, log_probs)?;
        let ones = tape.constant(Tensor::from_vec(&[slots, 1], vec![1.0; slots])?);
        let ent = tape.matmul(plogp, ones)?;
        let entropy = tape.neg(ent);

        Ok(PolicyForward {
            embeddings: h,
            logits,
            probs,
            log_probs,
            value,
            entropy,
        })
    }

    /// Decode a flat action index into an environment action.
    pub fn action_from_index(&self, index: usize) -> Action {
        let p = self.config.max_patients;
        if index == self.config.max_nurses * p {
            Action::Null
        } else {
            Action::Assign {
                nurse: index / p,
                patient: index % p,
            }
        }
    }

    fn act_inner(
        &self,
        state: &EnvState,
        mut pick: impl FnMut(&[f64], &[bool]) -> usize,
    ) -> Result<ActOutput, NumError> {
        let enc = state.encode_features();
        let mask = state
            .feasibility_mask()
            .flat(self.config.max_nurses, self.config.max_patients);
        let mut tape = Tape::new();
        let fwd = self.forward_batch(&mut tape, &[&enc], &[mask.clone()])?;
        let probs = tape.value(fwd.probs).row(0).to_vec();
        let index = pick(&probs, &mask);
        debug_assert!(mask[index], "picked a masked action");
        Ok(ActOutput {
            action: self.action_from_index(index),
            action_index: index,
            log_prob: tape.value(fwd.log_probs).row(0)[index],
            value: tape.value(fwd.value).item(),
            entropy: tape.value(fwd.entropy).item(),
        })
    }

    /// Sample an action from the masked policy distribution.
    pub fn act(&self, state: &EnvState, rng: &mut SplitMix64) -> Result<ActOutput, NumError> {
        self.act_inner(state, |probs, mask| sample_masked(probs, mask, rng))
    }

    /// Deterministic argmax action (ties broken by lowest index).
    pub fn act_greedy(&self, state: &EnvState) -> Result<ActOutput, NumError> {
        self.act_inner(state, greedy_masked)
    }

    /// The masked action distribution over the flat index space.
    pub fn flat_distribution(&self, state: &EnvState) -> Result<Vec<f64>, NumError> {
        let enc = state.encode_features();
        let mask = state
            .feasibility_mask()
            .flat(self.config.max_nurses, self.config.max_patients);
        let mut tape = Tape::new();
        let fwd = self.forward_batch(&mut tape, &[&enc], &[mask])?;
        Ok(tape.value(fwd.probs).row(0).to_vec())
    }
}

/// Sample an index from `probs`, never touching masked slots.
pub(crate) fn sample_masked(probs: &[f64], mask: &[bool], rng: &mut SplitMix64) -> usize {
    let total: f64 = probs
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&p, _)| p)
        .sum();
    let threshold = rng.next_f64() * total;
    let mut cum = 0.0;
    let mut last = None;
    for (i, (&p, &m)) in probs.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        cum += p;
        last = Some(i);
        if threshold < cum {
            return i;
        }
    }
    last.expect("mask guarantees at least the null action")
}

fn greedy_masked(probs: &[f64], mask: &[bool]) -> usize {
    let mut best = None;
    let mut best_p = f64::NEG_INFINITY;
    for (i, (&p, &m)) in probs.iter().zip(mask).enumerate() {
        if m && p > best_p {
            best = Some(i);
            best_p = p;
        }
    }
    best.expect("mask guarantees at least the null action")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{generate_roster, Region};
    use crate::env::EnvConfig;

    fn tiny_policy(seed: u64) -> Policy {
        Policy::new(PolicyConfig::tiny(), seed).unwrap()
    }

    fn state_with_patients(seed: u64) -> EnvState {
        let roster = generate_roster(1, 40, &Region::default()).unwrap();
        let config = EnvConfig::default();
        let mut state = EnvState::reset(seed, &roster, &config).unwrap();
        while state.patients.len() < 3 {
            state = state.step(&Action::Null).unwrap().state;
        }
        state
    }

    #[test]
    fn config_validates_head_divisibility() {
        let cfg = PolicyConfig {
            n_heads: 5,
            ..PolicyConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn forward_is_finite_on_tiny_and_default() {
        let state = state_with_patients(3);
        for policy in [tiny_policy(1), Policy::new(PolicyConfig::default(), 1).unwrap()] {
            let enc = state.encode_features();
            let mask = state.feasibility_mask().flat(12, 8);
            let mut tape = Tape::new();
            let fwd = policy.forward_batch(&mut tape, &[&enc], &[mask]).unwrap();
            for v in [fwd.probs, fwd.log_probs, fwd.value, fwd.entropy] {
                assert!(tape.value(v).data().iter().all(|x| x.is_finite()));
            }
        }
    }

    #[test]
    fn zero_weights_give_finite_output() {
        let mut policy = tiny_policy(0);
        let names: Vec<String> = policy.store.names().map(String::from).collect();
        for name in names {
            policy.store.get_mut(&name).unwrap().data_mut().fill(0.0);
        }
        let state = state_with_patients(5);
        let enc = state.encode_features();
        let mut tape = Tape::new();
        let h = policy.encode(&mut tape, &enc).unwrap();
        assert!(tape.value(h).data().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn probs_sum_to_one() {
        let policy = tiny_policy(2);
        let state = state_with_patients(4);
        let probs = policy.flat_distribution(&state).unwrap();
        let sum: f64 = probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn infeasible_actions_have_exactly_zero_probability() {
        let policy = tiny_policy(3);
        let state = state_with_patients(6);
        let mask = state.feasibility_mask().flat(12, 8);
        let probs = policy.flat_distribution(&state).unwrap();
        for (p, m) in probs.iter().zip(&mask) {
            if !m {
                assert_eq!(*p, 0.0);
            } else {
                assert!(*p > 0.0);
            }
        }
    }

    #[test]
    fn empty_mask_forces_null() {
        let policy = tiny_policy(4);
        let roster = generate_roster(1, 40, &Region::default()).unwrap();
        let state = EnvState::reset(0, &roster, &EnvConfig::default()).unwrap();
        assert!(state.patients.is_empty());
        let mut rng = SplitMix64::new(9);
        for _ in 0..20 {
            let out = policy.act(&state, &mut rng).unwrap();
            assert_eq!(out.action, Action::Null);
            assert_eq!(out.log_prob, 0.0); // ln 1
        }
    }

    #[test]
    fn greedy_is_deterministic() {
        let policy = tiny_policy(5);
        let state = state_with_patients(7);
        let a = policy.act_greedy(&state).unwrap();
        let b = policy.act_greedy(&state).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_phi_gives_uniform_pair_logits() {
        // phi = 0 makes every pair logit 0, so with the null logit also 0
        // the distribution over feasible slots is uniform.
        let mut policy = tiny_policy(6);
        policy.store.get_mut("actor.phi").unwrap().data_mut().fill(0.0);
        policy
            .store
            .get_mut("actor.null_logit")
            .unwrap()
            .data_mut()
            .fill(0.0);
        let state = state_with_patients(8);
        let mask = state.feasibility_mask().flat(12, 8);
        let k = mask.iter().filter(|&&m| m).count();
        let probs = policy.flat_distribution(&state).unwrap();
        for (p, m) in probs.iter().zip(&mask) {
            if *m {
                assert!((p - 1.0 / k as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permutation_equivariance_of_encoder() {
        // Swapping two nurse slots together with their positional rows
        // permutes the output rows identically.
        let policy = tiny_policy(7);
        let state = state_with_patients(9);
        let enc = state.encode_features();

        let mut swapped_policy = policy.clone();
        let pos = swapped_policy.store.get_mut("encoder.pos").unwrap();
        let (i, j) = (2usize, 5usize);
        let cols = pos.cols();
        for c in 0..cols {
            let a = pos.data()[i * cols + c];
            let b = pos.data()[j * cols + c];
            pos.data_mut()[i * cols + c] = b;
            pos.data_mut()[j * cols + c] = a;
        }
        let mut swapped_enc = enc.clone();
        let fc = swapped_enc.nurse_features.cols();
        for c in 0..fc {
            let a = swapped_enc.nurse_features.data()[i * fc + c];
            let b = swapped_enc.nurse_features.data()[j * fc + c];
            swapped_enc.nurse_features.data_mut()[i * fc + c] = b;
            swapped_enc.nurse_features.data_mut()[j * fc + c] = a;
        }
        swapped_enc.nurse_present.swap(i, j);

        let mut tape_a = Tape::new();
        let ha = policy.encode(&mut tape_a, &enc).unwrap();
        let mut tape_b = Tape::new();
        let hb = swapped_policy.encode(&mut tape_b, &swapped_enc).unwrap();

        let (va, vb) = (tape_a.value(ha), tape_b.value(hb));
        let t = policy.config.tokens();
        for r in 0..t {
            let rb = if r == i {
                j
            } else if r == j {
                i
            } else {
                r
            };
            for c in 0..policy.config.d_h {
                let x = va.row(r)[c];
                let y = vb.row(rb)[c];
                assert!((x - y).abs() < 1e-12, "row {r} col {c}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn padding_neutrality() {
        // Appending an absent (masked, zero-featured) patient slot must not
        // move any real pair's logit. Build a 9-slot twin of the 8-slot
        // policy sharing every weight, with one extra positional row for
        // the slot that is never present.
        let policy = tiny_policy(8);
        let state = state_with_patients(11);
        let enc = state.encode_features();

        let cfg9 = PolicyConfig {
            max_patients: 9,
            ..policy.config
        };
        let mut wide = Policy::new(cfg9, 999).unwrap();
        let names: Vec<String> = policy.store.names().map(String::from).collect();
        for name in &names {
            if name == "encoder.pos" {
                let src = policy.store.get(name).unwrap();
                let dst = wide.store.get_mut(name).unwrap();
                for r in 0..src.rows() {
                    dst.row_mut(r).copy_from_slice(src.row(r));
                }
                // the appended slot's row stays at its random init; it is
                // absent, so it must not matter
            } else {
                *wide.store.get_mut(name).unwrap() = policy.store.get(name).unwrap().clone();
            }
        }

        // Widen the encoding: one extra zero patient row, absent; edge rows
        // re-laid out for the 9-wide pair grid.
        let (n_slots, p8, d_p, d_e) = (12usize, 8usize, enc.patient_features.cols(), 3usize);
        let mut patient9 = Tensor::zeros(&[9, d_p]);
        for r in 0..p8 {
            patient9.row_mut(r).copy_from_slice(enc.patient_features.row(r));
        }
        let mut edges9 = Tensor::zeros(&[n_slots * 9, d_e]);
        for n in 0..n_slots {
            for p in 0..p8 {
                edges9
                    .row_mut(n * 9 + p)
                    .copy_from_slice(enc.edge_features.row(n * p8 + p));
            }
        }
        let mut present9 = enc.patient_present.clone();
        present9.push(false);
        let enc9 = FeatureEncoding {
            nurse_features: enc.nurse_features.clone(),
            patient_features: patient9,
            edge_features: edges9,
            nurse_present: enc.nurse_present.clone(),
            patient_present: present9,
        };

        let mut tape_a = Tape::new();
        let ha = policy.encode(&mut tape_a, &enc).unwrap();
        let la = policy.score_pairs(&mut tape_a, ha, &enc).unwrap();
        let mut tape_b = Tape::new();
        let hb = wide.encode(&mut tape_b, &enc9).unwrap();
        let lb = wide.score_pairs(&mut tape_b, hb, &enc9).unwrap();

        let (va, vb) = (tape_a.value(la), tape_b.value(lb));
        for n in 0..n_slots {
            for j in 0..p8 {
                let a = va.row(0)[n * p8 + j];
                let b = vb.row(0)[n * 9 + j];
                assert!((a - b).abs() < 1e-9, "pair ({n}, {j}): {a} vs {b}");
            }
        }
        // null logit also unchanged
        let a = va.row(0)[n_slots * p8];
        let b = vb.row(0)[n_slots * 9];
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn edge_feature_perturbation_is_local() {
        let policy = tiny_policy(9);
        let state = state_with_patients(13);
        let enc = state.encode_features();
        let mut enc_b = enc.clone();
        // Perturb the edge features of pair (1, 0) only.
        let cols = enc_b.edge_features.cols();
        let p = policy.config.max_patients;
        enc_b.edge_features.data_mut()[p * cols + 1] += 0.25;

        let mut tape_a = Tape::new();
        let ha = policy.encode(&mut tape_a, &enc).unwrap();
        let la = policy.score_pairs(&mut tape_a, ha, &enc).unwrap();
        let mut tape_b = Tape::new();
        let hb = policy.encode(&mut tape_b, &enc_b).unwrap();
        let lb = policy.score_pairs(&mut tape_b, hb, &enc_b).unwrap();

        let (va, vb) = (tape_a.value(la), tape_b.value(lb));
        for idx in 0..policy.config.action_slots() {
            let diff = (va.row(0)[idx] - vb.row(0)[idx]).abs();
            if idx == p {
                assert!(diff > 1e-9, "perturbed pair logit unchanged");
            } else {
                assert_eq!(diff, 0.0, "logit {idx} leaked");
            }
        }
    }

    #[test]
    fn identical_patient_embeddings_get_identical_logit_columns() {
        // The pairwise scorer is a pure function of (h_n, h_p, e_np): feed
        // it embeddings where patient rows 0 and 1 coincide and identical
        // edge features, and the two logit columns must coincide.
        let policy = tiny_policy(10);
        let state = state_with_patients(15);
        let mut enc = state.encode_features();
        let (t, p, d) = (
            policy.config.tokens(),
            policy.config.max_patients,
            policy.config.d_h,
        );
        let mut rng = SplitMix64::new(1);
        let mut h = Tensor::zeros(&[t, d]);
        for v in h.data_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
        let row0 = h.row(12).to_vec();
        h.row_mut(13).copy_from_slice(&row0);
        for n in 0..policy.config.max_nurses {
            let src = enc.edge_features.row(n * p).to_vec();
            enc.edge_features.row_mut(n * p + 1).copy_from_slice(&src);
        }
        let mut tape = Tape::new();
        let hv = tape.constant(h);
        let logits = policy.score_pairs(&mut tape, hv, &enc).unwrap();
        let lv = tape.value(logits);
        for n in 0..policy.config.max_nurses {
            let a = lv.row(0)[n * p];
            let b = lv.row(0)[n * p + 1];
            assert!((a - b).abs() < 1e-12, "nurse {n}: {a} vs {b}");
        }
    }

    #[test]
    fn critic_value_scales_linearly_in_output_weights() {
        let mut policy = tiny_policy(11);
        let state = state_with_patients(17);
        let enc = state.encode_features();
        let presence: Vec<bool> = enc
            .nurse_present
            .iter()
            .chain(&enc.patient_present)
            .copied()
            .collect();

        let mut tape = Tape::new();
        let h = policy.encode(&mut tape, &enc).unwrap();
        let v1 = policy.value(&mut tape, h, &presence).unwrap();
        let v1 = tape.value(v1).item();

        for x in policy.store.get_mut("critic.v").unwrap().data_mut() {
            *x *= 2.0;
        }
        let mut tape = Tape::new();
        let h = policy.encode(&mut tape, &enc).unwrap();
        let v2 = policy.value(&mut tape, h, &presence).unwrap();
        let v2 = tape.value(v2).item();
        assert!((v2 - 2.0 * v1).abs() < 1e-9);

        policy.store.get_mut("critic.v").unwrap().data_mut().fill(0.0);
        let mut tape = Tape::new();
        let h = policy.encode(&mut tape, &enc).unwrap();
        let v0 = policy.value(&mut tape, h, &presence).unwrap();
        assert_eq!(tape.value(v0).item(), 0.0);
    }

    #[test]
    fn hand_built_single_state_critic() {
        // d_h = 2 keeps the pooled critic small enough to hand-evaluate
        // from the embeddings.
        let cfg = PolicyConfig {
            d_h: 2,
            n_heads: 1,
            n_layers: 1,
            ..PolicyConfig::default()
        };
        let policy = Policy::new(cfg, 3).unwrap();
        let state = {
            let roster = generate_roster(1, 40, &Region::default()).unwrap();
            EnvState::reset(0, &roster, &EnvConfig::default()).unwrap()
        };
        let enc = state.encode_features();
        let presence: Vec<bool> = enc
            .nurse_present
            .iter()
            .chain(&enc.patient_present)
            .copied()
            .collect();
        let mut tape = Tape::new();
        let h = policy.encode(&mut tape, &enc).unwrap();
        let v = policy.value(&mut tape, h, &presence).unwrap();
        let got = tape.value(v).item();

        let hv = tape.value(h);
        let count = presence.iter().filter(|&&p| p).count() as f64;
        let mut pooled = [0.0f64; 2];
        for (r, &pres) in presence.iter().enumerate() {
            if pres {
                pooled[0] += hv.row(r)[0] / count;
                pooled[1] += hv.row(r)[1] / count;
            }
        }
        let w = policy.store.get("critic.w").unwrap();
        let b = policy.store.get("critic.b").unwrap();
        let vv = policy.store.get("critic.v").unwrap();
        let z0 = (pooled[0] * w.data()[0] + pooled[1] * w.data()[2] + b.data()[0]).tanh();
        let z1 = (pooled[0] * w.data()[1] + pooled[1] * w.data()[3] + b.data()[1]).tanh();
        let expected = z0 * vv.data()[0] + z1 * vv.data()[1];
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn sampling_matches_known_distribution() {
        let probs = vec![0.0, 0.5, 0.2, 0.0, 0.3];
        let mask = vec![false, true, true, false, true];
        let mut rng = SplitMix64::new(99);
        let n = 10_000;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            counts[sample_masked(&probs, &mask, &mut rng)] += 1;
        }
        assert_eq!(counts[0], 0);
        assert_eq!(counts[3], 0);
        for (i, expect) in [(1usize, 0.5), (2, 0.2), (4, 0.3)] {
            let freq = counts[i] as f64 / n as f64;
            assert!((freq - expect).abs() < 0.02, "slot {i}: {freq}");
        }
    }

    #[test]
    fn batched_forward_matches_single_states() {
        let policy = tiny_policy(13);
        let states: Vec<EnvState> = (0..3).map(|s| state_with_patients(20 + s)).collect();
        let encs: Vec<_> = states.iter().map(|s| s.encode_features()).collect();
        let enc_refs: Vec<&FeatureEncoding> = encs.iter().collect();
        let masks: Vec<Vec<bool>> = states
            .iter()
            .map(|s| s.feasibility_mask().flat(12, 8))
            .collect();

        let mut tape = Tape::new();
        let fwd = policy
            .forward_batch(&mut tape, &enc_refs, &masks)
            .unwrap();
        let batch_probs = tape.value(fwd.probs).clone();
        let batch_values = tape.value(fwd.value).clone();

        for (i, state) in states.iter().enumerate() {
            let single = policy.flat_distribution(state).unwrap();
            for (a, b) in batch_probs.row(i).iter().zip(&single) {
                assert!((a - b).abs() < 1e-12, "state {i}");
            }
            let out = policy.act_greedy(state).unwrap();
            assert!((batch_values.row(i)[0] - out.value).abs() < 1e-12);
        }
    }

    #[test]
    fn from_parts_rejects_wrong_inventory() {
        let policy = tiny_policy(12);
        let mut store = policy.store.clone();
        *store.get_mut("actor.phi").unwrap() = Tensor::zeros(&[3, 1]);
        assert!(Policy::from_parts(PolicyConfig::tiny(), store).is_err());
        assert!(Policy::from_parts(PolicyConfig::default(), policy.store.clone()).is_err());
        assert!(Policy::from_parts(PolicyConfig::tiny(), policy.store.clone()).is_ok());
    }

    #[test]
    fn standard_block_variant_runs() {
        let cfg = PolicyConfig {
            standard_block: true,
            ..PolicyConfig::tiny()
        };
        let policy = Policy::new(cfg, 1).unwrap();
        assert!(policy.store.get("encoder.layer0.ln2.gain").is_some());
        let state = state_with_patients(19);
        let out = policy.act_greedy(&state).unwrap();
        assert!(out.value.is_finite());
    }
}
