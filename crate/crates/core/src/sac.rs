//! Soft actor-critic with a Beta policy.
//!
//! The actor emits `2m` sigmoid outputs, read as `[α_1..α_m, β_1..β_m]` after
//! clipping to `[BETA_CLIP_FLOOR, 1]` and scaling by `BETA_SCALE`. Actions live
//! in the unit cube; [`rescale_action`] maps them to correction space.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{check_dim, Error, Result};
use crate::mdp::{Action, ActionBounds};
use crate::nn::{adam_step, Activation, AdamState, Checkpoint, ForwardCache, Mlp, MlpGrads};

pub const BETA_CLIP_FLOOR: f64 = 1e-5;
pub const BETA_SCALE: f64 = 10.0;
/// Samples are kept this far away from the open interval's ends so that
/// log-densities stay finite.
pub const UNIT_MARGIN: f64 = 1e-9;

/// Log-density of `Beta(a, b)` at `u`.
pub fn beta_log_pdf(u: f64, a: f64, b: f64) -> f64 {
    (a - 1.0) * u.ln() + (b - 1.0) * (1.0 - u).ln() - ln_beta(a, b)
}

pub fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Per-dimension Beta shape parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BetaHead {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl BetaHead {
    /// Clip-and-scale of raw sigmoid outputs laid out as `[α.., β..]`.
    pub fn from_sigmoid(outputs: &[f64]) -> Self {
        let m = outputs.len() / 2;
        let map = |s: &f64| BETA_SCALE * s.clamp(BETA_CLIP_FLOOR, 1.0);
        Self {
            alpha: outputs[..m].iter().map(map).collect(),
            beta: outputs[m..].iter().map(map).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    pub fn validate(&self) -> Result<()> {
        check_dim("beta head", self.alpha.len(), self.beta.len())?;
        let lo = BETA_SCALE * BETA_CLIP_FLOOR;
        if self
            .alpha
            .iter()
            .chain(&self.beta)
            .any(|p| !(lo..=BETA_SCALE).contains(p))
        {
            return Err(Error::InvalidParameter(format!(
                "beta parameters must lie in [{lo}, {BETA_SCALE}]"
            )));
        }
        Ok(())
    }

    pub fn log_prob(&self, u: &[f64]) -> f64 {
        (0..self.dim())
            .map(|i| beta_log_pdf(u[i], self.alpha[i], self.beta[i]))
            .sum()
    }

    /// `∂ log π(u) / ∂α_i` and `∂ log π(u) / ∂β_i`.
    pub fn log_prob_grad(&self, u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut da = Vec::with_capacity(self.dim());
        let mut db = Vec::with_capacity(self.dim());
        for i in 0..self.dim() {
            let (a, b) = (self.alpha[i], self.beta[i]);
            let common = digamma(a + b);
            da.push(u[i].ln() - digamma(a) + common);
            db.push((1.0 - u[i]).ln() - digamma(b) + common);
        }
        (da, db)
    }
}

/// Runs the actor and converts its outputs to Beta parameters.
pub fn actor_forward(actor: &Mlp, s: &[f64]) -> Result<BetaHead> {
    let out = actor.predict_batch(s, 1)?;
    Ok(BetaHead::from_sigmoid(&out))
}

/// Draws `u ~ Beta(α, β)` per dimension and returns it with its joint
/// log-density.
pub fn sample_action<R: Rng + ?Sized>(head: &BetaHead, rng: &mut R) -> (Vec<f64>, f64) {
    let u: Vec<f64> = (0..head.dim())
        .map(|i| {
            let d = Beta::new(head.alpha[i], head.beta[i]).expect("validated beta parameters");
            let x: f64 = d.sample(rng);
            if x.is_nan() {
                0.5
            } else {
                x.clamp(UNIT_MARGIN, 1.0 - UNIT_MARGIN)
            }
        })
        .collect();
    let lp = head.log_prob(&u);
    (u, lp)
}

/// Per-dimension mode used at inference time. Bimodal dimensions (α ≤ 1 and
/// β ≤ 1) return the midpoint, which maps to zero correction.
pub fn action_mode(head: &BetaHead) -> Vec<f64> {
    head.alpha
        .iter()
        .zip(&head.beta)
        .map(|(&a, &b)| match (a > 1.0, b > 1.0) {
            (true, true) => (a - 1.0) / (a + b - 2.0),
            (false, true) => 0.0,
            (true, false) => 1.0,
            (false, false) => 0.5,
        })
        .collect()
}

/// Maps `u ∈ [0,1]^m` to `[-a_max, a_max]` and returns the additive
/// log-density correction `−Σ log(2 a_max)`.
pub fn rescale_action(u: &[f64], bounds: &ActionBounds) -> (Action, f64) {
    let a_max = bounds.flat();
    let flat: Vec<f64> = u.iter().zip(&a_max).map(|(u, a)| (2.0 * u - 1.0) * a).collect();
    let correction = -a_max.iter().map(|a| (2.0 * a).ln()).sum::<f64>();
    (Action::from_flat(&flat), correction)
}

/// Q-value of one state-action pair.
pub fn critic_forward(critic: &Mlp, s: &[f64], u: &[f64]) -> Result<f64> {
    check_dim("critic input", critic.input_dim(), s.len() + u.len())?;
    let mut x = Vec::with_capacity(s.len() + u.len());
    x.extend_from_slice(s);
    x.extend_from_slice(u);
    Ok(critic.predict_batch(&x, 1)?[0])
}

/// Gradient of `Σ_j w_j · log π(u_j | s_i)` with respect to the actor
/// parameters, where sample `j` belongs to state `i = j / k` and
/// `k = samples.len() / batch`. `cache` is the actor's forward pass over the
/// states.
pub fn weighted_log_prob_grad(
    actor: &Mlp,
    cache: &ForwardCache,
    samples: &[Vec<f64>],
    weights: &[f64],
) -> Result<MlpGrads> {
    let b = cache.batch;
    let m = actor.output_dim() / 2;
    check_dim("log-prob weights", samples.len(), weights.len())?;
    if b == 0 || !samples.len().is_multiple_of(b) {
        return Err(Error::DimensionMismatch {
            context: "samples per state",
            expected: b,
            actual: samples.len(),
        });
    }
    let k = samples.len() / b;
    let sig = cache.output();
    let mut d_sig = vec![0.0; b * 2 * m];
    for i in 0..b {
        let s_row = &sig[i * 2 * m..(i + 1) * 2 * m];
        let head = BetaHead::from_sigmoid(s_row);
        let row = &mut d_sig[i * 2 * m..(i + 1) * 2 * m];
        for j in i * k..(i + 1) * k {
            check_dim("action sample", m, samples[j].len())?;
            let (da, db) = head.log_prob_grad(&samples[j]);
            for d in 0..m {
                row[d] += weights[j] * da[d];
                row[m + d] += weights[j] * db[d];
            }
        }
        // The clip blocks gradients below the floor.
        for (g, s) in row.iter_mut().zip(s_row) {
            *g *= if *s >= BETA_CLIP_FLOOR { BETA_SCALE } else { 0.0 };
        }
    }
    Ok(actor.backward(cache, &d_sig, false)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SacConfig {
    pub gamma: f64,
    /// Target blend; 1 is a hard copy.
    pub tau: f64,
    pub target_update_every: u64,
    pub minibatch: usize,
    pub replay_capacity: usize,
    /// Gradient updates per stored transition.
    pub replay_ratio: f64,
    /// Defaults to `−m` when absent.
    pub target_entropy: Option<f64>,
    pub alpha_init: f64,
    pub alpha_lr: f64,
    pub hidden: Vec<usize>,
    /// Policy samples per state for the score-function actor gradient.
    pub actor_samples: usize,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.85,
            tau: 1.0,
            target_update_every: 1000,
            minibatch: 128,
            replay_capacity: 200_000,
            replay_ratio: 1.0,
            target_entropy: None,
            alpha_init: 0.2,
            alpha_lr: 3e-4,
            hidden: vec![80, 80],
            actor_samples: 2,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidParameter(msg.into()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) && self.gamma != 0.0 {
            return bad("gamma must lie in [0, 1)");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if self.target_update_every == 0 || self.minibatch == 0 || self.actor_samples == 0 {
            return bad("target_update_every, minibatch and actor_samples must be >= 1");
        }
        if self.replay_capacity < self.minibatch {
            return bad("replay_capacity must hold at least one minibatch");
        }
        if !(self.replay_ratio > 0.0 && self.replay_ratio.is_finite()) {
            return bad("replay_ratio must be positive");
        }
        if !(self.alpha_init >= 0.0 && self.alpha_init.is_finite()) || !(self.alpha_lr >= 0.0) {
            return bad("alpha_init and alpha_lr must be non-negative");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layers must be non-empty and positive");
        }
        if let Some(h) = self.target_entropy {
            if !h.is_finite() {
                return bad("target_entropy must be finite");
            }
        }
        Ok(())
    }
}

/// One stored interaction; `u` is the unit-interval action.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub u: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
}

impl Transition {
    pub fn validate(&self) -> Result<()> {
        let finite = self.s.iter().chain(&self.s_next).chain(&self.u).all(|x| x.is_finite());
        if !finite || !self.r.is_finite() {
            return Err(Error::NonFinite("transition"));
        }
        if self.u.iter().any(|u| !(0.0..=1.0).contains(u)) {
            return Err(Error::InvalidParameter("transition action outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// FIFO ring of transitions with uniform sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    /// Total number of pushes; the write slot is `inserted % capacity`.
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::new(),
            inserted: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn clear(&mut self) {
        self.items.clear();
        self.inserted = 0;
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        t.validate()?;
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            let slot = (self.inserted % self.capacity as u64) as usize;
            self.items[slot] = t;
        }
        self.inserted += 1;
        Ok(())
    }

    /// Oldest-first view of the contents.
    pub fn iter_oldest_first(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity {
            0
        } else {
            (self.inserted % self.capacity as u64) as usize
        };
        self.items[split..].iter().chain(self.items[..split].iter())
    }

    /// Uniform indices with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.items.len() < k || self.items.is_empty() {
            return Err(Error::InsufficientData {
                available: self.items.len(),
                requested: k,
            });
        }
        Ok((0..k).map(|_| rng.random_range(0..self.items.len())).collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        Ok(self
            .sample_indices(k, rng)?
            .into_iter()
            .map(|i| &self.items[i])
            .collect())
    }

    /// Serializes the contents oldest-first as one flat vector per transition
    /// field group.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut flat = Vec::new();
        let (mut sd, mut m) = (0, 0);
        for t in self.iter_oldest_first() {
            sd = t.s.len();
            m = t.u.len();
            flat.extend_from_slice(&t.s);
            flat.extend_from_slice(&t.u);
            flat.push(t.r);
            flat.extend_from_slice(&t.s_next);
            flat.push(if t.done { 1.0 } else { 0.0 });
        }
        Checkpoint {
            networks: vec![],
            vectors: vec![flat],
            counters: vec![
                self.capacity as u64,
                self.items.len() as u64,
                self.inserted,
                sd as u64,
                m as u64,
            ],
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let bad = || Error::Checkpoint("malformed replay buffer".into());
        let [capacity, len, inserted, sd, m] = ck.counters[..] else {
            return Err(bad());
        };
        let (capacity, len, sd, m) = (capacity as usize, len as usize, sd as usize, m as usize);
        let stride = 2 * sd + m + 2;
        let flat = ck.vectors.first().ok_or_else(bad)?;
        if capacity == 0 || len > capacity || flat.len() != len * stride {
            return Err(bad());
        }
        let mut buf = Self::new(capacity);
        for row in flat.chunks_exact(stride.max(1)).take(len) {
            buf.push(Transition {
                s: row[..sd].to_vec(),
                u: row[sd..sd + m].to_vec(),
                r: row[sd + m],
                s_next: row[sd + m + 1..2 * sd + m + 1].to_vec(),
                done: row[2 * sd + m + 1] != 0.0,
            })?;
        }
        // Restore the write position so future evictions match the original.
        if len == capacity {
            let shift = (inserted % capacity as u64) as usize;
            buf.items.rotate_right(shift);
        }
        buf.inserted = inserted;
        Ok(buf)
    }
}

/// Losses of one update, all before the parameter step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateLosses {
    pub critic1: f64,
    pub critic2: f64,
    pub actor: f64,
    pub temperature: f64,
    pub entropy: f64,
}

/// Which parameter groups an update may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UpdateMask {
    pub critics: bool,
    pub actor: bool,
    pub temperature: bool,
}

impl UpdateMask {
    pub const ALL: Self = Self {
        critics: true,
        actor: true,
        temperature: true,
    };
    pub const CRITICS_ONLY: Self = Self {
        critics: true,
        actor: false,
        temperature: false,
    };
}

/// Actor, twin critics with their targets, temperature, and optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct SacAgent {
    pub config: SacConfig,
    pub state_dim: usize,
    pub action_dim: usize,
    pub actor: Mlp,
    pub critic1: Mlp,
    pub critic2: Mlp,
    pub target1: Mlp,
    pub target2: Mlp,
    pub log_alpha: f64,
    pub adam_actor: AdamState,
    pub adam_critic1: AdamState,
    pub adam_critic2: AdamState,
    pub adam_alpha: AdamState,
    pub iterations: u64,
}

fn layer_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut sizes = vec![input];
    sizes.extend_from_slice(hidden);
    sizes.push(output);
    sizes
}

impl SacAgent {
    pub fn new<R: Rng + ?Sized>(config: SacConfig, state_dim: usize, action_dim: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let actor = Mlp::new(
            &layer_sizes(state_dim, &config.hidden, 2 * action_dim),
            Activation::Tanh,
            Activation::Sigmoid,
            rng,
        );
        let critic_sizes = layer_sizes(state_dim + action_dim, &config.hidden, 1);
        let critic1 = Mlp::new(&critic_sizes, Activation::Tanh, Activation::Linear, rng);
        let critic2 = Mlp::new(&critic_sizes, Activation::Tanh, Activation::Linear, rng);
        Ok(Self {
            state_dim,
            action_dim,
            adam_actor: AdamState::for_mlp(&actor),
            adam_critic1: AdamState::for_mlp(&critic1),
            adam_critic2: AdamState::for_mlp(&critic2),
            adam_alpha: AdamState::new(1),
            target1: critic1.clone(),
            target2: critic2.clone(),
            actor,
            critic1,
            critic2,
            log_alpha: config.alpha_init.ln(),
            iterations: 0,
            config,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn target_entropy(&self) -> f64 {
        self.config.target_entropy.unwrap_or(-(self.action_dim as f64))
    }

    pub fn head(&self, s: &[f64]) -> Result<BetaHead> {
        actor_forward(&self.actor, s)
    }

    /// Stochastic action for data collection.
    pub fn act<R: Rng + ?Sized>(&self, s: &[f64], rng: &mut R) -> Result<(Vec<f64>, f64)> {
        Ok(sample_action(&self.head(s)?, rng))
    }

    /// Deterministic mode action for evaluation.
    pub fn act_mode(&self, s: &[f64]) -> Result<Vec<f64>> {
        Ok(action_mode(&self.head(s)?))
    }

    /// Copies the online critics into the targets exactly.
    pub fn target_hard_update(&mut self) {
        self.target1.copy_from(&self.critic1);
        self.target2.copy_from(&self.critic2);
    }

    fn target_blend(&mut self) {
        let tau = self.config.tau;
        if tau >= 1.0 {
            self.target_hard_update();
            return;
        }
        for (t, o) in [(&mut self.target1, &self.critic1), (&mut self.target2, &self.critic2)] {
            for (tp, op) in t.params_mut().zip(o.params()) {
                *tp = tau * op + (1.0 - tau) * *tp;
            }
        }
    }

    pub fn sac_update<R: Rng + ?Sized>(&mut self, batch: &[&Transition], lr: f64, rng: &mut R) -> Result<UpdateLosses> {
        self.sac_update_masked(batch, lr, rng, UpdateMask::ALL)
    }

    /// One SAC iteration. Every gradient is computed from the pre-update
    /// parameters and checked for finiteness before any of them is applied,
    /// so a rejected update leaves the agent untouched.
    pub fn sac_update_masked<R: Rng + ?Sized>(
        &mut self,
        batch: &[&Transition],
        lr: f64,
        rng: &mut R,
        mask: UpdateMask,
    ) -> Result<UpdateLosses> {
        let b = batch.len();
        if b == 0 {
            return Err(Error::EmptyDataset("minibatch"));
        }
        let (sd, m) = (self.state_dim, self.action_dim);
        let cin = sd + m;
        for t in batch {
            check_dim("transition state", sd, t.s.len())?;
            check_dim("transition next state", sd, t.s_next.len())?;
            check_dim("transition action", m, t.u.len())?;
        }
        let alpha = self.alpha();

        // Critic targets from a fresh next-state sample.
        let s_next: Vec<f64> = batch.iter().flat_map(|t| t.s_next.iter().copied()).collect();
        let next_out = self.actor.predict_batch(&s_next, b)?;
        let mut target_in = Vec::with_capacity(b * cin);
        let mut next_logp = Vec::with_capacity(b);
        for (i, t) in batch.iter().enumerate() {
            let head = BetaHead::from_sigmoid(&next_out[i * 2 * m..(i + 1) * 2 * m]);
            let (u, lp) = sample_action(&head, rng);
            target_in.extend_from_slice(&t.s_next);
            target_in.extend_from_slice(&u);
            next_logp.push(lp);
        }
        let q1n = self.target1.predict_batch(&target_in, b)?;
        let q2n = self.target2.predict_batch(&target_in, b)?;
        let y: Vec<f64> = (0..b)
            .map(|i| {
                let t = batch[i];
                let cont = if t.done { 0.0 } else { 1.0 };
                let soft = if cont == 0.0 {
                    0.0
                } else {
                    q1n[i].min(q2n[i]) - alpha * next_logp[i]
                };
                t.r + self.config.gamma * cont * soft
            })
            .collect();

        // Critic regression.
        let mut critic_in = Vec::with_capacity(b * cin);
        for t in batch {
            critic_in.extend_from_slice(&t.s);
            critic_in.extend_from_slice(&t.u);
        }
        let mut critic_grads = Vec::with_capacity(2);
        let mut critic_losses = [0.0; 2];
        for (k, critic) in [&self.critic1, &self.critic2].into_iter().enumerate() {
            let cache = critic.forward_batch(&critic_in, b)?;
            let q = cache.output();
            let mut dq = Vec::with_capacity(b);
            let mut loss = 0.0;
            for i in 0..b {
                let e = q[i] - y[i];
                loss += e * e;
                dq.push(2.0 * e / b as f64);
            }
            critic_losses[k] = loss / b as f64;
            if mask.critics {
                critic_grads.push(critic.backward(&cache, &dq, false)?.0);
            }
        }
        if !critic_losses.iter().all(|l| l.is_finite()) {
            return Err(Error::NonFinite("critic loss"));
        }

        // Score-function actor gradient with K samples per state.
        let k = self.config.actor_samples;
        let states: Vec<f64> = batch.iter().flat_map(|t| t.s.iter().copied()).collect();
        let actor_cache = self.actor.forward_batch(&states, b)?;
        let sig = actor_cache.output();
        let heads: Vec<BetaHead> = (0..b)
            .map(|i| BetaHead::from_sigmoid(&sig[i * 2 * m..(i + 1) * 2 * m]))
            .collect();
        let mut samples = Vec::with_capacity(b * k);
        let mut logp = Vec::with_capacity(b * k);
        let mut sampled_in = Vec::with_capacity(b * k * cin);
        for (i, head) in heads.iter().enumerate() {
            for _ in 0..k {
                let (u, lp) = sample_action(head, rng);
                sampled_in.extend_from_slice(&batch[i].s);
                sampled_in.extend_from_slice(&u);
                samples.push(u);
                logp.push(lp);
            }
        }
        let q1s = self.critic1.predict_batch(&sampled_in, b * k)?;
        let q2s = self.critic2.predict_batch(&sampled_in, b * k)?;
        let advantage: Vec<f64> = (0..b * k).map(|j| q1s[j].min(q2s[j]) - alpha * logp[j]).collect();
        let actor_loss = -advantage.iter().sum::<f64>() / (b * k) as f64;
        let entropy = -logp.iter().sum::<f64>() / (b * k) as f64;
        if !actor_loss.is_finite() {
            return Err(Error::NonFinite("actor loss"));
        }
        let mut actor_grads = None;
        if mask.actor {
            let batch_mean = advantage.iter().sum::<f64>() / (b * k) as f64;
            let mut weights = Vec::with_capacity(b * k);
            for i in 0..b {
                let group = &advantage[i * k..(i + 1) * k];
                let group_sum: f64 = group.iter().sum();
                for a in group {
                    let baseline = if k > 1 {
                        (group_sum - a) / (k - 1) as f64
                    } else {
                        batch_mean
                    };
                    weights.push(-(a - baseline) / (b * k) as f64);
                }
            }
            actor_grads = Some(weighted_log_prob_grad(&self.actor, &actor_cache, &samples, &weights)?);
        }

        // Temperature through its logarithm.
        let h_target = self.target_entropy();
        let temp_loss = alpha * (entropy - h_target);
        let temp_grad = alpha * (entropy - h_target);

        let grads_finite = critic_grads.iter().all(MlpGrads::is_finite)
            && actor_grads.as_ref().is_none_or(MlpGrads::is_finite)
            && temp_grad.is_finite();
        if !grads_finite {
            return Err(Error::NonFinite("gradient"));
        }

        if mask.critics {
            adam_step(&mut self.critic1, &critic_grads[0], &mut self.adam_critic1, lr)?;
            adam_step(&mut self.critic2, &critic_grads[1], &mut self.adam_critic2, lr)?;
        }
        if let Some(g) = actor_grads {
            adam_step(&mut self.actor, &g, &mut self.adam_actor, lr)?;
        }
        if mask.temperature && self.config.alpha_lr > 0.0 && self.log_alpha.is_finite() {
            let mut la = [self.log_alpha];
            self.adam_alpha
                .step(la.iter_mut(), [temp_grad].iter(), self.config.alpha_lr)?;
            self.log_alpha = la[0];
        }

        self.iterations += 1;
        if self.iterations.is_multiple_of(self.config.target_update_every) {
            self.target_blend();
        }
        Ok(UpdateLosses {
            critic1: critic_losses[0],
            critic2: critic_losses[1],
            actor: actor_loss,
            temperature: temp_loss,
            entropy,
        })
    }

    /// Networks `[actor, critic1, critic2, target1, target2]`; vectors
    /// `[log_alpha, adam m/v for actor, critic1, critic2, temperature]`;
    /// counters `[iterations, adam steps in the same order]`.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let adams = [
            &self.adam_actor,
            &self.adam_critic1,
            &self.adam_critic2,
            &self.adam_alpha,
        ];
        let mut vectors = vec![vec![self.log_alpha]];
        for a in adams {
            vectors.push(a.m.clone());
            vectors.push(a.v.clone());
        }
        let mut counters = vec![self.iterations];
        counters.extend(adams.iter().map(|a| a.step));
        Checkpoint {
            networks: vec![
                self.actor.clone(),
                self.critic1.clone(),
                self.critic2.clone(),
                self.target1.clone(),
                self.target2.clone(),
            ],
            vectors,
            counters,
        }
    }

    pub const CHECKPOINT_VECTORS: usize = 9;

    pub fn from_checkpoint(config: SacConfig, ck: &Checkpoint) -> Result<Self> {
        config.validate()?;
        let bad = |what: &str| Error::Checkpoint(format!("agent checkpoint: {what}"));
        if ck.networks.len() != 5 || ck.vectors.len() < Self::CHECKPOINT_VECTORS || ck.counters.len() < 5 {
            return Err(bad("wrong section sizes"));
        }
        let [actor, critic1, critic2, target1, target2] = <[Mlp; 5]>::try_from(ck.networks.clone()).unwrap();
        let state_dim = actor.input_dim();
        let action_dim = critic1
            .input_dim()
            .checked_sub(state_dim)
            .ok_or_else(|| bad("critic shape"))?;
        if actor.output_dim() != 2 * action_dim || critic1.output_dim() != 1 {
            return Err(bad("actor/critic shapes disagree"));
        }
        for net in [&critic2, &target1, &target2] {
            if net.layers.len() != critic1.layers.len()
                || net
                    .layers
                    .iter()
                    .zip(&critic1.layers)
                    .any(|(a, b)| a.rows != b.rows || a.cols != b.cols)
            {
                return Err(bad("critic shapes disagree"));
            }
        }
        let log_alpha = *ck.vectors[0].first().ok_or_else(|| bad("log_alpha"))?;
        let restore = |net_len: usize, idx: usize| -> Result<AdamState> {
            let mut a = AdamState::new(net_len);
            if ck.vectors[idx].len() != net_len || ck.vectors[idx + 1].len() != net_len {
                return Err(bad("adam moment length"));
            }
            a.m = ck.vectors[idx].clone();
            a.v = ck.vectors[idx + 1].clone();
            a.step = ck.counters[idx.div_ceil(2)];
            Ok(a)
        };
        Ok(Self {
            adam_actor: restore(actor.param_count(), 1)?,
            adam_critic1: restore(critic1.param_count(), 3)?,
            adam_critic2: restore(critic2.param_count(), 5)?,
            adam_alpha: restore(1, 7)?,
            state_dim,
            action_dim,
            actor,
            critic1,
            critic2,
            target1,
            target2,
            log_alpha,
            iterations: ck.counters[0],
            config,
        })
    }
}
