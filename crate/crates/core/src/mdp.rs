//! Turning plant I/O into the reinforcement-learning problem: bounded and
//! filtered reference corrections, the scaled state vector, and the tracking
//! reward.

use serde::{Deserialize, Serialize};

use crate::arm::{JointLimits, ObservedPoint};
use crate::error::{check_dim, Error, Result};
use crate::trajectory::TrajectoryPoint;

/// Smallest interval used to scale tracking errors.
pub const MIN_ERROR_RANGE: f64 = 1e-6;

/// Maximum correction magnitudes per joint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionBounds {
    pub a_max_q: Vec<f64>,
    pub a_max_v: Vec<f64>,
}

impl ActionBounds {
    pub fn n_joints(&self) -> usize {
        self.a_max_q.len()
    }

    /// Bounds of the flat `[a_q, a_v]` action vector.
    pub fn flat(&self) -> Vec<f64> {
        self.a_max_q.iter().chain(&self.a_max_v).copied().collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.a_max_q.len() != self.a_max_v.len()
            || self
                .a_max_q
                .iter()
                .chain(&self.a_max_v)
                .any(|&a| !(a > 0.0 && a.is_finite()))
        {
            return Err(Error::InvalidParameter(
                "action bounds must be strictly positive with one entry per joint".into(),
            ));
        }
        Ok(())
    }
}

/// `0.95 · limit · dt / 2`: two consecutive extreme corrections of opposite
/// sign stay within the limit. Velocity limits bound the position block and
/// acceleration limits the velocity block.
pub fn compute_action_bounds(limits: &JointLimits, dt: f64) -> Result<ActionBounds> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter("dt must be > 0".into()));
    }
    let bound = |l: &f64| 0.95 * l * dt / 2.0;
    Ok(ActionBounds {
        a_max_q: limits.qd_max.iter().map(bound).collect(),
        a_max_v: limits.qdd_max.iter().map(bound).collect(),
    })
}

/// Reference correction: position block then velocity block.
#[derive(Clone, Debug, PartialEq)]
pub struct Action {
    pub a_q: Vec<f64>,
    pub a_v: Vec<f64>,
}

impl Action {
    pub fn zeros(n: usize) -> Self {
        Self {
            a_q: vec![0.0; n],
            a_v: vec![0.0; n],
        }
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        let n = flat.len() / 2;
        Self {
            a_q: flat[..n].to_vec(),
            a_v: flat[n..].to_vec(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.a_q.iter().chain(&self.a_v).copied().collect()
    }

    pub fn within(&self, bounds: &ActionBounds) -> bool {
        let tol = 1e-12;
        self.a_q
            .iter()
            .zip(&bounds.a_max_q)
            .all(|(a, b)| a.abs() <= b * (1.0 + tol))
            && self
                .a_v
                .iter()
                .zip(&bounds.a_max_v)
                .all(|(a, b)| a.abs() <= b * (1.0 + tol))
    }
}

/// Smoothing coefficient of a first-order IIR low-pass with cutoff `cutoff_hz`
/// sampled every `dt` seconds.
pub fn filter_coefficient(cutoff_hz: f64, dt: f64) -> f64 {
    let x = 2.0 * std::f64::consts::PI * cutoff_hz * dt;
    x / (x + 1.0)
}

/// First-order low-pass over the flat action vector.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterState {
    pub previous: Vec<f64>,
    pub alpha: f64,
}

impl FilterState {
    pub fn new(dim: usize, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::InvalidParameter(format!("filter alpha {alpha} outside (0, 1]")));
        }
        Ok(Self {
            previous: vec![0.0; dim],
            alpha,
        })
    }

    /// `y = α x + (1 - α) y_prev`.
    pub fn step(&mut self, input: &[f64]) -> Vec<f64> {
        for (y, x) in self.previous.iter_mut().zip(input) {
            *y = self.alpha * x + (1.0 - self.alpha) * *y;
        }
        self.previous.clone()
    }
}

/// The last point actually sent to the inner controller.
#[derive(Clone, Debug, PartialEq)]
pub struct CommandState {
    pub q: Vec<f64>,
    /// Finite-difference velocity of the command sequence.
    pub implied_velocity: Vec<f64>,
}

impl CommandState {
    pub fn at_rest(q: &[f64]) -> Self {
        Self {
            q: q.to_vec(),
            implied_velocity: vec![0.0; q.len()],
        }
    }
}

/// A corrected reference point, before and after limit clipping.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrectedPoint {
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    pub pre_clip_q: Vec<f64>,
    pub filtered: Action,
}

/// Applies a raw correction to the next reference point.
///
/// The action is low-pass filtered and added to the reference. The result is
/// clipped so that the implied acceleration and velocity of the command
/// sequence, and finally the position itself, respect `limits`.
pub fn apply_action(
    raw: &Action,
    filter: &mut FilterState,
    next_reference: &TrajectoryPoint,
    command: &mut CommandState,
    limits: &JointLimits,
    dt: f64,
) -> CorrectedPoint {
    let n = next_reference.q.len();
    let filtered = Action::from_flat(&filter.step(&raw.to_flat()));
    let pre_clip_q: Vec<f64> = (0..n).map(|j| next_reference.q[j] + filtered.a_q[j]).collect();
    let mut q = vec![0.0; n];
    let mut qd = vec![0.0; n];
    let mut implied = vec![0.0; n];
    for j in 0..n {
        let v_prev = command.implied_velocity[j];
        let dv = limits.qdd_max[j] * dt;
        let v = ((pre_clip_q[j] - command.q[j]) / dt)
            .clamp(v_prev - dv, v_prev + dv)
            .clamp(-limits.qd_max[j], limits.qd_max[j]);
        q[j] = (command.q[j] + v * dt).clamp(limits.q_min[j], limits.q_max[j]);
        implied[j] = (q[j] - command.q[j]) / dt;
        qd[j] = (next_reference.qd[j] + filtered.a_v[j]).clamp(-limits.qd_max[j], limits.qd_max[j]);
    }
    command.q.clone_from(&q);
    command.implied_velocity = implied;
    CorrectedPoint {
        q,
        qd,
        pre_clip_q,
        filtered,
    }
}

/// Per-joint statistics of absolute baseline tracking errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingStats {
    pub mu_q: Vec<f64>,
    pub sigma_q: Vec<f64>,
    pub mu_v: Vec<f64>,
    pub sigma_v: Vec<f64>,
}

impl ScalingStats {
    pub fn n_joints(&self) -> usize {
        self.mu_q.len()
    }

    pub fn position_range(&self, j: usize) -> f64 {
        (self.mu_q[j] + 3.0 * self.sigma_q[j]).max(MIN_ERROR_RANGE)
    }

    pub fn velocity_range(&self, j: usize) -> f64 {
        (self.mu_v[j] + 3.0 * self.sigma_v[j]).max(MIN_ERROR_RANGE)
    }

    /// `[mu_q, sigma_q, mu_v, sigma_v]` concatenated.
    pub fn to_flat(&self) -> Vec<f64> {
        [&self.mu_q, &self.sigma_q, &self.mu_v, &self.sigma_v]
            .into_iter()
            .flatten()
            .copied()
            .collect()
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.is_empty() || !flat.len().is_multiple_of(4) {
            return Err(Error::Format("scaling stats need 4N values".into()));
        }
        let n = flat.len() / 4;
        Ok(Self {
            mu_q: flat[..n].to_vec(),
            sigma_q: flat[n..2 * n].to_vec(),
            mu_v: flat[2 * n..3 * n].to_vec(),
            sigma_v: flat[3 * n..].to_vec(),
        })
    }
}

/// Signed tracking error of one point, observed minus reference.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorRecord {
    pub dq: Vec<f64>,
    pub dqd: Vec<f64>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    let mean = sum / n as f64;
    let var = values.map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

/// Population mean and standard deviation of `|Δq|` and `|Δq̇|` per joint.
pub fn compute_scaling_stats(records: &[ErrorRecord]) -> Result<ScalingStats> {
    let first = records
        .first()
        .ok_or(Error::EmptyDataset("scaling statistics need baseline error records"))?;
    let n = first.dq.len();
    let mut stats = ScalingStats {
        mu_q: vec![0.0; n],
        sigma_q: vec![0.0; n],
        mu_v: vec![0.0; n],
        sigma_v: vec![0.0; n],
    };
    for j in 0..n {
        (stats.mu_q[j], stats.sigma_q[j]) = mean_std(records.iter().map(|r| r.dq[j].abs()));
        (stats.mu_v[j], stats.sigma_v[j]) = mean_std(records.iter().map(|r| r.dqd[j].abs()));
    }
    Ok(stats)
}

/// Length of the state vector for `n` joints and `m` action dimensions.
pub fn state_dim(n: usize, m: usize) -> usize {
    12 * n + 2 * m
}

/// Past observations and actions feeding the state vector.
#[derive(Clone, Debug, PartialEq)]
pub struct StateHistory {
    /// `(p_o, a)` at `t-2` and `t-1`.
    pub older: (ObservedPoint, Action),
    pub newer: (ObservedPoint, Action),
}

impl StateHistory {
    /// Padding for the first steps of an episode.
    pub fn start(initial: &ObservedPoint) -> Self {
        let n = initial.q.len();
        Self {
            older: (initial.clone(), Action::zeros(n)),
            newer: (initial.clone(), Action::zeros(n)),
        }
    }

    pub fn push(&mut self, observed: ObservedPoint, action: Action) {
        self.older = std::mem::replace(&mut self.newer, (observed, action));
    }
}

/// Everything needed to scale state components into `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct StateScaler {
    pub limits: JointLimits,
    pub bounds: ActionBounds,
    pub stats: ScalingStats,
}

impl StateScaler {
    pub fn n_joints(&self) -> usize {
        self.limits.n_joints()
    }

    pub fn dim(&self) -> usize {
        let n = self.n_joints();
        state_dim(n, 2 * n)
    }

    fn push_point(&self, out: &mut Vec<f64>, q: &[f64], qd: &[f64]) {
        let l = &self.limits;
        for j in 0..q.len() {
            out.push(2.0 * (q[j] - l.q_min[j]) / (l.q_max[j] - l.q_min[j]) - 1.0);
        }
        for j in 0..qd.len() {
            out.push(qd[j] / l.qd_max[j]);
        }
    }

    fn push_action(&self, out: &mut Vec<f64>, a: &Action) {
        for j in 0..a.a_q.len() {
            out.push(a.a_q[j] / self.bounds.a_max_q[j]);
        }
        for j in 0..a.a_v.len() {
            out.push(a.a_v[j] / self.bounds.a_max_v[j]);
        }
    }

    /// Builds `[p_o(t-2), a(t-2), p_o(t-1), a(t-1), p_o(t), Δp_o(t), p_r(t+1), p_r(t+2)]`,
    /// every entry clamped to `[-1, 1]`.
    pub fn assemble(
        &self,
        history: &StateHistory,
        current: &ObservedPoint,
        reference_now: &TrajectoryPoint,
        reference_next: &TrajectoryPoint,
        reference_after: &TrajectoryPoint,
    ) -> Result<Vec<f64>> {
        let n = self.n_joints();
        for (ctx, len) in [
            ("state: observation", current.q.len()),
            ("state: reference", reference_now.q.len()),
            ("state: next reference", reference_next.q.len()),
            ("state: reference after next", reference_after.q.len()),
            ("state: history", history.older.0.q.len()),
            ("state: history action", history.newer.1.a_q.len()),
            ("state: scaling stats", self.stats.n_joints()),
        ] {
            check_dim(ctx, n, len)?;
        }
        let mut s = Vec::with_capacity(self.dim());
        self.push_point(&mut s, &history.older.0.q, &history.older.0.qd);
        self.push_action(&mut s, &history.older.1);
        self.push_point(&mut s, &history.newer.0.q, &history.newer.0.qd);
        self.push_action(&mut s, &history.newer.1);
        self.push_point(&mut s, &current.q, &current.qd);
        for j in 0..n {
            s.push((current.q[j] - reference_now.q[j]) / self.stats.position_range(j));
        }
        for j in 0..n {
            s.push((current.qd[j] - reference_now.qd[j]) / self.stats.velocity_range(j));
        }
        self.push_point(&mut s, &reference_next.q, &reference_next.qd);
        self.push_point(&mut s, &reference_after.q, &reference_after.qd);
        for x in s.iter_mut() {
            *x = x.clamp(-1.0, 1.0);
        }
        Ok(s)
    }
}

/// Reward weights and kernel sensitivities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardParams {
    pub omega: f64,
    pub l_q: f64,
    pub l_v: f64,
    pub scale: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self {
            omega: 0.75,
            l_q: 32.0,
            l_v: 7.0,
            scale: 10.0,
        }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(Error::InvalidParameter("omega must be in [0, 1]".into()));
        }
        if !(self.l_q > 0.0 && self.l_v > 0.0 && self.scale > 0.0) {
            return Err(Error::InvalidParameter(
                "kernel sensitivities and reward scale must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Logistic kernel `2 / (e^{xl} + e^{-xl})`.
pub fn kernel(x: f64, l: f64) -> f64 {
    2.0 / ((x * l).exp() + (-x * l).exp())
}

/// Reward and its parts for one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardBreakdown {
    /// Unscaled reward in `[0, 1]`.
    pub r: f64,
    pub r_q: f64,
    pub r_v: f64,
    pub e_q: f64,
    pub e_v: f64,
}

/// L1 tracking errors summed over joints.
pub fn tracking_errors(observed_q: &[f64], observed_qd: &[f64], reference: &TrajectoryPoint) -> (f64, f64) {
    let e_q = observed_q.iter().zip(&reference.q).map(|(a, b)| (a - b).abs()).sum();
    let e_v = observed_qd.iter().zip(&reference.qd).map(|(a, b)| (a - b).abs()).sum();
    (e_q, e_v)
}

pub fn reward(observed: &ObservedPoint, reference: &TrajectoryPoint, params: &RewardParams) -> RewardBreakdown {
    let (e_q, e_v) = tracking_errors(&observed.q, &observed.qd, reference);
    let r_q = kernel(e_q, params.l_q);
    let r_v = kernel(e_v, params.l_v);
    RewardBreakdown {
        r: params.omega * r_q + (1.0 - params.omega) * r_v,
        r_q,
        r_v,
        e_q,
        e_v,
    }
}
