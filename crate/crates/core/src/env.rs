//! Episode execution shared by the true plant and the learned simulator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arm::{
    forward_kinematics, observe, plant_step_with, BaselineController, BaselineGains, JointLimits, LinkInertia,
    ObservedPoint, PlantParams, PlantState,
};
use crate::dynamics::DynModel;
use crate::error::{Error, Result};
use crate::mdp::{
    apply_action, reward, Action, ActionBounds, CommandState, CorrectedPoint, FilterState, RewardParams, StateHistory,
    StateScaler,
};
use crate::sac::{rescale_action, SacAgent, Transition};
use crate::trajectory::{ReferenceTrajectory, TrajectoryPoint};

/// Independent random streams, one per consumer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    AgentInit = 1,
    TrainTrajectory = 2,
    TestCorpus = 3,
    CollectTrajectory = 4,
    PretrainTrajectory = 5,
    Noise = 6,
    Policy = 7,
    Update = 8,
    DynamicsInit = 9,
    DynamicsShuffle = 10,
    EvalNoise = 11,
}

/// Deterministic generator for `(seed, purpose, index)`.
pub fn stream_rng(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 48) ^ index);
    rng
}

/// Inner-loop controller settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    pub gains: BaselineGains,
    /// Mass multiplier of the controller's gravity model.
    pub model_mass_scale: f64,
    /// Time spent holding the first reference point before an episode.
    pub settle_time: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            gains: BaselineGains {
                kp: vec![72.0, 36.0],
                kd: vec![2.4, 1.2],
                torque_limit: vec![20.0, 20.0],
            },
            model_mass_scale: 0.7,
            settle_time: 1.0,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        let g = &self.gains;
        if g.kp.len() != n || g.kd.len() != n || g.torque_limit.len() != n {
            return Err(Error::InvalidParameter(
                "controller gains must have one entry per joint".into(),
            ));
        }
        let ok = g.kp.iter().chain(&g.kd).all(|x| *x >= 0.0 && x.is_finite())
            && g.torque_limit.iter().all(|x| *x > 0.0)
            && self.model_mass_scale >= 0.0
            && self.settle_time >= 0.0;
        if !ok {
            return Err(Error::InvalidParameter(
                "gains must be non-negative, torque limits and scales positive".into(),
            ));
        }
        Ok(())
    }
}

/// Something that turns corrected reference points into observations.
pub trait Backend {
    fn n_joints(&self) -> usize;
    /// Starts an episode holding `start` and returns the first observation.
    fn reset<R: Rng + ?Sized>(&mut self, start: &TrajectoryPoint, rng: &mut R) -> Result<ObservedPoint>;
    /// Executes one outer step towards `command` and returns the next
    /// observation.
    fn step<R: Rng + ?Sized>(&mut self, command_q: &[f64], command_qd: &[f64], rng: &mut R) -> Result<ObservedPoint>;
}

/// The simulated flexible-joint arm under its baseline controller.
pub struct PlantBackend {
    params: PlantParams,
    links: Vec<LinkInertia>,
    controller: BaselineController,
    inner_steps: usize,
    settle_steps: usize,
    state: PlantState,
    last_q: Vec<f64>,
    last_qd: Vec<f64>,
}

impl PlantBackend {
    /// `nominal` feeds the controller's gravity model (never the payload);
    /// `params` is the plant actually simulated.
    pub fn new(
        params: PlantParams,
        nominal: &PlantParams,
        controller: &ControllerConfig,
        outer_dt: f64,
    ) -> Result<Self> {
        params.validate()?;
        controller.validate(params.n_joints())?;
        let ratio = outer_dt / params.inner_dt;
        let inner_steps = ratio.round() as usize;
        if inner_steps == 0 || (ratio - inner_steps as f64).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "outer dt {outer_dt} is not a whole multiple of inner dt {}",
                params.inner_dt
            )));
        }
        let n = params.n_joints();
        Ok(Self {
            links: params.effective_links(),
            controller: BaselineController::new(controller.gains.clone(), nominal, controller.model_mass_scale),
            inner_steps,
            settle_steps: (controller.settle_time / params.inner_dt).round() as usize,
            state: PlantState::at_rest(&vec![0.0; n], &params),
            last_q: vec![0.0; n],
            last_qd: vec![0.0; n],
            params,
        })
    }

    pub fn state(&self) -> &PlantState {
        &self.state
    }

    fn inner_step(&mut self, q_des: &[f64], qd_des: &[f64]) -> Result<()> {
        let u = self
            .controller
            .torque(q_des, qd_des, &self.state.q_motor, &self.state.qd_motor);
        self.state = plant_step_with(&self.links, &self.state, &u, &self.params)?;
        Ok(())
    }
}

impl Backend for PlantBackend {
    fn n_joints(&self) -> usize {
        self.params.n_joints()
    }

    fn reset<R: Rng + ?Sized>(&mut self, start: &TrajectoryPoint, rng: &mut R) -> Result<ObservedPoint> {
        self.state = PlantState::at_equilibrium(&start.q, &self.params);
        let zero = vec![0.0; start.q.len()];
        for _ in 0..self.settle_steps {
            self.inner_step(&start.q, &zero)?;
        }
        self.state.time = 0.0;
        self.last_q.clone_from(&start.q);
        self.last_qd.clone_from(&zero);
        Ok(observe(&self.state, &self.params, rng))
    }

    fn step<R: Rng + ?Sized>(&mut self, command_q: &[f64], command_qd: &[f64], rng: &mut R) -> Result<ObservedPoint> {
        let n = command_q.len();
        let mut q_des = vec![0.0; n];
        let mut qd_des = vec![0.0; n];
        for k in 1..=self.inner_steps {
            let w = k as f64 / self.inner_steps as f64;
            for j in 0..n {
                q_des[j] = self.last_q[j] + w * (command_q[j] - self.last_q[j]);
                qd_des[j] = self.last_qd[j] + w * (command_qd[j] - self.last_qd[j]);
            }
            self.inner_step(&q_des, &qd_des)?;
        }
        self.last_q.copy_from_slice(command_q);
        self.last_qd.copy_from_slice(command_qd);
        Ok(observe(&self.state, &self.params, rng))
    }
}

/// Closed-loop rollout of a learned one-step model.
pub struct LearnedSimBackend<'a> {
    model: &'a DynModel,
    settle_steps: usize,
    current: ObservedPoint,
}

impl<'a> LearnedSimBackend<'a> {
    pub fn new(model: &'a DynModel, settle_steps: usize) -> Self {
        let n = model.n_joints();
        Self {
            model,
            settle_steps,
            current: ObservedPoint {
                q: vec![0.0; n],
                qd: vec![0.0; n],
            },
        }
    }
}

impl Backend for LearnedSimBackend<'_> {
    fn n_joints(&self) -> usize {
        self.model.n_joints()
    }

    fn reset<R: Rng + ?Sized>(&mut self, start: &TrajectoryPoint, _rng: &mut R) -> Result<ObservedPoint> {
        self.current = ObservedPoint {
            q: start.q.clone(),
            qd: vec![0.0; start.q.len()],
        };
        for _ in 0..self.settle_steps {
            self.current = self.model.predict(&self.current, &start.q, &start.qd)?;
        }
        Ok(self.current.clone())
    }

    fn step<R: Rng + ?Sized>(&mut self, command_q: &[f64], command_qd: &[f64], _rng: &mut R) -> Result<ObservedPoint> {
        self.current = self.model.predict(&self.current, command_q, command_qd)?;
        Ok(self.current.clone())
    }
}

/// How actions are chosen during an episode.
#[derive(Clone, Copy)]
pub enum Policy<'a> {
    /// No correction: the reference goes straight to the controller.
    Baseline,
    /// Sampled Beta actions; transitions are recorded.
    Stochastic(&'a SacAgent),
    /// Mode actions for evaluation.
    Mode(&'a SacAgent),
}

/// Fixed ingredients of the decision process.
#[derive(Clone, Debug)]
pub struct MdpContext {
    pub limits: JointLimits,
    pub bounds: ActionBounds,
    pub reward: RewardParams,
    pub filter_alpha: f64,
    pub dt: f64,
    /// Needed only when a policy is consulted.
    pub scaler: Option<StateScaler>,
    /// Link lengths used for end-effector errors.
    pub kinematics: PlantParams,
}

/// Per-step record of one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// Index `t + 1` of the reference point the step was aiming at.
    pub index: usize,
    pub q_r: Vec<f64>,
    pub qd_r: Vec<f64>,
    pub q_f: Vec<f64>,
    pub qd_f: Vec<f64>,
    pub q_o: Vec<f64>,
    pub qd_o: Vec<f64>,
    /// Observation at the start of the step, `p_o(t)`.
    pub q_o_prev: Vec<f64>,
    pub qd_o_prev: Vec<f64>,
    pub r: f64,
    pub e_q: f64,
    pub e_v: f64,
    pub ee_error: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpisodeSummary {
    pub mean_reward: f64,
    pub mean_e_q: f64,
    pub mean_e_v: f64,
    pub mean_ee_error: f64,
    pub steps: usize,
}

#[derive(Clone, Debug)]
pub struct EpisodeOutcome {
    pub summary: EpisodeSummary,
    pub steps: Vec<StepRecord>,
    /// Empty unless the policy was stochastic.
    pub transitions: Vec<Transition>,
}

/// Safety contract on a corrected point: the pre-clip correction stays inside
/// the position bound and the command stays inside the joint limits.
pub fn check_action_safety(
    corrected: &CorrectedPoint,
    reference: &TrajectoryPoint,
    bounds: &ActionBounds,
    limits: &JointLimits,
) -> Result<()> {
    const SLACK: f64 = 1e-12;
    for j in 0..reference.q.len() {
        let shift = (corrected.pre_clip_q[j] - reference.q[j]).abs();
        if shift > bounds.a_max_q[j] + SLACK {
            return Err(Error::SafetyViolation(format!(
                "joint {j}: correction {shift} exceeds bound {}",
                bounds.a_max_q[j]
            )));
        }
        if corrected.q[j] < limits.q_min[j] || corrected.q[j] > limits.q_max[j] {
            return Err(Error::SafetyViolation(format!(
                "joint {j}: command {} outside limits",
                corrected.q[j]
            )));
        }
    }
    Ok(())
}

/// Runs one trajectory from start to finish.
///
/// A trajectory with `T` points yields `T - 1` steps. The reward of step `t`
/// compares `p_o(t+1)` with `p_r(t+1)`; transitions store the scaled reward
/// and mark the last step as terminal.
pub fn run_episode<B: Backend, R: Rng + ?Sized>(
    backend: &mut B,
    traj: &ReferenceTrajectory,
    policy: Policy<'_>,
    ctx: &MdpContext,
    noise_rng: &mut R,
    policy_rng: &mut R,
) -> Result<EpisodeOutcome> {
    let n = traj.n_joints();
    if traj.len() < 2 {
        return Err(Error::InvalidParameter(format!("trajectory {} is too short", traj.id)));
    }
    let needs_state = !matches!(policy, Policy::Baseline);
    let scaler = match (needs_state, &ctx.scaler) {
        (true, None) => {
            return Err(Error::InvalidParameter(
                "policy episodes need scaling statistics".into(),
            ))
        }
        (_, s) => s.as_ref(),
    };

    let mut observed = backend.reset(&traj.points[0], noise_rng)?;
    let mut history = StateHistory::start(&observed);
    let mut filter = FilterState::new(2 * n, ctx.filter_alpha)?;
    let mut command = CommandState::at_rest(&traj.points[0].q);
    let steps = traj.len() - 1;
    let assemble = |history: &StateHistory, observed: &ObservedPoint, t: usize| -> Result<Vec<f64>> {
        scaler.expect("checked above").assemble(
            history,
            observed,
            traj.point_clamped(t),
            traj.point_clamped(t + 1),
            traj.point_clamped(t + 2),
        )
    };
    let mut state = if needs_state {
        assemble(&history, &observed, 0)?
    } else {
        Vec::new()
    };

    let mut records = Vec::with_capacity(steps);
    let mut transitions = Vec::new();
    let mut sum = EpisodeSummary::default();
    for t in 0..steps {
        let (u, action) = match policy {
            Policy::Baseline => (None, Action::zeros(n)),
            Policy::Stochastic(agent) => {
                let (u, _) = agent.act(&state, policy_rng)?;
                let (a, _) = rescale_action(&u, &ctx.bounds);
                (Some(u), a)
            }
            Policy::Mode(agent) => {
                let u = agent.act_mode(&state)?;
                let (a, _) = rescale_action(&u, &ctx.bounds);
                (None, a)
            }
        };
        let reference = &traj.points[t + 1];
        let corrected = apply_action(&action, &mut filter, reference, &mut command, &ctx.limits, ctx.dt);
        check_action_safety(&corrected, reference, &ctx.bounds, &ctx.limits)?;
        let next = backend.step(&corrected.q, &corrected.qd, noise_rng)?;
        let rb = reward(&next, reference, &ctx.reward);
        let ee_r = forward_kinematics(&reference.q, &ctx.kinematics);
        let ee_o = forward_kinematics(&next.q, &ctx.kinematics);
        let ee_error = ((ee_r[0] - ee_o[0]).powi(2) + (ee_r[1] - ee_o[1]).powi(2)).sqrt();

        let previous = std::mem::replace(&mut observed, next);
        history.push(previous.clone(), action);
        if needs_state {
            let next_state = assemble(&history, &observed, t + 1)?;
            if let Some(u) = u {
                transitions.push(Transition {
                    s: std::mem::take(&mut state),
                    u,
                    r: ctx.reward.scale * rb.r,
                    s_next: next_state.clone(),
                    done: t + 1 == steps,
                });
            }
            state = next_state;
        }

        sum.mean_reward += rb.r;
        sum.mean_e_q += rb.e_q;
        sum.mean_e_v += rb.e_v;
        sum.mean_ee_error += ee_error;
        records.push(StepRecord {
            index: t + 1,
            q_r: reference.q.clone(),
            qd_r: reference.qd.clone(),
            q_f: corrected.q,
            qd_f: corrected.qd,
            q_o: observed.q.clone(),
            qd_o: observed.qd.clone(),
            q_o_prev: previous.q,
            qd_o_prev: previous.qd,
            r: rb.r,
            e_q: rb.e_q,
            e_v: rb.e_v,
            ee_error,
        });
    }
    let k = steps as f64;
    sum.mean_reward /= k;
    sum.mean_e_q /= k;
    sum.mean_e_v /= k;
    sum.mean_ee_error /= k;
    sum.steps = steps;
    Ok(EpisodeOutcome {
        summary: sum,
        steps: records,
        transitions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{compute_action_bounds, filter_coefficient, ScalingStats};
    use crate::sac::SacConfig;
    use crate::trajectory::{generate_random_trajectory, TrajectoryConfig};

    fn context(scaler: bool) -> MdpContext {
        let limits = JointLimits::default();
        let bounds = compute_action_bounds(&limits, 0.05).unwrap();
        MdpContext {
            scaler: scaler.then(|| StateScaler {
                limits: limits.clone(),
                bounds: bounds.clone(),
                stats: ScalingStats {
                    mu_q: vec![0.01; 2],
                    sigma_q: vec![0.01; 2],
                    mu_v: vec![0.05; 2],
                    sigma_v: vec![0.05; 2],
                },
            }),
            limits,
            bounds,
            reward: RewardParams::default(),
            filter_alpha: filter_coefficient(4.0, 0.05),
            dt: 0.05,
            kinematics: PlantParams::two_link(),
        }
    }

    fn plant() -> PlantBackend {
        let p = PlantParams::two_link();
        PlantBackend::new(p.clone(), &p, &ControllerConfig::default(), 0.05).unwrap()
    }

    fn trajectory(seed: u64) -> ReferenceTrajectory {
        let mut rng = stream_rng(seed, Purpose::TrainTrajectory, 0);
        generate_random_trajectory(&mut rng, "t", &JointLimits::default(), &TrajectoryConfig::default()).unwrap()
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream_rng(1, Purpose::Noise, 3).random();
        let b: u64 = stream_rng(1, Purpose::Noise, 3).random();
        let c: u64 = stream_rng(1, Purpose::Noise, 4).random();
        let d: u64 = stream_rng(1, Purpose::Policy, 3).random();
        let e: u64 = stream_rng(2, Purpose::Noise, 3).random();
        assert_eq!(a, b);
        assert!(a != c && a != d && a != e);
    }

    #[test]
    fn inner_rate_must_divide_outer_rate() {
        let p = PlantParams::two_link();
        assert!(PlantBackend::new(p.clone(), &p, &ControllerConfig::default(), 0.051).is_err());
    }

    #[test]
    fn baseline_episode_counts_and_reproducibility() {
        let traj = trajectory(3);
        let ctx = context(false);
        let run = || {
            let mut noise = stream_rng(9, Purpose::Noise, 0);
            let mut pol = stream_rng(9, Purpose::Policy, 0);
            run_episode(&mut plant(), &traj, Policy::Baseline, &ctx, &mut noise, &mut pol).unwrap()
        };
        let a = run();
        assert_eq!(a.steps.len(), traj.len() - 1);
        assert!(a.transitions.is_empty());
        assert!(a.summary.mean_e_q > 0.0);
        for s in &a.steps {
            assert_eq!(s.q_f, s.q_r);
        }
        assert_eq!(a.steps, run().steps);
    }

    #[test]
    fn stochastic_episode_records_transitions_safely() {
        let traj = trajectory(4);
        let ctx = context(true);
        let agent = SacAgent::new(SacConfig::default(), 32, 4, &mut stream_rng(1, Purpose::AgentInit, 0)).unwrap();
        let mut noise = stream_rng(2, Purpose::Noise, 0);
        let mut pol = stream_rng(2, Purpose::Policy, 0);
        let out = run_episode(
            &mut plant(),
            &traj,
            Policy::Stochastic(&agent),
            &ctx,
            &mut noise,
            &mut pol,
        )
        .unwrap();
        assert_eq!(out.transitions.len(), traj.len() - 1);
        assert!(out.transitions.last().unwrap().done);
        assert!(out.transitions[..out.transitions.len() - 1].iter().all(|t| !t.done));
        for w in out.transitions.windows(2) {
            assert_eq!(w[0].s_next, w[1].s);
        }
        for (t, s) in out.transitions.iter().zip(&out.steps) {
            assert!((t.r - 10.0 * s.r).abs() < 1e-12);
            assert!(t.s.iter().all(|x| x.abs() <= 1.0));
        }
        for s in &out.steps {
            for j in 0..2 {
                assert!((s.q_f[j] - s.q_r[j]).abs() <= ctx.bounds.a_max_q[j] + 1e-12);
            }
        }
    }

    #[test]
    fn policy_episode_without_stats_is_rejected() {
        let traj = trajectory(5);
        let agent = SacAgent::new(SacConfig::default(), 32, 4, &mut stream_rng(1, Purpose::AgentInit, 0)).unwrap();
        let mut r1 = stream_rng(0, Purpose::Noise, 0);
        let mut r2 = stream_rng(0, Purpose::Policy, 0);
        assert!(run_episode(
            &mut plant(),
            &traj,
            Policy::Mode(&agent),
            &context(false),
            &mut r1,
            &mut r2
        )
        .is_err());
    }

    #[test]
    fn safety_check_flags_oversized_corrections() {
        let ctx = context(false);
        let reference = TrajectoryPoint::at_rest(vec![0.0, 0.0]);
        let ok = CorrectedPoint {
            q: vec![0.04, 0.0],
            qd: vec![0.0, 0.0],
            pre_clip_q: vec![0.04, 0.0],
            filtered: Action::zeros(2),
        };
        assert!(check_action_safety(&ok, &reference, &ctx.bounds, &ctx.limits).is_ok());
        let too_far = CorrectedPoint {
            pre_clip_q: vec![0.06, 0.0],
            ..ok.clone()
        };
        assert!(check_action_safety(&too_far, &reference, &ctx.bounds, &ctx.limits).is_err());
        let outside = CorrectedPoint {
            q: vec![1.6, 0.0],
            ..ok
        };
        assert!(check_action_safety(&outside, &reference, &ctx.bounds, &ctx.limits).is_err());
    }
}
