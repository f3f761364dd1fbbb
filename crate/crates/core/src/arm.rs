//! Planar multi-link arm with series-elastic joints.
//!
//! Each joint is modelled after Spong: a rigid link chain driven through a
//! torsional spring by a motor rotor,
//!
//! ```text
//! M(q) q̈ + C(q, q̇) q̇ + g(q) = K_s (θ - q) - D q̇
//! J_m θ̈ = u - K_s (θ - q) - B θ̇
//! ```
//!
//! with `q` the link angles and `θ` the motor angles. The zero configuration
//! points the whole chain along +x; gravity acts along -y. Inverse dynamics use
//! a planar recursive Newton-Euler pass, and the forward problem solves the
//! mass matrix with a Cholesky factorisation.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical parameters of the simulated arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantParams {
    pub link_masses: Vec<f64>,
    pub link_lengths: Vec<f64>,
    /// Distance from the joint axis to the link centre of mass.
    pub link_com_offsets: Vec<f64>,
    /// Link inertia about its centre of mass.
    pub link_inertias: Vec<f64>,
    pub joint_stiffness: Vec<f64>,
    /// Viscous friction acting on the link side.
    pub joint_damping: Vec<f64>,
    pub motor_inertias: Vec<f64>,
    pub motor_damping: Vec<f64>,
    pub gravity: f64,
    /// Point mass attached at the tip of the last link.
    pub payload_mass: f64,
    pub position_noise_std: f64,
    pub velocity_noise_std: f64,
    pub latency_steps: usize,
    pub inner_dt: f64,
    /// Lock motor and link together (infinitely stiff joints).
    pub rigid: bool,
}

impl Default for PlantParams {
    fn default() -> Self {
        Self::two_link()
    }
}

impl PlantParams {
    /// The default two-link flexible arm.
    pub fn two_link() -> Self {
        let lengths = vec![0.5, 0.4];
        let masses = vec![1.0, 0.8];
        // Uniform rods.
        let inertias = masses.iter().zip(&lengths).map(|(m, l)| m * l * l / 12.0).collect();
        Self {
            link_com_offsets: lengths.iter().map(|l| l / 2.0).collect(),
            link_inertias: inertias,
            link_masses: masses,
            link_lengths: lengths,
            joint_stiffness: vec![300.0, 300.0],
            joint_damping: vec![0.02, 0.02],
            motor_inertias: vec![0.02, 0.02],
            motor_damping: vec![0.05, 0.05],
            gravity: 9.81,
            payload_mass: 0.0,
            position_noise_std: 5e-4,
            velocity_noise_std: 5e-3,
            latency_steps: 2,
            inner_dt: 0.002,
            rigid: false,
        }
    }

    pub fn n_joints(&self) -> usize {
        self.link_masses.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_joints();
        if n == 0 {
            return Err(Error::InvalidParameter("arm needs at least one joint".into()));
        }
        let per_joint: [(&str, &Vec<f64>); 8] = [
            ("link_masses", &self.link_masses),
            ("link_lengths", &self.link_lengths),
            ("link_com_offsets", &self.link_com_offsets),
            ("link_inertias", &self.link_inertias),
            ("joint_stiffness", &self.joint_stiffness),
            ("joint_damping", &self.joint_damping),
            ("motor_inertias", &self.motor_inertias),
            ("motor_damping", &self.motor_damping),
        ];
        for (name, v) in per_joint {
            if v.len() != n {
                return Err(Error::InvalidParameter(format!(
                    "{name} has {} entries for {n} joints",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} is not finite")));
            }
        }
        let positive: [(&str, &Vec<f64>); 5] = [
            ("link_masses", &self.link_masses),
            ("link_lengths", &self.link_lengths),
            ("link_inertias", &self.link_inertias),
            ("joint_stiffness", &self.joint_stiffness),
            ("motor_inertias", &self.motor_inertias),
        ];
        for (name, v) in positive {
            if v.iter().any(|&x| x <= 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be > 0")));
            }
        }
        if self.joint_damping.iter().chain(&self.motor_damping).any(|&x| x < 0.0) {
            return Err(Error::InvalidParameter("damping must be >= 0".into()));
        }
        if !(self.inner_dt > 0.0) {
            return Err(Error::InvalidParameter("inner_dt must be > 0".into()));
        }
        if self.payload_mass < 0.0 || self.position_noise_std < 0.0 || self.velocity_noise_std < 0.0 {
            return Err(Error::InvalidParameter("payload and noise levels must be >= 0".into()));
        }
        Ok(())
    }

    /// Rigid-body properties of each link, with the payload lumped into the
    /// last one as a point mass at its tip.
    pub fn effective_links(&self) -> Vec<LinkInertia> {
        let mut links: Vec<LinkInertia> = (0..self.n_joints())
            .map(|i| LinkInertia {
                mass: self.link_masses[i],
                length: self.link_lengths[i],
                com: self.link_com_offsets[i],
                inertia: self.link_inertias[i],
            })
            .collect();
        if self.payload_mass > 0.0 {
            let last = links.last_mut().expect("validated non-empty");
            *last = last.with_tip_mass(self.payload_mass);
        }
        links
    }

    /// Generalised gravity torque `g(q)`.
    pub fn gravity_torque(&self, q: &[f64]) -> Vec<f64> {
        let zeros = vec![0.0; q.len()];
        rnea(&self.effective_links(), self.gravity, q, &zeros, &zeros)
    }

    /// Link-side joint-space mass matrix, row-major.
    pub fn mass_matrix(&self, q: &[f64]) -> Vec<f64> {
        mass_matrix(&self.effective_links(), q)
    }

    /// Total mechanical energy: link kinetic and potential energy, spring
    /// potential and rotor kinetic energy.
    pub fn mechanical_energy(&self, state: &PlantState) -> f64 {
        let links = self.effective_links();
        let n = self.n_joints();
        let m = mass_matrix(&links, &state.q_link);
        let mut kinetic = 0.0;
        for i in 0..n {
            for j in 0..n {
                kinetic += 0.5 * state.qd_link[i] * m[i * n + j] * state.qd_link[j];
            }
        }
        let mut potential = 0.0;
        let mut angle = 0.0;
        let mut y = 0.0;
        for (i, link) in links.iter().enumerate() {
            angle += state.q_link[i];
            potential += link.mass * self.gravity * (y + link.com * angle.sin());
            y += link.length * angle.sin();
        }
        let mut elastic = 0.0;
        let mut rotor = 0.0;
        for i in 0..n {
            if self.rigid {
                rotor += 0.5 * self.motor_inertias[i] * state.qd_link[i].powi(2);
            } else {
                let deflection = state.q_motor[i] - state.q_link[i];
                elastic += 0.5 * self.joint_stiffness[i] * deflection * deflection;
                rotor += 0.5 * self.motor_inertias[i] * state.qd_motor[i].powi(2);
            }
        }
        kinetic + potential + elastic + rotor
    }
}

/// Mass properties of a single link.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinkInertia {
    pub mass: f64,
    pub length: f64,
    pub com: f64,
    pub inertia: f64,
}

impl LinkInertia {
    /// Composite body of this link and a point mass at its tip.
    pub fn with_tip_mass(&self, tip_mass: f64) -> Self {
        let mass = self.mass + tip_mass;
        let com = (self.mass * self.com + tip_mass * self.length) / mass;
        let inertia = self.inertia + self.mass * (self.com - com).powi(2) + tip_mass * (self.length - com).powi(2);
        Self {
            mass,
            length: self.length,
            com,
            inertia,
        }
    }
}

/// Returns `params` with the given payload attached to the last link. Any
/// previously configured payload is replaced, not accumulated.
pub fn set_payload(params: &PlantParams, mass: f64) -> Result<PlantParams> {
    if !(mass >= 0.0) || !mass.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "payload mass must be finite and >= 0, got {mass}"
        )));
    }
    let mut out = params.clone();
    out.payload_mass = mass;
    Ok(out)
}

/// Position, velocity and acceleration limits per joint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JointLimits {
    pub q_min: Vec<f64>,
    pub q_max: Vec<f64>,
    pub qd_max: Vec<f64>,
    pub qdd_max: Vec<f64>,
}

impl JointLimits {
    pub fn symmetric(n: usize, q: f64, qd: f64, qdd: f64) -> Self {
        Self {
            q_min: vec![-q; n],
            q_max: vec![q; n],
            qd_max: vec![qd; n],
            qdd_max: vec![qdd; n],
        }
    }

    pub fn n_joints(&self) -> usize {
        self.q_min.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_joints();
        if self.q_max.len() != n || self.qd_max.len() != n || self.qdd_max.len() != n {
            return Err(Error::InvalidParameter("joint limit vectors differ in length".into()));
        }
        for j in 0..n {
            if !(self.q_min[j] < self.q_max[j]) {
                return Err(Error::InvalidParameter(format!("q_min >= q_max at joint {j}")));
            }
            if !(self.qd_max[j] > 0.0 && self.qdd_max[j] > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "velocity and acceleration limits must be > 0 at joint {j}"
                )));
            }
        }
        Ok(())
    }
}

impl Default for JointLimits {
    fn default() -> Self {
        Self::symmetric(2, 1.5, 2.0, 4.0)
    }
}

/// Full simulator state.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantState {
    pub q_link: Vec<f64>,
    pub qd_link: Vec<f64>,
    pub q_motor: Vec<f64>,
    pub qd_motor: Vec<f64>,
    /// Torque commands waiting to reach the motors, oldest first.
    pub torque_delay_line: VecDeque<Vec<f64>>,
    pub time: f64,
}

impl PlantState {
    /// At rest with motor and link aligned and an empty (zero) delay line.
    pub fn at_rest(q: &[f64], params: &PlantParams) -> Self {
        let n = q.len();
        Self {
            q_link: q.to_vec(),
            qd_link: vec![0.0; n],
            q_motor: q.to_vec(),
            qd_motor: vec![0.0; n],
            torque_delay_line: (0..params.latency_steps).map(|_| vec![0.0; n]).collect(),
            time: 0.0,
        }
    }

    /// At rest in static equilibrium: motors pre-wound so the springs carry
    /// gravity, and the delay line pre-filled with the holding torque.
    pub fn at_equilibrium(q: &[f64], params: &PlantParams) -> Self {
        let mut state = Self::at_rest(q, params);
        let hold = params.gravity_torque(q);
        if !params.rigid {
            for j in 0..q.len() {
                state.q_motor[j] += hold[j] / params.joint_stiffness[j];
            }
        }
        for slot in state.torque_delay_line.iter_mut() {
            slot.clone_from(&hold);
        }
        state
    }

    fn is_finite(&self) -> bool {
        self.q_link
            .iter()
            .chain(&self.qd_link)
            .chain(&self.q_motor)
            .chain(&self.qd_motor)
            .all(|x| x.is_finite())
    }
}

/// Time derivative of the continuous part of [`PlantState`].
#[derive(Clone, Debug, PartialEq)]
pub struct PlantDerivative {
    pub dq_link: Vec<f64>,
    pub qdd_link: Vec<f64>,
    pub dq_motor: Vec<f64>,
    pub qdd_motor: Vec<f64>,
}

/// Planar recursive Newton-Euler inverse dynamics.
///
/// Gravity enters as an upward acceleration of the base.
pub fn rnea(links: &[LinkInertia], gravity: f64, q: &[f64], qd: &[f64], qdd: &[f64]) -> Vec<f64> {
    let n = links.len();
    let mut dirs = Vec::with_capacity(n);
    let mut com_acc = Vec::with_capacity(n);
    let mut alphas = Vec::with_capacity(n);
    let (mut theta, mut omega, mut alpha) = (0.0f64, 0.0f64, 0.0f64);
    let mut origin_acc = [0.0, gravity];
    for i in 0..n {
        theta += q[i];
        omega += qd[i];
        alpha += qdd[i];
        let u = [theta.cos(), theta.sin()];
        // α × u - ω² u for a planar rotation.
        let rel = [
            -alpha * u[1] - omega * omega * u[0],
            alpha * u[0] - omega * omega * u[1],
        ];
        let c = links[i].com;
        com_acc.push([origin_acc[0] + c * rel[0], origin_acc[1] + c * rel[1]]);
        let l = links[i].length;
        origin_acc = [origin_acc[0] + l * rel[0], origin_acc[1] + l * rel[1]];
        dirs.push(u);
        alphas.push(alpha);
    }

    let cross = |a: [f64; 2], b: [f64; 2]| a[0] * b[1] - a[1] * b[0];
    let mut tau = vec![0.0; n];
    let mut force_next = [0.0, 0.0];
    let mut moment_next = 0.0;
    for i in (0..n).rev() {
        let link = &links[i];
        let inertial = [link.mass * com_acc[i][0], link.mass * com_acc[i][1]];
        let force = [force_next[0] + inertial[0], force_next[1] + inertial[1]];
        let u = dirs[i];
        let moment = moment_next
            + link.inertia * alphas[i]
            + cross([link.com * u[0], link.com * u[1]], inertial)
            + cross([link.length * u[0], link.length * u[1]], force_next);
        tau[i] = moment;
        force_next = force;
        moment_next = moment;
    }
    tau
}

fn mass_matrix(links: &[LinkInertia], q: &[f64]) -> Vec<f64> {
    let n = links.len();
    let zeros = vec![0.0; n];
    let mut m = vec![0.0; n * n];
    let mut unit = vec![0.0; n];
    for j in 0..n {
        unit[j] = 1.0;
        let col = rnea(links, 0.0, q, &zeros, &unit);
        unit[j] = 0.0;
        for i in 0..n {
            m[i * n + j] = col[i];
        }
    }
    // Symmetrise away rounding.
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = avg;
            m[j * n + i] = avg;
        }
    }
    m
}

/// Solves `A x = b` in place for symmetric positive-definite `A`.
fn cholesky_solve(a: &mut [f64], n: usize, b: &mut [f64]) {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        assert!(d > 0.0, "mass matrix is not positive definite");
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * n + k] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= a[k * n + i] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
}

/// Continuous-time dynamics under a constant motor torque.
pub fn dynamics_derivative(state: &PlantState, torque: &[f64], params: &PlantParams) -> PlantDerivative {
    let links = params.effective_links();
    derivative_with(
        &links,
        params,
        &state.q_link,
        &state.qd_link,
        &state.q_motor,
        &state.qd_motor,
        torque,
    )
}

fn derivative_with(
    links: &[LinkInertia],
    params: &PlantParams,
    q: &[f64],
    qd: &[f64],
    theta: &[f64],
    thetad: &[f64],
    torque: &[f64],
) -> PlantDerivative {
    let n = links.len();
    let zeros = vec![0.0; n];
    let bias = rnea(links, params.gravity, q, qd, &zeros);
    let mut m = mass_matrix(links, q);
    if params.rigid {
        let mut rhs: Vec<f64> = (0..n)
            .map(|i| {
                m[i * n + i] += params.motor_inertias[i];
                torque[i] - bias[i] - (params.joint_damping[i] + params.motor_damping[i]) * qd[i]
            })
            .collect();
        cholesky_solve(&mut m, n, &mut rhs);
        return PlantDerivative {
            dq_link: qd.to_vec(),
            qdd_link: rhs.clone(),
            dq_motor: qd.to_vec(),
            qdd_motor: rhs,
        };
    }
    let spring: Vec<f64> = (0..n).map(|i| params.joint_stiffness[i] * (theta[i] - q[i])).collect();
    let mut link_rhs: Vec<f64> = (0..n)
        .map(|i| spring[i] - params.joint_damping[i] * qd[i] - bias[i])
        .collect();
    cholesky_solve(&mut m, n, &mut link_rhs);
    let motor_acc = (0..n)
        .map(|i| (torque[i] - spring[i] - params.motor_damping[i] * thetad[i]) / params.motor_inertias[i])
        .collect();
    PlantDerivative {
        dq_link: qd.to_vec(),
        qdd_link: link_rhs,
        dq_motor: thetad.to_vec(),
        qdd_motor: motor_acc,
    }
}

/// Advances the plant by one `inner_dt` with classic fourth-order Runge-Kutta.
///
/// `torque_command` enters the actuator delay line; the oldest queued command
/// is the one applied (zero-order hold) during this step.
pub fn plant_step(state: &PlantState, torque_command: &[f64], params: &PlantParams) -> Result<PlantState> {
    let links = params.effective_links();
    plant_step_with(&links, state, torque_command, params)
}

pub(crate) fn plant_step_with(
    links: &[LinkInertia],
    state: &PlantState,
    torque_command: &[f64],
    params: &PlantParams,
) -> Result<PlantState> {
    let n = links.len();
    let mut next = state.clone();
    let applied = if params.latency_steps == 0 {
        torque_command.to_vec()
    } else {
        next.torque_delay_line.push_back(torque_command.to_vec());
        next.torque_delay_line
            .pop_front()
            .expect("delay line holds latency_steps entries")
    };

    let dt = params.inner_dt;
    let pack = |d: &PlantDerivative| -> Vec<f64> {
        let mut v = Vec::with_capacity(4 * n);
        v.extend_from_slice(&d.dq_link);
        v.extend_from_slice(&d.qdd_link);
        v.extend_from_slice(&d.dq_motor);
        v.extend_from_slice(&d.qdd_motor);
        v
    };
    let mut x0 = Vec::with_capacity(4 * n);
    x0.extend_from_slice(&state.q_link);
    x0.extend_from_slice(&state.qd_link);
    x0.extend_from_slice(&state.q_motor);
    x0.extend_from_slice(&state.qd_motor);
    let eval = |x: &[f64]| {
        pack(&derivative_with(
            links,
            params,
            &x[0..n],
            &x[n..2 * n],
            &x[2 * n..3 * n],
            &x[3 * n..4 * n],
            &applied,
        ))
    };
    let offset = |k: &[f64], h: f64| -> Vec<f64> { x0.iter().zip(k).map(|(x, k)| x + h * k).collect() };

    let k1 = eval(&x0);
    let k2 = eval(&offset(&k1, dt / 2.0));
    let k3 = eval(&offset(&k2, dt / 2.0));
    let k4 = eval(&offset(&k3, dt));
    let x1: Vec<f64> = (0..4 * n)
        .map(|i| x0[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();

    next.q_link.copy_from_slice(&x1[0..n]);
    next.qd_link.copy_from_slice(&x1[n..2 * n]);
    next.q_motor.copy_from_slice(&x1[2 * n..3 * n]);
    next.qd_motor.copy_from_slice(&x1[3 * n..4 * n]);
    next.time = state.time + dt;
    if !next.is_finite() {
        return Err(Error::PlantDivergence {
            time: next.time,
            detail: "non-finite state after integration step".into(),
        });
    }
    Ok(next)
}

/// Gains of the inner-loop PD controller.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineGains {
    pub kp: Vec<f64>,
    pub kd: Vec<f64>,
    pub torque_limit: Vec<f64>,
}

/// Motor-side PD law with a gravity feed-forward term, clamped to the torque
/// limits: `u = Kp (q_des - θ) + Kd (q̇_des - θ̇) + ĝ`.
pub fn baseline_torque(
    q_des: &[f64],
    qd_des: &[f64],
    q_motor: &[f64],
    qd_motor: &[f64],
    gains: &BaselineGains,
    gravity_feedforward: &[f64],
) -> Vec<f64> {
    (0..q_des.len())
        .map(|j| {
            let u = gains.kp[j] * (q_des[j] - q_motor[j])
                + gains.kd[j] * (qd_des[j] - qd_motor[j])
                + gravity_feedforward[j];
            u.clamp(-gains.torque_limit[j], gains.torque_limit[j])
        })
        .collect()
}

/// The inner-loop controller: PD on the motor side plus feed-forward from a
/// deliberately inaccurate gravity model.
#[derive(Clone, Debug)]
pub struct BaselineController {
    pub gains: BaselineGains,
    model: PlantParams,
}

impl BaselineController {
    /// `mass_scale` multiplies every link mass of the controller's internal
    /// gravity model; the model never knows about the payload.
    pub fn new(gains: BaselineGains, nominal: &PlantParams, mass_scale: f64) -> Self {
        let mut model = nominal.clone();
        model.payload_mass = 0.0;
        for m in &mut model.link_masses {
            *m *= mass_scale;
        }
        Self { gains, model }
    }

    pub fn gravity_feedforward(&self, q_des: &[f64]) -> Vec<f64> {
        self.model.gravity_torque(q_des)
    }

    pub fn torque(&self, q_des: &[f64], qd_des: &[f64], q_motor: &[f64], qd_motor: &[f64]) -> Vec<f64> {
        let ff = self.gravity_feedforward(q_des);
        baseline_torque(q_des, qd_des, q_motor, qd_motor, &self.gains, &ff)
    }
}

/// Link-side joint positions and velocities as read from the encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservedPoint {
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
}

/// Reads the link-side state with additive Gaussian encoder noise.
pub fn observe<R: Rng + ?Sized>(state: &PlantState, params: &PlantParams, rng: &mut R) -> ObservedPoint {
    let mut noisy = |x: &[f64], std: f64| -> Vec<f64> {
        if std == 0.0 {
            return x.to_vec();
        }
        x.iter()
            .map(|v| v + std * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    ObservedPoint {
        q: noisy(&state.q_link, params.position_noise_std),
        qd: noisy(&state.qd_link, params.velocity_noise_std),
    }
}

/// Planar end-effector position.
pub fn forward_kinematics(q: &[f64], params: &PlantParams) -> [f64; 2] {
    let mut angle = 0.0;
    let mut p = [0.0, 0.0];
    for (qj, l) in q.iter().zip(&params.link_lengths) {
        angle += qj;
        p[0] += l * angle.cos();
        p[1] += l * angle.sin();
    }
    p
}
