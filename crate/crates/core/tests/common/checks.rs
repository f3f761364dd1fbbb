//! Property checks reported by the acceptance harness and asserted by the
//! integration tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use refcomp_core::arm::{forward_kinematics, plant_step, ObservedPoint, PlantParams, PlantState};
use refcomp_core::dynamics::DynTrainConfig;
use refcomp_core::mdp::{filter_coefficient, kernel, reward, ActionBounds, FilterState, RewardParams};
use refcomp_core::nn::{Activation, Mlp};
use refcomp_core::sac::{
    action_mode, beta_log_pdf, rescale_action, sample_action, weighted_log_prob_grad, BetaHead, ReplayBuffer, SacAgent,
    SacConfig, Transition, UpdateMask, BETA_CLIP_FLOOR,
};
use refcomp_core::trajectory::TrajectoryPoint;

use super::*;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail }
    }
}

// Reward and kernel.

pub fn perfect_tracking_reward() -> Outcome {
    let reference = TrajectoryPoint {
        q: vec![0.3, -0.7],
        qd: vec![0.1, 0.4],
    };
    let observed = ObservedPoint {
        q: reference.q.clone(),
        qd: reference.qd.clone(),
    };
    let r = reward(&observed, &reference, &RewardParams::default()).r;
    Outcome::new(r == 1.0, format!("r = {r:?} at zero error"))
}

/// The implementation against an integer-arithmetic evaluation of the same
/// expression at `xl = 1.6`.
pub fn kernel_against_oracle() -> Outcome {
    let k = kernel(0.05, 32.0);
    let oracle = kernel_fixed_point(8, 5);
    let diff = (k - oracle).abs();
    Outcome::new(
        diff <= 1e-12,
        format!("K(0.05, 32) = {k:.16}, oracle {oracle:.16}, |diff| = {diff:.1e}"),
    )
}

/// The literal value requested for `K(0.05, 32)`.
pub fn kernel_literal() -> Outcome {
    let k = kernel(0.05, 32.0);
    let oracle = kernel_fixed_point(8, 5);
    let diff = (k - 0.38800).abs();
    Outcome::new(
        diff <= 1e-5,
        format!(
            "K(0.05, 32) = {k:.7} vs literal 0.38800: |diff| = {diff:.2e} > 1e-5; \
             the oracle gives {oracle:.7}, which rounds to 0.3880 at four decimals but not to 0.38800 at five"
        ),
    )
}

pub fn kernel_sweep() -> Outcome {
    let mut ok = true;
    for l in [32.0, 7.0] {
        let mut prev = f64::INFINITY;
        for i in 0..10_000 {
            let x = i as f64 * 1e-4;
            let k = kernel(x, l);
            ok &= kernel(-x, l) == k && k < prev;
            prev = k;
        }
    }
    Outcome::new(ok, "l in {32, 7}, |x| in [0, 0.9999], 1e4 points each".into())
}

// Gradients.

/// Fresh random parameters with the layout of `net`.
fn randomized(net: &Mlp, rng: &mut ChaCha8Rng) -> Mlp {
    let sizes: Vec<usize> = std::iter::once(net.input_dim())
        .chain(net.layers.iter().map(|l| l.rows))
        .collect();
    let hidden = net.layers[0].activation;
    let output = net.layers.last().unwrap().activation;
    let mut fresh = Mlp::new(&sizes, hidden, output, rng);
    for layer in &mut fresh.layers {
        for b in &mut layer.biases {
            *b = rng.random_range(-0.2..0.2);
        }
    }
    fresh
}

/// Eight coordinates from each layer's weights and biases.
fn layer_coords(net: &Mlp, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut coords = vec![];
    let mut offset = 0;
    for layer in &net.layers {
        let len = layer.weights.len() + layer.biases.len();
        coords.extend(pick_coords(rng, len, 8).into_iter().map(|c| c + offset));
        offset += len;
    }
    coords
}

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOL: f64 = 1e-4;

fn gradient_outcome(errors: &[f64]) -> Outcome {
    let worst = errors.iter().copied().fold(0.0, f64::max);
    Outcome::new(
        worst <= FD_TOL,
        format!(
            "{} points, worst relative error {worst:.2e} (tol {FD_TOL:.0e})",
            errors.len()
        ),
    )
}

/// Actor: the score-function surrogate `Σ w_j log π(u_j | s_i)` through the
/// Beta head, the clip-and-scale and the network.
pub fn actor_gradients(points: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let template = SacAgent::new(SacConfig::default(), 32, 4, &mut rng).unwrap().actor;
    let (batch, k) = (3, 2);
    let errors: Vec<f64> = (0..points)
        .map(|_| {
            let net = randomized(&template, &mut rng);
            let states = uniform_vec(&mut rng, batch * 32, 1.0);
            let cache = net.forward_batch(&states, batch).unwrap();
            let mut samples = vec![];
            for i in 0..batch {
                let head = BetaHead::from_sigmoid(&cache.output()[i * 8..(i + 1) * 8]);
                for _ in 0..k {
                    samples.push(sample_action(&head, &mut rng).0);
                }
            }
            let weights = uniform_vec(&mut rng, batch * k, 1.0);
            let analytic = flat_grads(&weighted_log_prob_grad(&net, &cache, &samples, &weights).unwrap());
            let loss = |n: &Mlp| {
                let out = n.predict_batch(&states, batch).unwrap();
                (0..batch * k)
                    .map(|j| {
                        let i = j / k;
                        weights[j] * BetaHead::from_sigmoid(&out[i * 8..(i + 1) * 8]).log_prob(&samples[j])
                    })
                    .sum::<f64>()
            };
            let coords = layer_coords(&net, &mut rng);
            let numeric = numeric_grad(&net, &coords, FD_STEP, &loss);
            let picked: Vec<f64> = coords.iter().map(|&c| analytic[c]).collect();
            relative_error(&picked, &numeric)
        })
        .collect();
    gradient_outcome(&errors)
}

/// Critic: a weighted sum of Q values over a batch.
pub fn critic_gradients(points: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let template = SacAgent::new(SacConfig::default(), 32, 4, &mut rng).unwrap().critic1;
    let batch = 4;
    let errors: Vec<f64> = (0..points)
        .map(|_| {
            let net = randomized(&template, &mut rng);
            let inputs = uniform_vec(&mut rng, batch * 36, 1.0);
            let weights = uniform_vec(&mut rng, batch, 1.0);
            let cache = net.forward_batch(&inputs, batch).unwrap();
            let analytic = flat_grads(&net.backward(&cache, &weights, false).unwrap().0);
            let loss = |n: &Mlp| {
                let q = n.predict_batch(&inputs, batch).unwrap();
                q.iter().zip(&weights).map(|(q, w)| q * w).sum::<f64>()
            };
            let coords = layer_coords(&net, &mut rng);
            let numeric = numeric_grad(&net, &coords, FD_STEP, &loss);
            let picked: Vec<f64> = coords.iter().map(|&c| analytic[c]).collect();
            relative_error(&picked, &numeric)
        })
        .collect();
    gradient_outcome(&errors)
}

/// Dynamics model: mean squared error against random targets.
pub fn dynamics_gradients(points: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 2;
    let mut sizes = vec![4 * n];
    sizes.extend(DynTrainConfig::default().hidden);
    sizes.push(2 * n);
    let template = Mlp::new(&sizes, Activation::Tanh, Activation::Linear, &mut rng);
    let (batch, out) = (5, 2 * n);
    let errors: Vec<f64> = (0..points)
        .map(|_| {
            let net = randomized(&template, &mut rng);
            let inputs = uniform_vec(&mut rng, batch * 4 * n, 2.0);
            let targets = uniform_vec(&mut rng, batch * out, 1.0);
            let cache = net.forward_batch(&inputs, batch).unwrap();
            let scale = 1.0 / (batch * out) as f64;
            let d_out: Vec<f64> = cache
                .output()
                .iter()
                .zip(&targets)
                .map(|(y, t)| 2.0 * (y - t) * scale)
                .collect();
            let analytic = flat_grads(&net.backward(&cache, &d_out, false).unwrap().0);
            let loss = |m: &Mlp| {
                let y = m.predict_batch(&inputs, batch).unwrap();
                y.iter().zip(&targets).map(|(y, t)| (y - t).powi(2)).sum::<f64>() * scale
            };
            let coords = layer_coords(&net, &mut rng);
            let numeric = numeric_grad(&net, &coords, FD_STEP, &loss);
            let picked: Vec<f64> = coords.iter().map(|&c| analytic[c]).collect();
            relative_error(&picked, &numeric)
        })
        .collect();
    gradient_outcome(&errors)
}

// Beta policy.

/// Raw sigmoid outputs covering the clip floor, both ends and log-spaced
/// values in between.
fn random_sigmoid<R: Rng>(rng: &mut R) -> f64 {
    match rng.random_range(0..10) {
        0 => 0.0,
        1 => 1.0,
        2 => BETA_CLIP_FLOOR,
        _ => 10f64.powf(rng.random_range(-5.5..0.0)),
    }
}

pub fn random_head<R: Rng>(rng: &mut R, m: usize) -> BetaHead {
    let raw: Vec<f64> = (0..2 * m).map(|_| random_sigmoid(rng)).collect();
    BetaHead::from_sigmoid(&raw)
}

pub fn beta_normalization(heads: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut worst_at = (0.0, 0.0);
    for _ in 0..heads {
        let head = random_head(&mut rng, 4);
        for d in 0..head.dim() {
            let (a, b) = (head.alpha[d], head.beta[d]);
            let err = (beta_mass(&beta_log_pdf, a, b, 1e-10) - 1.0).abs();
            if err > worst {
                worst = err;
                worst_at = (a, b);
            }
        }
    }
    Outcome::new(
        worst <= 1e-6,
        format!(
            "{heads} heads x 4 dims, worst |mass - 1| = {worst:.2e} at (a, b) = ({:.3e}, {:.3e})",
            worst_at.0, worst_at.1
        ),
    )
}

pub fn samples_in_unit_interval(heads: usize, per_head: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..heads {
        let head = random_head(&mut rng, 4);
        for _ in 0..per_head {
            let (u, lp) = sample_action(&head, &mut rng);
            bad += u.iter().filter(|x| !(0.0..=1.0).contains(*x)).count();
            bad += usize::from(!lp.is_finite());
        }
    }
    Outcome::new(
        bad == 0,
        format!("{} samples, {bad} outside [0, 1] or non-finite", heads * per_head),
    )
}

pub fn rescale_log_correction(cases: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for _ in 0..cases {
        let n = rng.random_range(1..4);
        let bounds = ActionBounds {
            a_max_q: (0..n).map(|_| rng.random_range(1e-3..1.0)).collect(),
            a_max_v: (0..n).map(|_| rng.random_range(1e-3..1.0)).collect(),
        };
        let u: Vec<f64> = (0..2 * n).map(|_| rng.random::<f64>()).collect();
        let (_, correction) = rescale_action(&u, &bounds);
        let expected = -bounds.flat().iter().map(|a| (2.0 * a).ln()).sum::<f64>();
        mismatches += usize::from(correction != expected);
    }
    Outcome::new(mismatches == 0, format!("{cases} bound sets, {mismatches} inexact"))
}

pub fn mode_cases() -> Outcome {
    let cases = [
        (5.0, 5.0, 0.5),
        (2.0, 5.0, 0.2),
        (0.5, 3.0, 0.0),
        (3.0, 0.5, 1.0),
        (0.5, 0.5, 0.5),
        (1.0, 1.0, 0.5),
        (1.0, 4.0, 0.0),
        (4.0, 1.0, 1.0),
    ];
    let mut failures = vec![];
    for (a, b, want) in cases {
        let got = action_mode(&BetaHead {
            alpha: vec![a],
            beta: vec![b],
        })[0];
        if (got - want).abs() > 1e-15 {
            failures.push(format!("({a}, {b}) -> {got}, want {want}"));
        }
    }
    let bounds = ActionBounds {
        a_max_q: vec![0.0475],
        a_max_v: vec![0.095],
    };
    let (centre, _) = rescale_action(&[0.5, 0.5], &bounds);
    if centre.a_q[0] != 0.0 || centre.a_v[0] != 0.0 {
        failures.push("symmetric mode does not rescale to zero".into());
    }
    Outcome::new(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{} cases", cases.len())
        } else {
            failures.join("; ")
        },
    )
}

// Simulation fidelity.

pub fn rigid_pendulum() -> PlantParams {
    let (m, l) = (1.0, 0.5);
    PlantParams {
        link_masses: vec![m],
        link_lengths: vec![l],
        link_com_offsets: vec![l / 2.0],
        link_inertias: vec![m * l * l / 12.0],
        joint_stiffness: vec![300.0],
        joint_damping: vec![0.0],
        motor_inertias: vec![0.02],
        motor_damping: vec![0.0],
        gravity: 9.81,
        payload_mass: 0.0,
        position_noise_std: 0.0,
        velocity_noise_std: 0.0,
        latency_steps: 0,
        inner_dt: 0.002,
        rigid: true,
    }
}

/// Energy above the hanging rest position from the closed-form Hamiltonian
/// `½ (I + m c² + J_m) θ̇² + m g c (sin θ + 1)`, angles from the horizontal.
fn pendulum_energy(p: &PlantParams, theta: f64, omega: f64) -> f64 {
    let (m, c) = (p.link_masses[0], p.link_com_offsets[0]);
    let inertia = p.link_inertias[0] + m * c * c + p.motor_inertias[0];
    0.5 * inertia * omega * omega + m * p.gravity * c * (theta.sin() + 1.0)
}

pub fn pendulum_energy_drift() -> Outcome {
    let p = rigid_pendulum();
    let mut state = PlantState::at_rest(&[-std::f64::consts::FRAC_PI_2 + 1.2], &p);
    let e0 = pendulum_energy(&p, state.q_link[0], state.qd_link[0]);
    let steps = (10.0 / p.inner_dt).round() as usize;
    let mut drift: f64 = 0.0;
    for _ in 0..steps {
        state = plant_step(&state, &[0.0], &p).unwrap();
        let e = pendulum_energy(&p, state.q_link[0], state.qd_link[0]);
        drift = drift.max((e - e0).abs() / e0);
    }
    Outcome::new(
        drift < 1e-4,
        format!("10 s, {steps} steps, max relative drift {drift:.2e}"),
    )
}

pub fn filter_response() -> Outcome {
    let dt = 0.05;
    let alpha = filter_coefficient(4.0, dt);
    let mut f = FilterState::new(1, alpha).unwrap();
    let mut y = 0.0;
    for _ in 0..2000 {
        y = f.step(&[1.0])[0];
    }
    let dc_err = (y - 1.0).abs();
    let amplitude = |hz: f64| {
        let mut f = FilterState::new(1, alpha).unwrap();
        let mut peak: f64 = 0.0;
        for k in 0..800 {
            let out = f.step(&[(2.0 * std::f64::consts::PI * hz * k as f64 * dt).cos()])[0];
            if k >= 400 {
                peak = peak.max(out.abs());
            }
        }
        peak
    };
    let (a1, a10) = (amplitude(1.0), amplitude(10.0));
    Outcome::new(
        dc_err <= 1e-12 && a10 < a1,
        format!("DC error {dc_err:.1e}; amplitude 1 Hz {a1:.4}, 10 Hz {a10:.4}"),
    )
}

pub fn kinematics_poses() -> Outcome {
    let p = PlantParams::two_link();
    let h = std::f64::consts::FRAC_PI_2;
    let q4 = std::f64::consts::FRAC_PI_4;
    // Link lengths 0.5 and 0.4; 0.5 / √2 = 0.35355339059327373.
    let cases = [
        ([0.0, 0.0], [0.9, 0.0]),
        ([h, 0.0], [0.0, 0.9]),
        ([0.0, h], [0.5, 0.4]),
        ([q4, -q4], [0.753_553_390_593_273_7, 0.353_553_390_593_273_7]),
        ([std::f64::consts::PI, 0.0], [-0.9, 0.0]),
    ];
    let worst = cases
        .iter()
        .map(|(q, want)| {
            let got = forward_kinematics(q, &p);
            (got[0] - want[0]).abs().max((got[1] - want[1]).abs())
        })
        .fold(0.0, f64::max);
    Outcome::new(
        worst <= 1e-12,
        format!("{} poses, worst error {worst:.1e}", cases.len()),
    )
}

// SAC mechanics.

fn small_agent(config: SacConfig, seed: u64) -> SacAgent {
    SacAgent::new(config, 3, 1, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn random_transitions(n: usize, done: bool, rng: &mut ChaCha8Rng) -> Vec<Transition> {
    (0..n)
        .map(|_| Transition {
            s: uniform_vec(rng, 3, 1.0),
            u: vec![rng.random_range(0.01..0.99)],
            r: rng.random_range(0.0..10.0),
            s_next: uniform_vec(rng, 3, 1.0),
            done,
        })
        .collect()
}

pub fn hard_target_update() -> Outcome {
    let config = SacConfig {
        target_update_every: 5,
        minibatch: 16,
        hidden: vec![16, 16],
        ..SacConfig::default()
    };
    let mut agent = small_agent(config, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let data = random_transitions(16, false, &mut rng);
    let batch: Vec<&Transition> = data.iter().collect();
    let mut differed_before = true;
    for i in 0..5 {
        agent.sac_update(&batch, 1e-3, &mut rng).unwrap();
        if i < 4 {
            differed_before &= agent.target1 != agent.critic1 && agent.target2 != agent.critic2;
        }
    }
    let scheduled = agent.target1 == agent.critic1 && agent.target2 == agent.critic2;
    agent.sac_update(&batch, 1e-3, &mut rng).unwrap();
    agent.target_hard_update();
    let manual = agent.target1 == agent.critic1 && agent.target2 == agent.critic2;
    Outcome::new(
        differed_before && scheduled && manual,
        format!(
            "differ before: {differed_before}, equal at iteration 5: {scheduled}, equal after manual copy: {manual}"
        ),
    )
}

/// Scrambling the target critics must not change a critic update on
/// terminal transitions, and must change it on non-terminal ones.
pub fn done_flag_excludes_bootstrap() -> Outcome {
    let config = SacConfig {
        minibatch: 8,
        hidden: vec![16, 16],
        ..SacConfig::default()
    };
    let base = small_agent(config, 5);
    let mut scrambled = base.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    scrambled.target1 = randomized(&base.target1, &mut rng);
    scrambled.target2 = randomized(&base.target2, &mut rng);
    let updated = |agent: &SacAgent, data: &[Transition]| {
        let mut a = agent.clone();
        let batch: Vec<&Transition> = data.iter().collect();
        a.sac_update_masked(
            &batch,
            1e-3,
            &mut ChaCha8Rng::seed_from_u64(7),
            UpdateMask::CRITICS_ONLY,
        )
        .unwrap();
        a.critic1
    };
    let terminal = random_transitions(8, true, &mut rng);
    let ongoing: Vec<Transition> = terminal
        .iter()
        .cloned()
        .map(|t| Transition { done: false, ..t })
        .collect();
    let same_when_done = updated(&base, &terminal) == updated(&scrambled, &terminal);
    let differs_otherwise = updated(&base, &ongoing) != updated(&scrambled, &ongoing);
    Outcome::new(
        same_when_done && differs_otherwise,
        format!("terminal update independent of targets: {same_when_done}; non-terminal depends: {differs_otherwise}"),
    )
}

/// Differential entropy of Beta(a, b) by quadrature.
fn beta_entropy(a: f64, b: f64) -> f64 {
    let half = |p: f64, q: f64| {
        let f = move |u: f64| {
            let lp = beta_log_pdf(u, p, q);
            -lp * lp.exp()
        };
        adaptive_simpson(&f, 1e-12, 0.5, 1e-12)
    };
    half(a, b) + half(b, a)
}

/// Two states that swap every step, reward 1 in the first and 0 in the
/// second, one action dimension the reward ignores. With the actor frozen,
/// fitted critics must reach the soft fixed point
/// `V(s) = r(s) + γ (V(s') + α H(π(·|s')))`.
pub fn toy_mdp_fixed_point() -> Outcome {
    let gamma = 0.5;
    let config = SacConfig {
        gamma,
        minibatch: 64,
        target_update_every: 250,
        hidden: vec![32, 32],
        alpha_init: 0.2,
        actor_samples: 1,
        replay_capacity: 4096,
        ..SacConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut agent = SacAgent::new(config, 2, 1, &mut rng).unwrap();
    let states = [vec![1.0, 0.0], vec![0.0, 1.0]];
    let rewards = [1.0, 0.0];
    let heads: Vec<BetaHead> = states.iter().map(|s| agent.head(s).unwrap()).collect();

    let mut buffer = ReplayBuffer::new(4096);
    for i in 0..4096 {
        let s = i % 2;
        let (u, _) = sample_action(&heads[s], &mut rng);
        buffer
            .push(Transition {
                s: states[s].clone(),
                u,
                r: rewards[s],
                s_next: states[1 - s].clone(),
                done: false,
            })
            .unwrap();
    }
    for it in 0..12_000 {
        let lr = if it < 9_000 { 1e-3 } else { 1e-4 };
        let batch = buffer.sample(64, &mut rng).unwrap();
        agent
            .sac_update_masked(&batch, lr, &mut rng, UpdateMask::CRITICS_ONLY)
            .unwrap();
    }

    let alpha = agent.alpha();
    let entropy: Vec<f64> = heads.iter().map(|h| beta_entropy(h.alpha[0], h.beta[0])).collect();
    let oracle = bellman_fixed_point(2, &|v, s| rewards[s] + gamma * (v[1 - s] + alpha * entropy[1 - s]));
    let mut worst: f64 = 0.0;
    let mut fitted = [0.0; 2];
    for s in 0..2 {
        let draws = 2000;
        let mut total = 0.0;
        for _ in 0..draws {
            let (u, _) = sample_action(&heads[s], &mut rng);
            let mut x = states[s].clone();
            x.extend_from_slice(&u);
            let q1 = agent.critic1.predict_batch(&x, 1).unwrap()[0];
            let q2 = agent.critic2.predict_batch(&x, 1).unwrap()[0];
            total += q1.min(q2);
        }
        fitted[s] = total / draws as f64;
        worst = worst.max((fitted[s] - oracle[s]).abs());
    }
    Outcome::new(
        worst <= 1e-2,
        format!(
            "oracle V = [{:.4}, {:.4}], critics [{:.4}, {:.4}], worst |diff| {worst:.2e}",
            oracle[0], oracle[1], fitted[0], fitted[1]
        ),
    )
}
