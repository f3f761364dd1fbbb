//! Random joint-space reference trajectories.
//!
//! A trajectory runs through a start, one to three intermediate waypoints and
//! a goal, joined by a clamped cubic spline (zero velocity at both ends) and
//! resampled at the outer-loop period.

use std::collections::HashSet;
use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arm::JointLimits;
use crate::error::{Error, Result};

/// One sample of a reference: joint positions and velocities.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryPoint {
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
}

impl TrajectoryPoint {
    pub fn at_rest(q: Vec<f64>) -> Self {
        let n = q.len();
        Self { q, qd: vec![0.0; n] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceTrajectory {
    pub id: String,
    pub dt: f64,
    pub points: Vec<TrajectoryPoint>,
}

impl ReferenceTrajectory {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn n_joints(&self) -> usize {
        self.points.first().map_or(0, |p| p.q.len())
    }

    pub fn duration(&self) -> f64 {
        (self.points.len().saturating_sub(1)) as f64 * self.dt
    }

    /// Point `i`, holding the final point past the end.
    pub fn point_clamped(&self, i: usize) -> &TrajectoryPoint {
        &self.points[i.min(self.points.len() - 1)]
    }
}

/// Generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectoryConfig {
    /// Outer-loop period in seconds.
    pub dt: f64,
    pub duration_min: f64,
    pub duration_max: f64,
    pub min_intermediate: usize,
    pub max_intermediate: usize,
    /// Fraction of each joint range kept free at both ends.
    pub margin: f64,
    pub max_attempts: usize,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            dt: 0.05,
            duration_min: 3.0,
            duration_max: 8.0,
            min_intermediate: 1,
            max_intermediate: 3,
            margin: 0.1,
            max_attempts: 1000,
        }
    }
}

impl TrajectoryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::InvalidParameter("trajectory dt must be > 0".into()));
        }
        if !(1.0 < self.duration_min && self.duration_min <= self.duration_max && self.duration_max < 20.0) {
            return Err(Error::InvalidParameter(
                "duration range must lie within (1 s, 20 s)".into(),
            ));
        }
        if self.min_intermediate > self.max_intermediate {
            return Err(Error::InvalidParameter("min_intermediate > max_intermediate".into()));
        }
        if !(0.0..0.5).contains(&self.margin) {
            return Err(Error::InvalidParameter("margin must be in [0, 0.5)".into()));
        }
        if self.max_attempts == 0 {
            return Err(Error::InvalidParameter("max_attempts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Clamped cubic spline for one joint: C² at interior knots, zero end slopes.
#[derive(Clone, Debug)]
pub struct CubicSpline {
    knots: Vec<f64>,
    values: Vec<f64>,
    slopes: Vec<f64>,
}

impl CubicSpline {
    pub fn clamped(knots: &[f64], values: &[f64]) -> Self {
        let k = knots.len();
        assert!(k >= 2 && values.len() == k);
        let mut slopes = vec![0.0; k];
        if k > 2 {
            // Tridiagonal system for interior slopes (Thomas algorithm).
            let m = k - 2;
            let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
            let mut lower = vec![0.0; m];
            let mut diag = vec![0.0; m];
            let mut upper = vec![0.0; m];
            let mut rhs = vec![0.0; m];
            for r in 0..m {
                let i = r + 1;
                let (h0, h1) = (h[i - 1], h[i]);
                lower[r] = 1.0 / h0;
                diag[r] = 2.0 / h0 + 2.0 / h1;
                upper[r] = 1.0 / h1;
                rhs[r] = 3.0 * (values[i] - values[i - 1]) / (h0 * h0) + 3.0 * (values[i + 1] - values[i]) / (h1 * h1);
            }
            for r in 1..m {
                let w = lower[r] / diag[r - 1];
                diag[r] -= w * upper[r - 1];
                rhs[r] -= w * rhs[r - 1];
            }
            let mut x = vec![0.0; m];
            x[m - 1] = rhs[m - 1] / diag[m - 1];
            for r in (0..m - 1).rev() {
                x[r] = (rhs[r] - upper[r] * x[r + 1]) / diag[r];
            }
            slopes[1..k - 1].copy_from_slice(&x);
        }
        Self {
            knots: knots.to_vec(),
            values: values.to_vec(),
            slopes,
        }
    }

    /// Position and first derivative at time `t`.
    pub fn eval(&self, t: f64) -> (f64, f64) {
        let last = self.knots.len() - 2;
        let seg = match self.knots.iter().skip(1).position(|&k| t <= k) {
            Some(s) => s.min(last),
            None => last,
        };
        let (t0, t1) = (self.knots[seg], self.knots[seg + 1]);
        let h = t1 - t0;
        let s = ((t - t0) / h).clamp(0.0, 1.0);
        let (p0, p1) = (self.values[seg], self.values[seg + 1]);
        let (m0, m1) = (self.slopes[seg] * h, self.slopes[seg + 1] * h);
        let s2 = s * s;
        let s3 = s2 * s;
        let pos =
            (2.0 * s3 - 3.0 * s2 + 1.0) * p0 + (s3 - 2.0 * s2 + s) * m0 + (-2.0 * s3 + 3.0 * s2) * p1 + (s3 - s2) * m1;
        let vel = ((6.0 * s2 - 6.0 * s) * p0
            + (3.0 * s2 - 4.0 * s + 1.0) * m0
            + (-6.0 * s2 + 6.0 * s) * p1
            + (3.0 * s2 - 2.0 * s) * m1)
            / h;
        (pos, vel)
    }
}

/// Knot times for a waypoint sequence: segment durations proportional to the
/// largest joint displacement, rescaled to `duration`.
pub fn knot_times(waypoints: &[Vec<f64>], duration: f64) -> Vec<f64> {
    let spans: Vec<f64> = waypoints
        .windows(2)
        .map(|w| {
            let d = w[0].iter().zip(&w[1]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            // Floor keeps near-duplicate waypoints from collapsing a segment.
            d.max(0.05)
        })
        .collect();
    let total: f64 = spans.iter().sum();
    let mut knots = Vec::with_capacity(waypoints.len());
    let mut t = 0.0;
    knots.push(0.0);
    for s in &spans {
        t += s / total * duration;
        knots.push(t);
    }
    *knots.last_mut().unwrap() = duration;
    knots
}

/// Builds a resampled trajectory through `waypoints` lasting about
/// `duration` seconds (rounded to a whole number of periods).
pub fn trajectory_from_waypoints(
    id: impl Into<String>,
    waypoints: &[Vec<f64>],
    duration: f64,
    dt: f64,
) -> ReferenceTrajectory {
    let n = waypoints[0].len();
    let steps = ((duration / dt).round() as usize).max(3);
    let total = steps as f64 * dt;
    let knots = knot_times(waypoints, total);
    let splines: Vec<CubicSpline> = (0..n)
        .map(|j| {
            let values: Vec<f64> = waypoints.iter().map(|w| w[j]).collect();
            CubicSpline::clamped(&knots, &values)
        })
        .collect();
    let points = (0..=steps)
        .map(|i| {
            let t = if i == steps { total } else { i as f64 * dt };
            let (q, qd) = splines.iter().map(|s| s.eval(t)).unzip();
            TrajectoryPoint { q, qd }
        })
        .collect::<Vec<_>>();
    let mut traj = ReferenceTrajectory {
        id: id.into(),
        dt,
        points,
    };
    // Pin the boundary exactly.
    let last = traj.points.len() - 1;
    traj.points[0] = TrajectoryPoint::at_rest(waypoints[0].clone());
    traj.points[last] = TrajectoryPoint::at_rest(waypoints[waypoints.len() - 1].clone());
    traj
}

/// Which quantity a trajectory violated first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LimitQuantity {
    Position,
    Velocity,
    Acceleration,
}

impl std::fmt::Display for LimitQuantity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LimitQuantity::Position => "position",
            LimitQuantity::Velocity => "velocity",
            LimitQuantity::Acceleration => "acceleration",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LimitViolation {
    pub index: usize,
    pub joint: usize,
    pub quantity: LimitQuantity,
    pub value: f64,
}

impl std::fmt::Display for LimitViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} of joint {} at index {} ({:.4})",
            self.quantity, self.joint, self.index, self.value
        )
    }
}

/// Checks positions, finite-difference velocities and finite-difference
/// accelerations, reporting the earliest violation by point index.
pub fn check_limits(traj: &ReferenceTrajectory, limits: &JointLimits) -> std::result::Result<(), LimitViolation> {
    let dt = traj.dt;
    let n = limits.n_joints();
    for (i, p) in traj.points.iter().enumerate() {
        for j in 0..n {
            let q = p.q[j];
            if q < limits.q_min[j] || q > limits.q_max[j] || !q.is_finite() {
                return Err(LimitViolation {
                    index: i,
                    joint: j,
                    quantity: LimitQuantity::Position,
                    value: q,
                });
            }
            if i >= 1 {
                let v = (q - traj.points[i - 1].q[j]) / dt;
                if v.abs() > limits.qd_max[j] {
                    return Err(LimitViolation {
                        index: i,
                        joint: j,
                        quantity: LimitQuantity::Velocity,
                        value: v,
                    });
                }
            }
            if i >= 2 {
                let a = (q - 2.0 * traj.points[i - 1].q[j] + traj.points[i - 2].q[j]) / (dt * dt);
                if a.abs() > limits.qdd_max[j] {
                    return Err(LimitViolation {
                        index: i,
                        joint: j,
                        quantity: LimitQuantity::Acceleration,
                        value: a,
                    });
                }
            }
        }
    }
    Ok(())
}

fn sample_waypoint<R: Rng + ?Sized>(rng: &mut R, limits: &JointLimits, margin: f64) -> Vec<f64> {
    (0..limits.n_joints())
        .map(|j| {
            let span = limits.q_max[j] - limits.q_min[j];
            let lo = limits.q_min[j] + margin * span;
            let hi = limits.q_max[j] - margin * span;
            rng.random_range(lo..=hi)
        })
        .collect()
}

/// Samples waypoints inside the margin-shrunk joint box and retries until the
/// resampled trajectory satisfies every limit.
pub fn generate_random_trajectory<R: Rng + ?Sized>(
    rng: &mut R,
    id: impl Into<String>,
    limits: &JointLimits,
    config: &TrajectoryConfig,
) -> Result<ReferenceTrajectory> {
    let id = id.into();
    let mut last = String::from("none");
    for _ in 0..config.max_attempts {
        let intermediates = rng.random_range(config.min_intermediate..=config.max_intermediate);
        let waypoints: Vec<Vec<f64>> = (0..intermediates + 2)
            .map(|_| sample_waypoint(rng, limits, config.margin))
            .collect();
        let duration = rng.random_range(config.duration_min..=config.duration_max);
        let traj = trajectory_from_waypoints(id.clone(), &waypoints, duration, config.dt);
        match check_limits(&traj, limits) {
            Ok(()) => return Ok(traj),
            Err(v) => last = v.to_string(),
        }
    }
    Err(Error::GenerationExhausted {
        attempts: config.max_attempts,
        last,
    })
}

/// `n` limit-respecting trajectories with ids `{prefix}-{index:05}`.
pub fn build_corpus<R: Rng + ?Sized>(
    rng: &mut R,
    prefix: &str,
    n: usize,
    limits: &JointLimits,
    config: &TrajectoryConfig,
) -> Result<Vec<ReferenceTrajectory>> {
    if n == 0 {
        return Err(Error::InvalidParameter("corpus size must be >= 1".into()));
    }
    (0..n)
        .map(|i| generate_random_trajectory(rng, format!("{prefix}-{i:05}"), limits, config))
        .collect()
}

/// Fails if any trajectory id occurs in both corpora.
pub fn ensure_disjoint(a: &[ReferenceTrajectory], b: &[ReferenceTrajectory]) -> Result<()> {
    let ids: HashSet<&str> = a.iter().map(|t| t.id.as_str()).collect();
    match b.iter().find(|t| ids.contains(t.id.as_str())) {
        Some(t) => Err(Error::InvalidParameter(format!(
            "trajectory id {} appears in both corpora",
            t.id
        ))),
        None => Ok(()),
    }
}

pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes a corpus as CSV: `trajectory_id,index,q_0..,qd_0..`.
pub fn write_corpus_csv<W: Write>(writer: W, corpus: &[ReferenceTrajectory]) -> Result<()> {
    let n = corpus.first().map_or(0, |t| t.n_joints());
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["trajectory_id".to_string(), "index".to_string()];
    header.extend((0..n).map(|j| format!("q_{j}")));
    header.extend((0..n).map(|j| format!("qd_{j}")));
    w.write_record(&header)?;
    for traj in corpus {
        for (i, p) in traj.points.iter().enumerate() {
            let mut row = vec![traj.id.clone(), i.to_string()];
            row.extend(p.q.iter().chain(&p.qd).map(|&x| fmt_f64(x)));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a corpus written by [`write_corpus_csv`]; `dt` is not stored.
pub fn read_corpus_csv<R: Read>(reader: R, dt: f64) -> Result<Vec<ReferenceTrajectory>> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers()?.clone();
    if headers.len() < 4 || (headers.len() - 2) % 2 != 0 {
        return Err(Error::Format("corpus header must have 2 + 2N columns".into()));
    }
    let n = (headers.len() - 2) / 2;
    let mut corpus: Vec<ReferenceTrajectory> = Vec::new();
    for record in r.records() {
        let record = record?;
        let id = &record[0];
        let index: usize = record[1]
            .parse()
            .map_err(|_| Error::Format(format!("bad index {:?}", &record[1])))?;
        let values = record
            .iter()
            .skip(2)
            .map(|s| s.parse::<f64>().map_err(|_| Error::Format(format!("bad number {s:?}"))))
            .collect::<Result<Vec<f64>>>()?;
        let point = TrajectoryPoint {
            q: values[..n].to_vec(),
            qd: values[n..].to_vec(),
        };
        match corpus.last_mut() {
            Some(t) if t.id == id => {
                if index != t.points.len() {
                    return Err(Error::Format(format!("non-contiguous index in {id}")));
                }
                t.points.push(point);
            }
            _ => {
                if index != 0 {
                    return Err(Error::Format(format!("trajectory {id} does not start at 0")));
                }
                corpus.push(ReferenceTrajectory {
                    id: id.to_string(),
                    dt,
                    points: vec![point],
                });
            }
        }
    }
    Ok(corpus)
}
