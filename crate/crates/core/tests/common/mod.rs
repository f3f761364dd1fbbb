//! Independent reference computations shared by the integration tests and the
//! acceptance harness.

#![allow(dead_code)]

pub mod checks;

use rand::Rng;
use refcomp_core::nn::{Mlp, MlpGrads};

/// Adaptive Simpson quadrature on `[a, b]` with absolute tolerance `tol`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
            + recurse(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = simpson(fa, fm, fb, a, b);
    recurse(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// `∫₀¹ exp(log_pdf(u)) du` for a Beta(a, b) log-density.
///
/// Each half is integrated after substituting away the endpoint singularity:
/// `u = x^{1/a}` on `[0, 1/2]`, and the mirrored density Beta(b, a) on the
/// other half. The Jacobian `u^{1-a}/a` is folded in before exponentiating,
/// and `u` is floored at the smallest normal so the log terms cancel exactly
/// where `x^{1/a}` underflows.
pub fn beta_mass(log_pdf: &dyn Fn(f64, f64, f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let half = |p: f64, q: f64| {
        let upper = 0.5f64.powf(p);
        let f = move |x: f64| {
            if x <= 0.0 {
                return (-p.ln() + log_pdf(f64::MIN_POSITIVE, p, q) + (1.0 - p) * f64::MIN_POSITIVE.ln()).exp();
            }
            let u = x.powf(1.0 / p).max(f64::MIN_POSITIVE);
            (log_pdf(u, p, q) + (1.0 - p) * u.ln() - p.ln()).exp()
        };
        adaptive_simpson(&f, 0.0, upper, tol)
    };
    half(a, b) + half(b, a)
}

/// `2 / (e^{xl} + e^{-xl})` in 1e-18 fixed point for rational `xl = num/den`,
/// from the Taylor series of the exponential in integer arithmetic.
pub fn kernel_fixed_point(num: u128, den: u128) -> f64 {
    const SCALE: u128 = 1_000_000_000_000_000_000;
    let mut term = SCALE;
    let mut exp = SCALE;
    for n in 1..200u128 {
        term = term * num / (den * n);
        if term == 0 {
            break;
        }
        exp += term;
    }
    let inv = SCALE * SCALE / exp;
    let k = 2 * SCALE * SCALE / (exp + inv);
    k as f64 / SCALE as f64
}

/// Fixed point of a state-value backup on a finite MDP, by applying the
/// backup until it stops moving.
pub fn bellman_fixed_point(states: usize, backup: &dyn Fn(&[f64], usize) -> f64) -> Vec<f64> {
    let mut v = vec![0.0; states];
    for _ in 0..100_000 {
        let next: Vec<f64> = (0..states).map(|s| backup(&v, s)).collect();
        let moved = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if moved < 1e-14 {
            break;
        }
    }
    v
}

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖)` between analytic and numeric
/// gradient vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Flat index of every parameter, in `MlpGrads::iter` order.
pub fn flat_grads(g: &MlpGrads) -> Vec<f64> {
    g.iter().copied().collect()
}

/// Central differences of `loss` at `coords` of the flattened parameters.
pub fn numeric_grad(net: &Mlp, coords: &[usize], h: f64, loss: &dyn Fn(&Mlp) -> f64) -> Vec<f64> {
    coords
        .iter()
        .map(|&c| {
            let mut plus = net.clone();
            *plus.params_mut().nth(c).unwrap() += h;
            let mut minus = net.clone();
            *minus.params_mut().nth(c).unwrap() -= h;
            (loss(&plus) - loss(&minus)) / (2.0 * h)
        })
        .collect()
}

/// `count` distinct coordinates in `0..len`.
pub fn pick_coords<R: Rng>(rng: &mut R, len: usize, count: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, len, count.min(len)).into_vec()
}

/// Uniform values in `[-scale, scale]`.
pub fn uniform_vec<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..=scale)).collect()
}
