//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refcomp_core::sac::{SacAgent, SacConfig, Transition};

pub const STATE_DIM: usize = 32;
pub const ACTION_DIM: usize = 4;

pub fn agent(seed: u64) -> SacAgent {
    SacAgent::new(
        SacConfig::default(),
        STATE_DIM,
        ACTION_DIM,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .unwrap()
}

pub fn transitions(n: usize, seed: u64) -> Vec<Transition> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vec = |len: usize| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    (0..n)
        .map(|i| Transition {
            s: vec(STATE_DIM),
            u: vec(ACTION_DIM).iter().map(|x| 0.5 + 0.4 * x).collect(),
            r: 5.0 + vec(1)[0],
            s_next: vec(STATE_DIM),
            done: i % 100 == 99,
        })
        .collect()
}
