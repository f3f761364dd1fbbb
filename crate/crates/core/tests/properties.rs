use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use refcomp_core::config::RunConfig;
use refcomp_core::env::check_action_safety;
use refcomp_core::mdp::{apply_action, CommandState, FilterState};
use refcomp_core::sac::rescale_action;
use refcomp_core::trajectory::{check_limits, generate_random_trajectory};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_trajectories_respect_limits_and_rest_at_ends(seed in any::<u64>()) {
        let cfg = RunConfig::default();
        let traj = generate_random_trajectory(
            &mut ChaCha8Rng::seed_from_u64(seed), "p", &cfg.limits, &cfg.trajectories,
        ).unwrap();
        prop_assert!(check_limits(&traj, &cfg.limits).is_ok());
        let (first, last) = (&traj.points[0], traj.points.last().unwrap());
        prop_assert!(first.qd.iter().chain(&last.qd).all(|v| v.abs() < 1e-12));
        let d = traj.duration();
        prop_assert!(d >= cfg.trajectories.duration_min - cfg.dt && d <= cfg.trajectories.duration_max + cfg.dt);
    }

    /// Whatever unit-interval actions the policy emits, every corrected point
    /// passes the safety contract and the command velocity stays in bounds.
    #[test]
    fn any_policy_output_is_safe(seed in any::<u64>(), actions in prop::collection::vec(prop::array::uniform4(0.0f64..=1.0), 200)) {
        let cfg = RunConfig::default();
        let bounds = cfg.action_bounds().unwrap();
        let traj = generate_random_trajectory(
            &mut ChaCha8Rng::seed_from_u64(seed), "p", &cfg.limits, &cfg.trajectories,
        ).unwrap();
        let mut filter = FilterState::new(4, cfg.filter_alpha()).unwrap();
        let mut command = CommandState::at_rest(&traj.points[0].q);
        for t in 0..traj.len() - 1 {
            let (action, _) = rescale_action(&actions[t % actions.len()], &bounds);
            let next = &traj.points[t + 1];
            let corrected = apply_action(&action, &mut filter, next, &mut command, &cfg.limits, cfg.dt);
            prop_assert!(check_action_safety(&corrected, next, &bounds, &cfg.limits).is_ok());
            for j in 0..2 {
                prop_assert!(command.implied_velocity[j].abs() <= cfg.limits.qd_max[j] + 1e-12);
                prop_assert!(corrected.qd[j].abs() <= cfg.limits.qd_max[j]);
            }
        }
    }
}
