use proptest::prelude::*;

use scorefield::ballworld::{self, Action, BallState, WorldConfig};
use scorefield::eval;
use scorefield::planner::{self, HalfPlane};
use scorefield::rewards::RunningNormalizer;
use scorefield::rng;

fn world() -> WorldConfig {
    WorldConfig {
        n_per_color: 3,
        ..WorldConfig::default()
    }
}

fn legal_state(seed: u64) -> BallState {
    ballworld::sample_initial_state(&world(), &mut rng::stream(seed, 0)).unwrap()
}

fn velocity() -> impl Strategy<Value = [f64; 2]> {
    (-1.0..1.0f64, -1.0..1.0f64).prop_map(|(x, y)| [x, y])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn step_stays_in_bounds_and_keeps_colours(seed in any::<u64>(), vs in prop::collection::vec(velocity(), 9)) {
        let cfg = world();
        let s = legal_state(seed);
        let rec = ballworld::step(&s, &Action { velocities: vs }, &cfg);
        prop_assert!(rec.state_after.within_bounds(cfg.bound()));
        prop_assert_eq!(&rec.state_after.categories, &s.categories);
        prop_assert_eq!(rec.collision_count, rec.pair_collisions.len());
        for (a, b) in rec.state_before.positions.iter().zip(&s.positions) {
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_action_is_a_fixed_point(seed in any::<u64>()) {
        let s = legal_state(seed);
        let rec = ballworld::step(&s, &Action::zeros(s.len()), &world());
        prop_assert_eq!(rec.state_after, s);
        prop_assert_eq!(rec.collision_count, 0);
    }

    #[test]
    fn lp2_output_is_feasible_or_flagged(
        planes in prop::collection::vec((velocity(), 0.0..std::f64::consts::TAU), 0..6),
        pref in velocity(),
    ) {
        let v_max = 0.3;
        let planes: Vec<HalfPlane> = planes
            .into_iter()
            .map(|(p, a)| HalfPlane::new([p[0] * v_max, p[1] * v_max], [a.cos(), a.sin()]))
            .collect();
        let sol = planner::solve_lp2(&planes, pref, v_max);
        prop_assert!(sol.velocity[0].hypot(sol.velocity[1]) <= v_max + 1e-9);
        if sol.feasible {
            prop_assert!(planner::max_violation(&planes, sol.velocity) <= 1e-9);
        } else {
            let v = planner::solve_lp3(&planes, pref, v_max);
            prop_assert!(v[0].hypot(v[1]) <= v_max + 1e-9);
        }
    }

    #[test]
    fn gradient_action_respects_speed_limit(g in prop::collection::vec(velocity(), 1..12)) {
        let a = planner::gradient_action(&g, 0.3);
        let speed: f64 = a.velocities.iter().map(|v| v[0] * v[0] + v[1] * v[1]).sum::<f64>().sqrt();
        prop_assert!(speed <= 0.3 + 1e-12);
        let dot: f64 = a.velocities.iter().zip(&g).map(|(v, g)| v[0] * g[0] + v[1] * g[1]).sum();
        prop_assert!(dot >= 0.0);
    }

    #[test]
    fn chamfer_is_symmetric_and_zero_on_self(
        a in prop::collection::vec(velocity(), 1..8),
        b in prop::collection::vec(velocity(), 1..8),
    ) {
        prop_assert!((eval::chamfer(&a, &b) - eval::chamfer(&b, &a)).abs() <= 1e-12);
        prop_assert!(eval::chamfer(&a, &b) >= 0.0);
        prop_assert_eq!(eval::chamfer(&a, &a), 0.0);
    }

    #[test]
    fn constant_reward_stream_normalizes_to_zero(x in -100.0..100.0f64, n in 1usize..50) {
        let mut norm = RunningNormalizer::new();
        for _ in 0..n {
            prop_assert_eq!(norm.push(x), 0.0);
        }
    }
}
