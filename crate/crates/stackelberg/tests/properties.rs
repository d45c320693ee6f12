mod common;

use proptest::prelude::*;
use stackelberg::augment::listing_order;
use stackelberg::backward::{solve_riccati_follower, solve_riccati_r1};
use stackelberg::equilibrium::{solve_game, solve_game_with, value, DEFAULT_DELTA};
use stackelberg::montecarlo::{random_direction, simulate, SimConfig};
use stackelberg::{ConstantGame, Execution};

fn asymmetry(m: &stackelberg::Mat) -> f64 {
    (m - m.transpose()).amax()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn riccati_solutions_are_symmetric_and_terminal_exact(seed in 0u64..10_000, n in 1usize..3, noisy: bool) {
        let spec = common::random_spec(seed, n, noisy, 32);
        let p = solve_riccati_follower(&spec, DEFAULT_DELTA).unwrap().p;
        let p1 = solve_riccati_r1(&spec).unwrap().p;
        prop_assert_eq!(p.node(32), &spec.g);
        prop_assert_eq!(p1.node(32), &(-&spec.g));
        for k in 0..=32 {
            prop_assert!(asymmetry(p.node(k)) <= 1e-10);
            prop_assert!(asymmetry(p1.node(k)) <= 1e-10);
        }
    }

    #[test]
    fn homogeneous_games_propagate_zero(n in 1usize..4, m1 in 1usize..3, m2 in 1usize..3) {
        let spec = ConstantGame::homogeneous(n, m1, m2).into_spec(common::grid(1.0, 8)).unwrap();
        let sol = solve_game(&spec, DEFAULT_DELTA).unwrap();
        prop_assert_eq!(value(&sol), 0.0);
        prop_assert_eq!(sol.p.p.max_abs(), 0.0);
        prop_assert_eq!(sol.phat.p.max_abs(), 0.0);
        prop_assert_eq!(sol.strategies.u1_gain.max_abs(), 0.0);
        prop_assert_eq!(sol.strategies.u2_gain.max_abs(), 0.0);
        prop_assert_eq!(sol.closed_loop.b.max_abs(), 0.0);
    }

    #[test]
    fn schedules_are_interchangeable(seed in 0u64..10_000) {
        let spec = common::random_spec(seed, 1, true, 16);
        let a = solve_game_with(&spec, DEFAULT_DELTA, Execution::Sequential).unwrap();
        let b = solve_game_with(&spec, DEFAULT_DELTA, Execution::Parallel).unwrap();
        prop_assert_eq!(value(&a).to_bits(), value(&b).to_bits());
        let cfg = SimConfig::new(64, seed, 1).unwrap();
        let x = simulate(&a, &cfg).unwrap();
        let y = simulate(&b, &cfg.with_exec(Execution::Sequential)).unwrap();
        prop_assert_eq!(x.j, y.j);
    }

    #[test]
    fn directions_have_unit_norm(pieces in 1usize..12, dim in 1usize..4, seed: u64, id: u64) {
        let grid = common::grid(1.5, 48);
        let v = random_direction(grid, dim, pieces, seed, id);
        let norm2: f64 = (0..48).map(|k| v.node(k).norm_squared() * grid.dt()).sum();
        // node sampling is exact when every piece boundary falls on a node
        if 48 % pieces == 0 {
            prop_assert!((norm2 - 1.0).abs() < 1e-12);
        } else {
            prop_assert!(norm2 > 0.0);
        }
    }

    #[test]
    fn listing_order_keeps_the_forward_half(n in 1usize..6) {
        let idx = listing_order(n);
        let mut seen = vec![false; 10 * n];
        for &i in &idx {
            prop_assert!(!seen[i]);
            seen[i] = true;
        }
        prop_assert_eq!(&idx[..5 * n], &(0..5 * n).collect::<Vec<_>>()[..]);
    }
}
