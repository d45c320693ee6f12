mod common;

use stackelberg::augment::{
    build_blackboard, build_check, build_hat, cascade, gain_node, listing_order, selectors,
    z_representation, BlackboardBlocks, CheckBlocks, FollowerFactors, HatBlocks, LeaderCostWeights,
};
use stackelberg::backward::solve_riccati_follower;
use stackelberg::equilibrium::solve_game;
use stackelberg::{ConstantGame, Error, GameSpec, Mat, Vector};

const DELTA: f64 = 1e-8;

fn block(m: &Mat, n: usize, i: usize, j: usize) -> Mat {
    m.view((i * n, j * n), (n, n)).into_owned()
}

fn spec_of(game: ConstantGame) -> GameSpec {
    game.into_spec(common::grid(1.0, 8)).unwrap()
}

fn unit_scalar() -> ConstantGame {
    ConstantGame::scalar(
        [
            1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, -1.0, 1.0, 1.0, 1.0,
        ],
        2.0,
        2.0,
        1.0,
    )
}

fn random_mat(seed: u64, rows: usize, cols: usize) -> Mat {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
    Mat::from_fn(rows, cols, |_, _| {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
    })
}

#[test]
fn hat_drift_blocks_of_unit_instance() {
    let spec = spec_of(unit_scalar());
    let s = spec.at(0.0);
    let p = Mat::identity(1, 1);
    let ff = FollowerFactors::new(&s, &p, spec.alpha, DELTA, 0).unwrap();
    let hat = HatBlocks::build(&s, &p, &ff, &spec.g, &spec.xi);
    assert_eq!(hat.a1, Mat::from_row_slice(2, 2, &[0.0, 0.0, -1.0, 1.0]));
    assert_eq!(hat.a2, Mat::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 1.0]));
}

#[test]
fn hat_drifts_differ_only_in_lower_left_sign() {
    for seed in 0..5 {
        let spec = common::random_spec(seed, 2, true, 8);
        let p = solve_riccati_follower(&spec, DELTA).unwrap().p;
        let hat = build_hat(&spec, &p, DELTA).unwrap();
        for node in &hat.nodes {
            for (i, j) in [(0, 0), (0, 1), (1, 1)] {
                assert_eq!(block(&node.a1, 2, i, j), block(&node.a2, 2, i, j));
            }
            assert_eq!(block(&node.a1, 2, 1, 0), -block(&node.a2, 2, 1, 0));
        }
    }
}

#[test]
fn check_stage_stacking_without_sources() {
    let mut game = common::random_game(3, 2, true);
    game.xi = Vector::from_element(2, 1.0);
    game.sigma = Vector::zeros(2);
    game.f1 = Vector::zeros(2);
    let spec = spec_of(game);
    let p = solve_riccati_follower(&spec, DELTA).unwrap().p;
    let check = build_check(&spec, &p, DELTA).unwrap();
    for node in &check.nodes {
        assert_eq!(
            node.xi,
            Vector::from_row_slice(&[1.0, 1.0, 1.0, 1.0, 0.0, 0.0])
        );
        assert_eq!(node.sigma, Vector::zeros(6));
        assert_eq!(node.f1, Vector::zeros(6));
    }
}

fn stages_at(spec: &GameSpec, p: &Mat) -> (CheckBlocks, HatBlocks, FollowerFactors) {
    let s = spec.at(0.0);
    let ff = FollowerFactors::new(&s, p, spec.alpha, DELTA, 0).unwrap();
    (
        CheckBlocks::build(&s, p, &ff, &spec.g, &spec.xi),
        HatBlocks::build(&s, p, &ff, &spec.g, &spec.xi),
        ff,
    )
}

#[test]
fn blackboard_disturbance_corner_is_identity() {
    let mut game = common::random_game(5, 2, true);
    game.gamma = 2.0;
    game.r0hat = Mat::identity(2, 2);
    let spec = spec_of(game);
    let (ck, ht, _) = stages_at(&spec, &Mat::identity(2, 2));
    let bb = BlackboardBlocks::build(&ck, &ht, spec.gamma, &spec.at(0.0).r0hat).unwrap();
    let corner = bb.b1.view((0, 0), (6, 6)).into_owned();
    let mut expected = Mat::zeros(6, 6);
    expected.view_mut((0, 0), (2, 2)).fill_with_identity();
    assert_eq!(corner, expected);
}

#[test]
fn blackboard_without_costs_or_noise_sources() {
    let mut game = common::random_game(6, 2, true);
    game.q = Mat::zeros(2, 2);
    game.g = Mat::zeros(2, 2);
    let spec = spec_of(game);
    let (ck, ht, _) = stages_at(&spec, &Mat::identity(2, 2));
    let bb = BlackboardBlocks::build(&ck, &ht, spec.gamma, &spec.at(0.0).r0hat).unwrap();
    assert_eq!(bb.q, Mat::zeros(10, 10));
    assert_eq!(bb.g, Mat::zeros(10, 10));
    let mut sigma = Vector::zeros(10);
    sigma.rows_mut(0, 6).copy_from(&ck.sigma);
    assert_eq!(bb.sigma, sigma);
}

#[test]
fn blackboard_rejects_mismatched_grids() {
    let spec = common::random_spec(1, 1, true, 8);
    let other = common::random_spec(1, 1, true, 16);
    let p = solve_riccati_follower(&spec, DELTA).unwrap().p;
    let q = solve_riccati_follower(&other, DELTA).unwrap().p;
    let check = build_check(&spec, &p, DELTA).unwrap();
    let hat = build_hat(&other, &q, DELTA).unwrap();
    assert!(matches!(
        build_blackboard(&check, &hat, spec.gamma, &spec.r0hat),
        Err(Error::Input(_))
    ));
}

fn weights(game: ConstantGame, p: f64) -> stackelberg::Result<LeaderCostWeights> {
    let spec = spec_of(game);
    let s = spec.at(0.0);
    let pm = Mat::from_element(1, 1, p);
    let ff = FollowerFactors::new(&s, &pm, spec.alpha, DELTA, 0)?;
    LeaderCostWeights::build(&s, &pm, &ff, &spec.g, spec.gamma, DELTA, 0)
}

#[test]
fn weights_without_control_noise() {
    let mut game = unit_scalar();
    game.r1 = Mat::from_element(1, 1, 2.5);
    game.r2 = Mat::from_element(1, 1, -3.0);
    let w = weights(game, 0.7).unwrap();
    assert!((w.r[(0, 0)] - 0.4).abs() < 1e-15);
    assert_eq!(w.rr[(0, 0)], -3.0);
}

#[test]
fn indefinite_follower_weight_example() {
    let mut game = unit_scalar();
    game.r1 = Mat::from_element(1, 1, -1.0);
    game.d1 = Mat::from_element(1, 1, 1.0);
    let spec = spec_of(game.clone());
    let s = spec.at(0.0);
    let p = Mat::from_element(1, 1, 2.0);
    let ff = FollowerFactors::new(&s, &p, spec.alpha, DELTA, 0).unwrap();
    assert_eq!(ff.rt[(0, 0)], 1.0);
    let w = weights(game, 2.0).unwrap();
    assert_eq!(w.r[(0, 0)], -1.0);
}

#[test]
fn positive_leader_weight_is_rejected() {
    let mut game = unit_scalar();
    game.r2 = Mat::from_element(1, 1, 1.0);
    match weights(game, 1.0) {
        Err(Error::Regularity { stage, .. }) => assert_eq!(stage, "(A8)(i)"),
        other => panic!("expected a regularity failure, got {other:?}"),
    }
}

#[test]
fn nonpositive_follower_weight_is_rejected() {
    let mut game = unit_scalar();
    game.r1 = Mat::from_element(1, 1, -3.0);
    game.d1 = Mat::from_element(1, 1, 1.0);
    let spec = spec_of(game);
    let s = spec.at(0.0);
    let err = FollowerFactors::new(&s, &Mat::from_element(1, 1, 2.0), 2.0, DELTA, 4).unwrap_err();
    assert!(matches!(err, Error::Regularity { ref stage, node: 4, .. } if stage == "(riccati)"));
}

#[test]
fn doublehat_dimensions() {
    for n in [1, 2] {
        let spec = common::random_spec(7, n, true, 8);
        let p = solve_riccati_follower(&spec, DELTA).unwrap().p;
        let dh = cascade(&spec, 0.5, &p.sample(0.5).unwrap(), DELTA, 0)
            .unwrap()
            .doublehat;
        let d = 10 * n;
        for m in [
            &dh.a1, &dh.a2, &dh.c1, &dh.c2, &dh.b1, &dh.b2, &dh.d1, &dh.d2, &dh.q, &dh.g,
        ] {
            assert_eq!(m.shape(), (d, d));
        }
        for v in [&dh.f, &dh.sigma, &dh.upsilon, &dh.xi] {
            assert_eq!(v.len(), d);
        }
        for m in [&dh.u2_x, &dh.u2_y, &dh.u2_z] {
            assert_eq!(m.shape(), (1, d));
        }
    }
}

#[test]
fn doublehat_initial_state_places_xi_in_first_two_blocks() {
    let spec = common::random_spec(8, 2, true, 8);
    let p = solve_riccati_follower(&spec, DELTA).unwrap().p;
    let dh = cascade(&spec, 0.0, p.node(0), DELTA, 0).unwrap().doublehat;
    let mut expected = Vector::zeros(20);
    expected.rows_mut(0, 2).copy_from(&spec.xi);
    expected.rows_mut(2, 2).copy_from(&spec.xi);
    assert_eq!(dh.xi, expected);
}

#[test]
fn listing_order_is_a_permutation() {
    for n in 1..4 {
        let mut idx = listing_order(n);
        assert_eq!(idx[5 * n], 8 * n);
        assert_eq!(idx[7 * n], 5 * n);
        idx.sort_unstable();
        assert_eq!(idx, (0..10 * n).collect::<Vec<_>>());
    }
}

#[test]
fn hamiltonian_drifts_pair_with_opposite_off_diagonal_signs() {
    let n = 2;
    let spec = common::random_spec(9, n, true, 8);
    let p = solve_riccati_follower(&spec, DELTA).unwrap().p;
    let dh = cascade(&spec, 0.25, &p.sample(0.25).unwrap(), DELTA, 0)
        .unwrap()
        .doublehat;
    let idx = listing_order(n);
    let mut pos = vec![0; idx.len()];
    for (i, &j) in idx.iter().enumerate() {
        pos[j] = i;
    }
    let natural = |m: &Mat| Mat::from_fn(10 * n, 10 * n, |i, j| m[(pos[i], pos[j])]);
    let (a1, a2) = (natural(&dh.a1), natural(&dh.a2));
    let (c1, c2) = (natural(&dh.c1), natural(&dh.c2));
    let h = 5 * n;
    let q = |m: &Mat, i: usize, j: usize| m.view((i * h, j * h), (h, h)).into_owned();
    assert_eq!(q(&a1, 0, 1), -q(&a2, 0, 1));
    assert_eq!(q(&a1, 1, 0), -q(&a2, 1, 0));
    assert_eq!(q(&a1, 0, 0), q(&a2, 0, 0));
    assert_eq!(q(&c1, 0, 1), -q(&c2, 0, 1));
    assert_eq!(q(&c1, 1, 1), q(&c2, 1, 1));
}

#[test]
fn selector_layout() {
    let s1 = selectors(1);
    let mut e1 = Mat::zeros(1, 10);
    e1[(0, 0)] = 1.0;
    assert_eq!(s1.get(1), &e1);
    let mut m3 = Mat::zeros(1, 10);
    m3[(0, 0)] = 1.0;
    m3[(0, 1)] = 1.0;
    assert_eq!(s1.get(3), &m3);

    let s2 = selectors(2);
    let m6 = s2.get(6);
    assert_eq!(m6.shape(), (2, 20));
    assert_eq!(m6.view((0, 14), (2, 2)).into_owned(), Mat::identity(2, 2));
    assert_eq!(m6.sum(), 2.0);
    for (i, block) in [(4, 5), (5, 6), (7, 8)] {
        assert_eq!(
            s2.get(i).view((0, 2 * block), (2, 2)).into_owned(),
            Mat::identity(2, 2)
        );
    }
}

#[test]
fn homogeneous_game_has_zero_gains() {
    let spec = ConstantGame::homogeneous(2, 1, 1)
        .into_spec(common::grid(1.0, 16))
        .unwrap();
    let sol = solve_game(&spec, DELTA).unwrap();
    for path in [&sol.pm1, &sol.pm2, &sol.phim1, &sol.phim2] {
        assert_eq!(path.max_abs(), 0.0);
    }
}

#[test]
fn leader_gain_without_noise_reduces_to_two_terms() {
    for (seed, n) in [(10, 1), (11, 2)] {
        let spec = common::random_game(seed, n, false)
            .into_spec(common::grid(1.0, 8))
            .unwrap();
        let p = solve_riccati_follower(&spec, DELTA).unwrap().p;
        let t = 0.375;
        let st = cascade(&spec, t, &p.sample(t).unwrap(), DELTA, 0).unwrap();
        let s = spec.at(t);
        let d = 10 * n;
        let phat = random_mat(seed, d, d);
        let phihat = random_mat(seed + 100, d, 1).column(0).into_owned();
        let sel = selectors(n);
        let g = gain_node(
            &s,
            &p.sample(t).unwrap(),
            &st.factors,
            &st.weights,
            &st.doublehat,
            &sel,
            &phat,
            &phihat,
            0,
        )
        .unwrap();
        let expected = s.b2.transpose() * sel.get(3) * &phat
            + s.b2.transpose() * p.sample(t).unwrap() * sel.get(4);
        assert!(common::mat_rel(&g.pm2, &expected) < 1e-13);
    }
}

#[test]
fn leader_gain_matches_hamiltonian_control() {
    for (seed, n) in [(20, 1), (21, 2), (22, 2)] {
        let spec = common::random_spec(seed, n, true, 8);
        let p = solve_riccati_follower(&spec, DELTA).unwrap().p;
        let sel = selectors(n);
        let d = 10 * n;
        for (k, t) in [0.0, 0.5, 1.0].into_iter().enumerate() {
            let pk = p.sample(t).unwrap();
            let st = cascade(&spec, t, &pk, DELTA, 0).unwrap();
            let dh = &st.doublehat;
            let phat = random_mat(seed * 10 + k as u64, d, d) * 0.3;
            let phihat = random_mat(seed * 10 + k as u64 + 5, d, 1)
                .column(0)
                .into_owned();
            let g = gain_node(
                &spec.at(t),
                &pk,
                &st.factors,
                &st.weights,
                dh,
                &sel,
                &phat,
                &phihat,
                0,
            )
            .unwrap();
            let (zx, z0) = z_representation(dh, &phat, &phihat).unwrap();
            let rri = &st.weights.rr_inv;
            for j in 0..3 {
                let x = random_mat(seed * 100 + j, d, 1).column(0).into_owned();
                let y = &phat * &x + &phihat;
                let z = &zx * &x + &z0;
                let from_gain = rri * (&g.pm2 * &x + &g.phim2);
                let from_hamiltonian =
                    rri * (&dh.u2_x * &x + &dh.u2_y * &y + &dh.u2_z * &z - &st.weights.cross);
                let err = (&from_gain - &from_hamiltonian).amax();
                assert!(err <= 1e-10 * (1.0 + from_gain.amax()), "error {err:.3e}");
            }
        }
    }
}

#[test]
fn stage_paths_follow_the_grid() {
    let spec = common::random_spec(12, 1, true, 8);
    let p = solve_riccati_follower(&spec, DELTA).unwrap().p;
    let hat = build_hat(&spec, &p, DELTA).unwrap();
    assert_eq!(hat.tag(), "hat");
    let a1 = hat.path("A1").unwrap();
    assert_eq!(a1.grid(), spec.grid);
    assert_eq!(a1.shape(), (2, 2));
    assert_eq!(a1.node(3), &hat.nodes[3].a1);
    assert!(hat.path("nope").is_none());
}
