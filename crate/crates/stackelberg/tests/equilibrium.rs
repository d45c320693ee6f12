mod common;

use stackelberg::backward::solve_riccati_follower;
use stackelberg::equilibrium::{
    clamp_nonnegative, feedback, production_spec, scalar_bode, solve_game, solve_game_with, value,
    StrategyOutput, DEFAULT_DELTA,
};
use stackelberg::{ConstantGame, Error, Execution, Mat, Vector};

#[test]
fn homogeneous_game_has_zero_value() {
    let spec = ConstantGame::homogeneous(2, 1, 2)
        .into_spec(common::grid(1.0, 20))
        .unwrap();
    let sol = solve_game(&spec, DEFAULT_DELTA).unwrap();
    assert_eq!(value(&sol), 0.0);
    assert_eq!(sol.phat.p.max_abs(), 0.0);
    assert_eq!(sol.phihat.max_abs(), 0.0);
    let out = feedback(&sol, &Vector::from_element(20, 1.0), 0.3).unwrap();
    assert_eq!(out.u1, Vector::zeros(1));
    assert_eq!(out.u2, Vector::zeros(2));
}

#[test]
fn sourceless_game_value_is_a_quadratic_form() {
    let mut game = common::random_game(2, 2, true);
    game.sigma = Vector::zeros(2);
    game.f1 = Vector::zeros(2);
    let spec = game.into_spec(common::grid(1.0, 40)).unwrap();
    let sol = solve_game(&spec, DEFAULT_DELTA).unwrap();
    assert_eq!(sol.psi.max_abs(), 0.0);
    let xi = sol.xi_hat();
    let quad = xi.dot(&(sol.lyapunov.node(0) * &xi));
    assert_eq!(value(&sol), quad);
    assert!(quad != 0.0);
}

#[test]
fn production_follower_matches_scalar_equation() {
    let spec = production_spec(0.5, -1.0, 1.0, 1.0, -0.5, 0.25, 2.0, 2000).unwrap();
    let p = solve_riccati_follower(&spec, DEFAULT_DELTA).unwrap().p;
    let bode = scalar_bode(0.5, -1.0, 1.0, 1.0, -0.5, 2.0, 2000).unwrap();
    for k in (0..=2000).step_by(100) {
        assert!(common::rel(p.node(k)[(0, 0)], bode.node(k)[(0, 0)]) < 1e-12);
    }
    let exact = 1.5 * 4f64.exp() - 0.5;
    assert!(common::rel(bode.node(0)[(0, 0)], exact) < 1e-8);
}

#[test]
fn production_example_solves() {
    let spec = production_spec(0.5, -1.0, 1.0, 1.0, -0.5, 0.25, 2.0, 400).unwrap();
    let sol = solve_game(&spec, DEFAULT_DELTA).unwrap();
    assert!(value(&sol).is_finite());
    assert!(sol.monitors().iter().all(|m| m.respected()));
    assert!(sol.leader_weight.min() > 0.25);
}

#[test]
fn follower_weight_failure_names_the_stage() {
    let mut game = common::scalar_game();
    game.r1 = Mat::from_element(1, 1, -1.0);
    game.d1 = Mat::zeros(1, 1);
    let spec = game.into_spec(common::grid(1.0, 10)).unwrap();
    match solve_game(&spec, DEFAULT_DELTA) {
        Err(Error::Regularity { stage, .. }) => assert_eq!(stage, "(riccati)"),
        other => panic!("expected a regularity failure, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn invalid_specs_are_rejected_before_solving() {
    let mut spec = common::scalar_spec(10);
    spec.alpha = -1.0;
    let err = solve_game(&spec, DEFAULT_DELTA).unwrap_err();
    assert!(matches!(err, Error::Validation(_)));
    assert!(!err.is_solver_failure());
}

#[test]
fn feedback_is_affine_in_the_state() {
    let sol = solve_game(&common::scalar_spec(20), DEFAULT_DELTA).unwrap();
    let x = Vector::from_fn(10, |i, _| (i as f64 * 0.37).sin());
    let y = Vector::from_fn(10, |i, _| (i as f64 * 0.11).cos());
    for t in [0.0, 0.41, 1.0] {
        let at = |v: &Vector| feedback(&sol, v, t).unwrap();
        let (fx, fy, fs, f0) = (at(&x), at(&y), at(&(&x + &y)), at(&Vector::zeros(10)));
        let gap = |pick: fn(&StrategyOutput) -> &Vector| {
            (pick(&fs) - pick(&fx) - pick(&fy) + pick(&f0)).amax()
        };
        assert!(gap(|s| &s.u1) < 1e-12);
        assert!(gap(|s| &s.u2) < 1e-12);
        assert!(gap(|s| &s.f) < 1e-12);
        assert!(gap(|s| &s.f2) < 1e-12);
    }
}

#[test]
fn feedback_rejects_bad_inputs() {
    let sol = solve_game(&common::scalar_spec(10), DEFAULT_DELTA).unwrap();
    assert!(matches!(
        feedback(&sol, &Vector::zeros(3), 0.0),
        Err(Error::Input(_))
    ));
    assert!(feedback(&sol, &Vector::zeros(10), 1.5).is_err());
}

#[test]
fn value_converges_at_second_order() {
    let v = |steps| value(&solve_game(&common::scalar_spec(steps), DEFAULT_DELTA).unwrap());
    let reference = v(2048);
    let e64 = (v(64) - reference).abs();
    let e128 = (v(128) - reference).abs();
    let ratio = e64 / e128;
    assert!((3.0..=5.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn schedules_agree_bitwise() {
    let spec = common::random_spec(9, 2, true, 32);
    let a = solve_game_with(&spec, DEFAULT_DELTA, Execution::Sequential).unwrap();
    let b = solve_game_with(&spec, DEFAULT_DELTA, Execution::Parallel).unwrap();
    let c = solve_game(&spec, DEFAULT_DELTA).unwrap();
    assert_eq!(value(&a).to_bits(), value(&b).to_bits());
    assert_eq!(value(&a).to_bits(), value(&c).to_bits());
    assert_eq!(a.phat.p, b.phat.p);
    assert_eq!(a.strategies.u2_gain, b.strategies.u2_gain);
}

#[test]
fn monitors_carry_stage_labels() {
    let sol = solve_game(&common::scalar_spec(16), DEFAULT_DELTA).unwrap();
    let names: Vec<&str> = sol.monitors().iter().map(|m| m.name.as_str()).collect();
    assert!(names.iter().any(|n| n.starts_with("(riccati)")));
    assert!(names.iter().any(|n| n.starts_with("(R-1)")));
    assert!(names.iter().any(|n| n.starts_with("(R-4)")));
    assert!(sol.monitors().iter().all(|m| m.respected()));
}

#[test]
fn clamp_acts_on_controls_only() {
    let s = StrategyOutput {
        u1: Vector::from_row_slice(&[-1.0, 2.0]),
        u2: Vector::from_row_slice(&[0.5, -0.0, -3.0]),
        f: Vector::from_row_slice(&[-4.0]),
        f2: Vector::from_row_slice(&[-5.0]),
    };
    let c = clamp_nonnegative(&s);
    assert_eq!(c.u1, Vector::from_row_slice(&[0.0, 2.0]));
    assert_eq!(c.u2, Vector::from_row_slice(&[0.5, 0.0, 0.0]));
    assert_eq!(c.f, s.f);
    assert_eq!(c.f2, s.f2);
}
