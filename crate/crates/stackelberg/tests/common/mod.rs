//! Shared helpers for the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stackelberg::{ConstantGame, GameSpec, Mat, TimeGrid, Vector};

/// Matrix exponential by scaling and squaring of a Taylor series.
pub fn expm(m: &Mat) -> Mat {
    let norm = m.amax() * m.nrows() as f64;
    let s = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let a = m / 2f64.powi(s);
    let n = m.nrows();
    let mut term = Mat::identity(n, n);
    let mut sum = term.clone();
    for k in 1..30 {
        term = &term * &a / k as f64;
        sum += &term;
    }
    for _ in 0..s {
        sum = &sum * &sum;
    }
    sum
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

pub fn mat_rel(a: &Mat, b: &Mat) -> f64 {
    (a - b).amax() / (1.0 + b.amax())
}

pub fn grid(horizon: f64, steps: usize) -> TimeGrid {
    TimeGrid::new(horizon, steps).unwrap()
}

/// Unit-horizon scalar game with noise, drift sources and an indefinite
/// leader weight.
pub fn scalar_game() -> ConstantGame {
    ConstantGame::scalar(
        [
            0.3, 0.4, 1.0, 0.3, 0.7, 0.2, 0.3, 0.2, 1.0, 1.0, -2.0, 1.0, 1.0, 0.5,
        ],
        4.0,
        4.0,
        1.0,
    )
}

pub fn scalar_spec(steps: usize) -> GameSpec {
    scalar_game().into_spec(grid(1.0, steps)).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

fn psd(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Mat {
    let l = uniform(rng, n, n, 1.0);
    &l * l.transpose() * scale
}

/// Random constant game with `m1 = m2 = 1`; `noisy = false` zeroes `C`,
/// `D1` and `D2`.
pub fn random_game(seed: u64, n: usize, noisy: bool) -> ConstantGame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = if noisy { 0.3 } else { 0.0 };
    let mut g = ConstantGame::homogeneous(n, 1, 1);
    g.a = uniform(&mut rng, n, n, 0.5);
    g.b1 = uniform(&mut rng, n, 1, 1.0);
    g.b2 = uniform(&mut rng, n, 1, 1.0);
    g.sigma = Vector::from_fn(n, |_, _| rng.random_range(-0.3..0.3));
    g.f1 = Vector::from_fn(n, |_, _| rng.random_range(-0.3..0.3));
    g.q = psd(&mut rng, n, 0.5);
    g.g = psd(&mut rng, n, 0.5);
    g.r1 = Mat::from_element(1, 1, 1.0 + rng.random_range(0.0..1.0));
    g.r2 = Mat::from_element(1, 1, -2.0 - rng.random_range(0.0..1.0));
    g.alpha = 8.0 + rng.random_range(0.0..4.0);
    g.gamma = 8.0 + rng.random_range(0.0..4.0);
    g.xi = Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    if noisy {
        g.c = uniform(&mut rng, n, n, noise);
        g.d1 = uniform(&mut rng, n, 1, noise);
        g.d2 = uniform(&mut rng, n, 1, noise);
    }
    g
}

pub fn random_spec(seed: u64, n: usize, noisy: bool, steps: usize) -> GameSpec {
    random_game(seed, n, noisy)
        .into_spec(grid(1.0, steps))
        .unwrap()
}
