//! Closed-loop simulation, best-response perturbation tests, sampled
//! convexity functionals and a direct boundary-value oracle.
//!
//! Paths draw their Brownian increments from per-path ChaCha substreams of
//! one master seed and are reduced in index order, so results do not depend
//! on the schedule. Perturbation arms are linear responses driven by the
//! same increments as the base path; the cost change along a path is then
//! exactly `ε·a + ε²·b`.

use nalgebra::LU;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::augment::cascade;
use crate::backward::{
    march_forward, riccati_problem_r1, riccati_problem_r3, solve_offset, solve_riccati_follower,
    solve_riccati_generalized, OffsetSources, RiccatiProblem,
};
use crate::equilibrium::{solve_game, EquilibriumSolution};
use crate::error::{Error, Result};
use crate::linalg::{as_vector, block_selector, col, inverse};
use crate::model::{GameSpec, Mat, MatrixPath, TimeGrid, Vector};
use crate::par::{self, Execution};

/// Share of diverging paths above which a run is rejected.
pub const BLOW_UP_BUDGET: f64 = 1e-3;

/// Monte Carlo settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SimConfig {
    pub paths: usize,
    pub seed: u64,
    /// Euler sub-steps per grid interval.
    pub substeps: usize,
    pub exec: Execution,
}

impl SimConfig {
    pub fn new(paths: usize, seed: u64, substeps: usize) -> Result<Self> {
        if paths == 0 || substeps == 0 {
            return Err(Error::Input("paths and substeps must be positive".into()));
        }
        Ok(SimConfig {
            paths,
            seed,
            substeps,
            exec: Execution::default(),
        })
    }

    pub fn with_exec(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }
}

/// Sample mean and standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Estimate {
            mean,
            stderr: (var / n).sqrt(),
        }
    }
}

/// Per-path results of [`simulate`].
#[derive(Clone, Debug)]
pub struct SimOutput {
    pub terminal: Vec<Vector>,
    /// Realized cost of the game on the actual state.
    pub j: Vec<f64>,
    /// Follower's robust cost on its model state.
    pub j_follower: Vec<f64>,
    /// Leader's robust cost on the actual state.
    pub j_leader: Vec<f64>,
    /// Paths dropped after producing non-finite values.
    pub diverged: usize,
}

impl SimOutput {
    pub fn j_estimate(&self) -> Estimate {
        Estimate::of(&self.j)
    }

    pub fn j_follower_estimate(&self) -> Estimate {
        Estimate::of(&self.j_follower)
    }

    pub fn j_leader_estimate(&self) -> Estimate {
        Estimate::of(&self.j_leader)
    }
}

// ---------------------------------------------------------------------------
// flat small-matrix kernels

fn flat(m: &Mat) -> Vec<f64> {
    m.as_slice().to_vec()
}

/// Row-major layout for the operands of [`matvec`].
fn flat_rows(m: &Mat) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// `out = M x` for row-major `M`.
#[inline]
fn matvec(m: &[f64], x: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(m.chunks_exact(x.len())) {
        *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

/// `xᵀ W y` for square column-major `W`.
#[inline]
fn bilinear(w: &[f64], x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let mut s = 0.0;
    for (j, yj) in y.iter().enumerate() {
        let colw = &w[j * n..(j + 1) * n];
        let mut c = 0.0;
        for (xi, wij) in x.iter().zip(colw) {
            c += xi * wij;
        }
        s += c * yj;
    }
    s
}

// ---------------------------------------------------------------------------
// base closed-loop plan

/// Quantities read off the base path at every step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Quantity {
    X,
    XBar,
    U1,
    U2,
    F,
    F2,
}

struct BaseStep {
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
    maps: [(Vec<f64>, Vec<f64>); 4],
    q: Vec<f64>,
    r1: Vec<f64>,
    r2: Vec<f64>,
    r0: Vec<f64>,
    r0hat: Vec<f64>,
}

struct Plan {
    n: usize,
    m1: usize,
    m2: usize,
    dim: usize,
    dt: f64,
    alpha: f64,
    gamma: f64,
    xi: Vec<f64>,
    g: Vec<f64>,
    steps: Vec<BaseStep>,
}

impl Plan {
    fn new(sol: &EquilibriumSolution, substeps: usize) -> Plan {
        let spec = &sol.spec;
        let sub = spec.grid.refine(substeps);
        let cl = &sol.closed_loop;
        let st = &sol.strategies;
        let steps = (0..sub.steps())
            .map(|k| {
                let t = sub.time(k);
                let s = spec.at(t);
                let pair =
                    |g: &MatrixPath, o: &MatrixPath| (flat_rows(&g.eval(t)), flat(&o.eval(t)));
                BaseStep {
                    a: flat_rows(&cl.a.eval(t)),
                    b: flat(&cl.b.eval(t)),
                    c: flat_rows(&cl.c.eval(t)),
                    d: flat(&cl.d.eval(t)),
                    maps: [
                        pair(&st.u1_gain, &st.u1_offset),
                        pair(&st.u2_gain, &st.u2_offset),
                        pair(&st.f_gain, &st.f_offset),
                        pair(&st.f2_gain, &st.f2_offset),
                    ],
                    q: flat(&s.q),
                    r1: flat(&s.r1),
                    r2: flat(&s.r2),
                    r0: flat(&s.r0),
                    r0hat: flat(&s.r0hat),
                }
            })
            .collect();
        Plan {
            n: spec.n,
            m1: spec.m1,
            m2: spec.m2,
            dim: 10 * spec.n,
            dt: sub.dt(),
            alpha: spec.alpha,
            gamma: spec.gamma,
            xi: sol.xi_hat().as_slice().to_vec(),
            g: flat(&spec.g),
            steps,
        }
    }
}

/// Base quantities at one step.
struct Values {
    u1: Vec<f64>,
    u2: Vec<f64>,
    f: Vec<f64>,
    f2: Vec<f64>,
}

impl Values {
    fn new(p: &Plan) -> Self {
        Values {
            u1: vec![0.0; p.m1],
            u2: vec![0.0; p.m2],
            f: vec![0.0; p.n],
            f2: vec![0.0; p.n],
        }
    }

    fn fill(&mut self, step: &BaseStep, x: &[f64]) {
        for (out, (g, o)) in [&mut self.u1, &mut self.u2, &mut self.f, &mut self.f2]
            .into_iter()
            .zip(step.maps.iter())
        {
            matvec(g, x, out);
            out.iter_mut().zip(o).for_each(|(a, b)| *a += b);
        }
    }

    fn get<'a>(&'a self, q: Quantity, x: &'a [f64], n: usize) -> &'a [f64] {
        match q {
            Quantity::X => &x[..n],
            Quantity::XBar => &x[n..2 * n],
            Quantity::U1 => &self.u1,
            Quantity::U2 => &self.u2,
            Quantity::F => &self.f,
            Quantity::F2 => &self.f2,
        }
    }
}

// ---------------------------------------------------------------------------
// perturbation arms

/// A weighted quadratic term `(base + ε·pert)ᵀ W (base + ε·pert)` with
/// `pert = lin·δ + off`.
#[derive(Clone, Debug)]
struct Channel {
    q: Quantity,
    w: Mat,
    lin: Mat,
    off: Vector,
}

/// Linear response `dδ = (Aδ + b)dt + (Cδ + d)dW` and its cost channels at
/// one time.
#[derive(Clone, Debug)]
struct ArmPoint {
    a: Mat,
    b: Vector,
    c: Mat,
    d: Vector,
    channels: Vec<Channel>,
}

struct FlatChannel {
    q: Quantity,
    w: Vec<f64>,
    lin: Vec<f64>,
    off: Vec<f64>,
}

impl FlatChannel {
    fn new(c: &Channel, scale: f64) -> Self {
        FlatChannel {
            q: c.q,
            w: flat(&(&c.w * scale)),
            lin: flat_rows(&c.lin),
            off: c.off.as_slice().to_vec(),
        }
    }
}

struct FlatArmStep {
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
    channels: Vec<FlatChannel>,
}

/// One perturbation arm prepared on the simulation grid.
struct FlatArm {
    dim: usize,
    steps: Vec<FlatArmStep>,
    terminal: Vec<FlatChannel>,
}

/// The four best-response tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Test {
    /// Follower deviates; its worst-case disturbance re-optimizes.
    #[serde(rename = "follower")]
    Follower,
    /// Leader deviates; follower and leader-side disturbance respond.
    #[serde(rename = "leader")]
    Leader,
    /// Follower-side disturbance deviates with the controls held.
    #[serde(rename = "follower_disturbance")]
    FollowerDisturbance,
    /// Leader-side disturbance deviates with the controls held.
    #[serde(rename = "leader_disturbance")]
    LeaderDisturbance,
}

impl Test {
    pub const ALL: [Test; 4] = [
        Test::Follower,
        Test::Leader,
        Test::FollowerDisturbance,
        Test::LeaderDisturbance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Test::Follower => "follower",
            Test::Leader => "leader",
            Test::FollowerDisturbance => "follower_disturbance",
            Test::LeaderDisturbance => "leader_disturbance",
        }
    }

    /// True when the perturbed player minimizes the functional.
    fn minimizes(self) -> bool {
        matches!(self, Test::Follower | Test::LeaderDisturbance)
    }

    /// True when the functional is the follower's robust cost.
    fn follower_cost(self) -> bool {
        matches!(self, Test::Follower | Test::FollowerDisturbance)
    }
}

/// Evaluable description of one arm.
struct ArmModel {
    dim: usize,
    point: Box<dyn Fn(f64) -> ArmPoint + Sync + Send>,
    terminal: Vec<Channel>,
}

impl ArmModel {
    fn flatten(&self, sub: TimeGrid) -> FlatArm {
        let dt = sub.dt();
        let steps = (0..sub.steps())
            .map(|k| {
                let p = (self.point)(sub.time(k));
                FlatArmStep {
                    a: flat_rows(&p.a),
                    b: p.b.as_slice().to_vec(),
                    c: flat_rows(&p.c),
                    d: p.d.as_slice().to_vec(),
                    channels: p.channels.iter().map(|c| FlatChannel::new(c, dt)).collect(),
                }
            })
            .collect();
        FlatArm {
            dim: self.dim,
            steps,
            terminal: self
                .terminal
                .iter()
                .map(|c| FlatChannel::new(c, 1.0))
                .collect(),
        }
    }
}

/// Shared ingredients of the arm models.
struct ArmContext {
    spec: GameSpec,
    p: MatrixPath,
    p1: MatrixPath,
    r1_problem: RiccatiProblem,
    p3: Option<(RiccatiProblem, MatrixPath, MatrixPath)>,
    delta: f64,
}

impl ArmContext {
    fn new(
        spec: &GameSpec,
        p: &MatrixPath,
        p1: &MatrixPath,
        delta: f64,
        leader: bool,
    ) -> Result<Self> {
        let r1_problem = riccati_problem_r1(spec)?;
        let p3 = if leader {
            let zero = MatrixPath::zeros(spec.grid, spec.m2, 1);
            let (prob, _) = riccati_problem_r3(spec, p, &zero, delta)?;
            let sol = solve_riccati_generalized(&prob, delta)?;
            Some((prob, sol.p, zero))
        } else {
            None
        };
        Ok(ArmContext {
            spec: spec.clone(),
            p: p.clone(),
            p1: p1.clone(),
            r1_problem,
            p3,
            delta,
        })
    }

    fn n(&self) -> usize {
        self.spec.n
    }

    /// Follower deviation `u1 + εv` with the disturbance re-optimized.
    fn follower(&self, v: &MatrixPath) -> Result<ArmModel> {
        let spec = self.spec.clone();
        let n = spec.n;
        let grid = spec.grid;
        let src = OffsetSources {
            f: MatrixPath::from_fn(grid, |k, t| spec.b1.eval(t) * v.node(k))?,
            sigma: MatrixPath::from_fn(grid, |k, t| spec.d1.eval(t) * v.node(k))?,
            upsilon: MatrixPath::zeros(grid, n, 1),
        };
        let dphi = solve_offset(&self.r1_problem, &self.p1, &src)?.phi;
        let p1 = self.p1.clone();
        let v = v.clone();
        let alpha = spec.alpha;
        Ok(ArmModel {
            dim: n,
            terminal: vec![Channel {
                q: Quantity::XBar,
                w: spec.g.clone(),
                lin: Mat::identity(n, n),
                off: Vector::zeros(n),
            }],
            point: Box::new(move |t| {
                let s = spec.at(t);
                let kappa = inverse(&s.r0).expect("validated R0") * (2.0 / alpha);
                let p1t = p1.eval(t);
                let vt = as_vector(&v.eval(t));
                let ph = as_vector(&dphi.eval(t));
                ArmPoint {
                    a: &s.a - &kappa * &p1t,
                    b: &s.b1 * &vt - &kappa * &ph,
                    c: s.c.clone(),
                    d: &s.d1 * &vt,
                    channels: vec![
                        Channel {
                            q: Quantity::XBar,
                            w: s.q.clone(),
                            lin: Mat::identity(n, n),
                            off: Vector::zeros(n),
                        },
                        Channel {
                            q: Quantity::U1,
                            w: s.r1.clone(),
                            lin: Mat::zeros(spec.m1, n),
                            off: vt,
                        },
                        Channel {
                            q: Quantity::F,
                            w: &s.r0 * (-alpha / 2.0),
                            lin: -(&kappa * &p1t),
                            off: -(&kappa * ph),
                        },
                    ],
                }
            }),
        })
    }

    /// Leader deviation `u2 + εv` with the follower and the leader-side
    /// disturbance responding.
    fn leader(&self, v: &MatrixPath) -> Result<ArmModel> {
        let (prob, p3, zero) = self.p3.as_ref().expect("leader context");
        let spec = self.spec.clone();
        let n = spec.n;
        let d5 = 5 * n;
        let (_, src_v) = riccati_problem_r3(&spec, &self.p, v, self.delta)?;
        let (_, src_0) = riccati_problem_r3(&spec, &self.p, zero, self.delta)?;
        let diff = |a: &MatrixPath, b: &MatrixPath| {
            MatrixPath::from_fn(a.grid(), |k, _| a.node(k) - b.node(k))
        };
        let src = OffsetSources {
            f: diff(&src_v.f, &src_0.f)?,
            sigma: diff(&src_v.sigma, &src_0.sigma)?,
            upsilon: diff(&src_v.upsilon, &src_0.upsilon)?,
        };
        let dphi = solve_offset(prob, p3, &src)?.phi;
        let p3 = p3.clone();
        let p = self.p.clone();
        let v = v.clone();
        let delta = self.delta;
        let e = |j: usize| block_selector(n, 5, j);
        let (e0, e1, e3) = (e(0), e(1), e(3));
        let gamma = spec.gamma;
        Ok(ArmModel {
            dim: d5,
            terminal: vec![Channel {
                q: Quantity::X,
                w: spec.g.clone(),
                lin: e0.clone(),
                off: Vector::zeros(n),
            }],
            point: Box::new(move |t| {
                let s = spec.at(t);
                let pt = p.eval(t);
                let st =
                    cascade(&spec, t, &pt, delta, 0).expect("stages regular along the solved path");
                let bb = &st.blackboard;
                let p3t = p3.eval(t);
                let ph = as_vector(&dphi.eval(t));
                let vt = as_vector(&v.eval(t));
                let k3 =
                    inverse(&(Mat::identity(d5, d5) - &p3t * &bb.d3)).expect("regular decoupling");
                let zx = &k3 * (&p3t * &bb.c + &p3t * &bb.d1 * &p3t);
                let z0 = &k3 * (&p3t * &bb.d1 * &ph + &p3t * &bb.d2 * &vt);
                let ri = &st.factors.ri;
                let k1 = &st.factors.k1;
                let g2 = inverse(&s.r0hat).expect("validated R0hat") * (2.0 / gamma);
                let u1_lin =
                    ri * (s.b1.transpose() * &e3 * &p3t + s.d1.transpose() * &e3 * &zx - k1 * &e1);
                let u1_off = ri
                    * (s.b1.transpose() * &e3 * &ph + s.d1.transpose() * &e3 * &z0
                        - s.d1.transpose() * &pt * &s.d2 * &vt);
                ArmPoint {
                    a: &bb.a + &bb.b1 * &p3t + &bb.b3 * &zx,
                    b: &bb.b1 * &ph + &bb.b3 * &z0 + &bb.b2 * &vt,
                    c: &bb.c + &bb.d1 * &p3t + &bb.d3 * &zx,
                    d: &bb.d1 * &ph + &bb.d3 * &z0 + &bb.d2 * &vt,
                    channels: vec![
                        Channel {
                            q: Quantity::X,
                            w: s.q.clone(),
                            lin: e0.clone(),
                            off: Vector::zeros(n),
                        },
                        Channel {
                            q: Quantity::U1,
                            w: s.r1.clone(),
                            lin: u1_lin,
                            off: u1_off,
                        },
                        Channel {
                            q: Quantity::U2,
                            w: s.r2.clone(),
                            lin: Mat::zeros(spec.m2, d5),
                            off: vt,
                        },
                        Channel {
                            q: Quantity::F2,
                            w: &s.r0hat * (gamma / 2.0),
                            lin: &g2 * &e0 * &p3t,
                            off: &g2 * &e0 * ph,
                        },
                    ],
                }
            }),
        })
    }

    /// Disturbance deviation `+εh` with both controls held at their realized
    /// values; only the affected state moves.
    fn disturbance(&self, h: &MatrixPath, test: Test) -> ArmModel {
        let spec = self.spec.clone();
        let n = self.n();
        let h = h.clone();
        let (state, dist, scale) = match test {
            Test::FollowerDisturbance => (Quantity::XBar, Quantity::F, -spec.alpha / 2.0),
            _ => (Quantity::X, Quantity::F2, spec.gamma / 2.0),
        };
        let follower = test == Test::FollowerDisturbance;
        ArmModel {
            dim: n,
            terminal: vec![Channel {
                q: state,
                w: spec.g.clone(),
                lin: Mat::identity(n, n),
                off: Vector::zeros(n),
            }],
            point: Box::new(move |t| {
                let s = spec.at(t);
                let ht = as_vector(&h.eval(t));
                let w = if follower {
                    &s.r0 * scale
                } else {
                    &s.r0hat * scale
                };
                ArmPoint {
                    a: s.a.clone(),
                    b: ht.clone(),
                    c: s.c.clone(),
                    d: Vector::zeros(n),
                    channels: vec![
                        Channel {
                            q: state,
                            w: s.q.clone(),
                            lin: Mat::identity(n, n),
                            off: Vector::zeros(n),
                        },
                        Channel {
                            q: dist,
                            w,
                            lin: Mat::zeros(n, n),
                            off: ht,
                        },
                    ],
                }
            }),
        }
    }

    fn model(&self, test: Test, dir: &MatrixPath) -> Result<ArmModel> {
        match test {
            Test::Follower => self.follower(dir),
            Test::Leader => self.leader(dir),
            t => Ok(self.disturbance(dir, t)),
        }
    }
}

/// Random piecewise-constant direction with unit `L²` norm, sampled on the
/// grid nodes.
pub fn random_direction(
    grid: TimeGrid,
    dim: usize,
    pieces: usize,
    seed: u64,
    id: u64,
) -> MatrixPath {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d1ec_7105_0000);
    rng.set_stream(id);
    let pieces = pieces.max(1);
    let vals: Vec<Vector> = (0..pieces)
        .map(|_| Vector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let norm2: f64 =
        vals.iter().map(|v| v.norm_squared()).sum::<f64>() * grid.horizon() / pieces as f64;
    let scale = if norm2 > 0.0 { 1.0 / norm2.sqrt() } else { 0.0 };
    MatrixPath::from_fn(grid, |_, t| {
        let i = ((t / grid.horizon() * pieces as f64) as usize).min(pieces - 1);
        col(&(&vals[i] * scale))
    })
    .expect("grid-sized samples")
}

// ---------------------------------------------------------------------------
// path engine

struct PathResult {
    j: f64,
    jf: f64,
    jt: f64,
    terminal: Vec<f64>,
    arms: Vec<(f64, f64)>,
    diverged: bool,
}

fn run_path(plan: &Plan, arms: &[FlatArm], seed: u64, path: usize) -> PathResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    let (n, dim, dt) = (plan.n, plan.dim, plan.dt);
    let sqdt = dt.sqrt();
    let mut x = plan.xi.clone();
    let mut drift = vec![0.0; dim];
    let mut diff = vec![0.0; dim];
    let mut vals = Values::new(plan);
    let mut deltas: Vec<Vec<f64>> = arms.iter().map(|a| vec![0.0; a.dim]).collect();
    let mut ddrift: Vec<Vec<f64>> = arms.iter().map(|a| vec![0.0; a.dim]).collect();
    let mut ddiff: Vec<Vec<f64>> = arms.iter().map(|a| vec![0.0; a.dim]).collect();
    let mut acc = vec![(0.0, 0.0); arms.len()];
    let mut pert = vec![0.0; n.max(plan.m1).max(plan.m2)];
    let (mut j, mut jf, mut jt) = (0.0, 0.0, 0.0);
    let (half_a, half_g) = (plan.alpha / 2.0, plan.gamma / 2.0);

    let account =
        |acc: &mut (f64, f64), ch: &FlatChannel, base: &[f64], delta: &[f64], pert: &mut [f64]| {
            let p = &mut pert[..ch.off.len()];
            matvec(&ch.lin, delta, p);
            p.iter_mut().zip(&ch.off).for_each(|(a, b)| *a += b);
            acc.0 += 2.0 * bilinear(&ch.w, base, p);
            acc.1 += bilinear(&ch.w, p, p);
        };

    for (k, st) in plan.steps.iter().enumerate() {
        vals.fill(st, &x);
        let (xs, xb) = (&x[..n], &x[n..2 * n]);
        let control = bilinear(&st.r1, &vals.u1, &vals.u1) + bilinear(&st.r2, &vals.u2, &vals.u2);
        let qx = bilinear(&st.q, xs, xs);
        j += dt * (qx + control);
        jf +=
            dt * (bilinear(&st.q, xb, xb) + control - half_a * bilinear(&st.r0, &vals.f, &vals.f));
        jt += dt * (qx + control + half_g * bilinear(&st.r0hat, &vals.f2, &vals.f2));
        for (i, arm) in arms.iter().enumerate() {
            let a = &arm.steps[k];
            for ch in &a.channels {
                account(
                    &mut acc[i],
                    ch,
                    vals.get(ch.q, &x, n),
                    &deltas[i],
                    &mut pert,
                );
            }
        }
        let dw: f64 = rng.sample::<f64, _>(StandardNormal) * sqdt;
        matvec(&st.a, &x, &mut drift);
        matvec(&st.c, &x, &mut diff);
        for i in 0..dim {
            x[i] += (drift[i] + st.b[i]) * dt + (diff[i] + st.d[i]) * dw;
        }
        for (i, arm) in arms.iter().enumerate() {
            let a = &arm.steps[k];
            let d = &mut deltas[i];
            matvec(&a.a, d, &mut ddrift[i]);
            matvec(&a.c, d, &mut ddiff[i]);
            for r in 0..arm.dim {
                d[r] += (ddrift[i][r] + a.b[r]) * dt + (ddiff[i][r] + a.d[r]) * dw;
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return PathResult {
                j: f64::NAN,
                jf: f64::NAN,
                jt: f64::NAN,
                terminal: x,
                arms: acc,
                diverged: true,
            };
        }
    }
    let (xs, xb) = (&x[..n], &x[n..2 * n]);
    j += bilinear(&plan.g, xs, xs);
    jf += bilinear(&plan.g, xb, xb);
    jt += bilinear(&plan.g, xs, xs);
    for (i, arm) in arms.iter().enumerate() {
        for ch in &arm.terminal {
            let base = match ch.q {
                Quantity::X => &x[..n],
                _ => &x[n..2 * n],
            };
            account(&mut acc[i], ch, base, &deltas[i], &mut pert);
        }
    }
    let diverged = !(j.is_finite() && jf.is_finite() && jt.is_finite())
        || acc.iter().any(|(a, b)| !a.is_finite() || !b.is_finite());
    PathResult {
        j,
        jf,
        jt,
        terminal: x,
        arms: acc,
        diverged,
    }
}

fn run_all(plan: &Plan, arms: &[FlatArm], cfg: &SimConfig) -> Result<Vec<PathResult>> {
    let results = par::map(cfg.exec, cfg.paths, |i| run_path(plan, arms, cfg.seed, i));
    let diverged = results.iter().filter(|r| r.diverged).count();
    if diverged as f64 > BLOW_UP_BUDGET * cfg.paths as f64 {
        return Err(Error::Simulation(format!(
            "{diverged} of {} paths diverged (budget {:.1}%)",
            cfg.paths,
            BLOW_UP_BUDGET * 100.0
        )));
    }
    Ok(results.into_iter().filter(|r| !r.diverged).collect())
}

/// Euler–Maruyama simulation of the closed loop
/// `d𝕏̂ = (Ã𝕏̂ + B̃)dt + (C̃𝕏̂ + D̃)dW`, `𝕏̂(0) = Ξ̂`, with costs accumulated
/// by left-endpoint quadrature.
pub fn simulate(sol: &EquilibriumSolution, cfg: &SimConfig) -> Result<SimOutput> {
    let plan = Plan::new(sol, cfg.substeps);
    let results = run_all(&plan, &[], cfg)?;
    let diverged = cfg.paths - results.len();
    let mut out = SimOutput {
        terminal: Vec::with_capacity(results.len()),
        j: Vec::with_capacity(results.len()),
        j_follower: Vec::with_capacity(results.len()),
        j_leader: Vec::with_capacity(results.len()),
        diverged,
    };
    for r in results {
        out.terminal.push(Vector::from_vec(r.terminal));
        out.j.push(r.j);
        out.j_follower.push(r.jf);
        out.j_leader.push(r.jt);
    }
    Ok(out)
}

/// One Euler–Maruyama path of the closed loop on the sub-stepped grid,
/// driven by the same substream as path `path` of [`simulate`].
pub fn sample_path(
    sol: &EquilibriumSolution,
    cfg: &SimConfig,
    path: usize,
) -> Result<(TimeGrid, Vec<Vector>)> {
    let plan = Plan::new(sol, cfg.substeps);
    let sub = sol.spec.grid.refine(cfg.substeps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(path as u64);
    let dim = plan.dim;
    let mut x = plan.xi.clone();
    let mut out = vec![Vector::from_column_slice(&x)];
    let (mut drift, mut diff) = (vec![0.0; dim], vec![0.0; dim]);
    for (k, st) in plan.steps.iter().enumerate() {
        let dw: f64 = rng.sample::<f64, _>(StandardNormal) * plan.dt.sqrt();
        matvec(&st.a, &x, &mut drift);
        matvec(&st.c, &x, &mut diff);
        for i in 0..dim {
            x[i] += (drift[i] + st.b[i]) * plan.dt + (diff[i] + st.d[i]) * dw;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Simulation(format!(
                "sample path diverged at step {}",
                k + 1
            )));
        }
        out.push(Vector::from_column_slice(&x));
    }
    Ok((sub, out))
}

// ---------------------------------------------------------------------------
// best-response report

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::Inconclusive => "inconclusive",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PerturbationRow {
    pub test: Test,
    pub direction: usize,
    pub eps: f64,
    pub delta_j: f64,
    pub stderr: f64,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PerturbationReport {
    pub rows: Vec<PerturbationRow>,
    /// Mean base value of the follower's and the leader's robust cost.
    pub base_follower: f64,
    pub base_leader: f64,
}

impl PerturbationReport {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.verdict == Verdict::Pass)
    }

    pub fn rows_for(&self, test: Test, eps: f64) -> impl Iterator<Item = &PerturbationRow> {
        self.rows
            .iter()
            .filter(move |r| r.test == test && r.eps == eps)
    }

    /// CSV with header `test,direction,eps,delta_j,stderr,verdict`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("test,direction,eps,delta_j,stderr,verdict\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:.16e},{:.16e},{:.16e},{}\n",
                r.test.name(),
                r.direction,
                r.eps,
                r.delta_j,
                r.stderr,
                r.verdict.as_str()
            ));
        }
        s
    }
}

/// Three-standard-error sign rule. A row is inconclusive when the standard
/// error cannot resolve a change of relative size `ε` in the cost.
fn verdict(test: Test, eps: f64, est: Estimate, base: f64) -> Verdict {
    if !est.mean.is_finite()
        || !est.stderr.is_finite()
        || 3.0 * est.stderr > eps.abs() * (1.0 + base.abs())
    {
        return Verdict::Inconclusive;
    }
    let ok = if test.minimizes() {
        est.mean >= -3.0 * est.stderr
    } else {
        est.mean <= 3.0 * est.stderr
    };
    if ok {
        Verdict::Pass
    } else {
        Verdict::Fail
    }
}

/// Number of constant pieces in a perturbation direction.
pub const DIRECTION_PIECES: usize = 8;

/// Best-response perturbation suite for one `ε`.
pub fn perturb_best_response(
    sol: &EquilibriumSolution,
    cfg: &SimConfig,
    directions: usize,
    eps: f64,
) -> Result<PerturbationReport> {
    perturb_best_response_multi(sol, cfg, directions, &[eps])
}

/// Best-response perturbation suite for several `ε`, all evaluated on the
/// same arms and increments.
pub fn perturb_best_response_multi(
    sol: &EquilibriumSolution,
    cfg: &SimConfig,
    directions: usize,
    eps: &[f64],
) -> Result<PerturbationReport> {
    let spec = &sol.spec;
    let ctx = ArmContext::new(spec, &sol.p.p, &sol.p1.p, sol.delta, true)?;
    let sub = spec.grid.refine(cfg.substeps);
    let mut keys = Vec::new();
    let mut arms = Vec::new();
    for test in Test::ALL {
        let dim = match test {
            Test::Follower => spec.m1,
            Test::Leader => spec.m2,
            _ => spec.n,
        };
        for dir in 0..directions {
            let id = (test as u64) << 32 | dir as u64;
            let v = random_direction(spec.grid, dim, DIRECTION_PIECES, cfg.seed, id);
            arms.push(ctx.model(test, &v)?.flatten(sub));
            keys.push((test, dir));
        }
    }
    let plan = Plan::new(sol, cfg.substeps);
    let results = run_all(&plan, &arms, cfg)?;
    let base_follower = Estimate::of(&results.iter().map(|r| r.jf).collect::<Vec<_>>()).mean;
    let base_leader = Estimate::of(&results.iter().map(|r| r.jt).collect::<Vec<_>>()).mean;
    let mut rows = Vec::new();
    for &e in eps {
        for (i, &(test, dir)) in keys.iter().enumerate() {
            let dj: Vec<f64> = results
                .iter()
                .map(|r| {
                    let (a, b) = r.arms[i];
                    e * a + e * e * b
                })
                .collect();
            let est = Estimate::of(&dj);
            let base = if test.follower_cost() {
                base_follower
            } else {
                base_leader
            };
            rows.push(PerturbationRow {
                test,
                direction: dir,
                eps: e,
                delta_j: est.mean,
                stderr: est.stderr,
                verdict: verdict(test, e, est, base),
            });
        }
    }
    Ok(PerturbationReport {
        rows,
        base_follower,
        base_leader,
    })
}

// ---------------------------------------------------------------------------
// exact moments

/// Exact expected quadratic cost of an affine linear SDE with scalar noise,
/// `dz = (Az + b)dt + (Cz + d)dW`, `z(0) = z0`, for
/// `E[∫ zᵀWz + 2wᵀz + c dt + zᵀW_T z + 2w_Tᵀz]`.
///
/// The second moment of `(z, 1)` obeys a closed linear matrix ODE that is
/// integrated by RK4 on `grid`; coefficients are evaluated at grid nodes and
/// midpoints.
pub struct AffineSde<'a> {
    /// `(A, b, C, d)` at time `t`.
    pub coefficients: &'a (dyn Fn(f64) -> (Mat, Vector, Mat, Vector) + Sync),
    /// `(W, w, c)` at time `t`.
    pub running: &'a (dyn Fn(f64) -> (Mat, Vector, f64) + Sync),
}

fn augment_square(m: &Mat, v: &Vector) -> Mat {
    let k = m.nrows();
    let mut out = Mat::zeros(k + 1, k + 1);
    out.view_mut((0, 0), (k, k)).copy_from(m);
    out.view_mut((0, k), (k, 1)).copy_from(v);
    out
}

fn augment_weight(w: &Mat, l: &Vector, c: f64) -> Mat {
    let k = w.nrows();
    let mut out = Mat::zeros(k + 1, k + 1);
    out.view_mut((0, 0), (k, k)).copy_from(w);
    out.view_mut((0, k), (k, 1)).copy_from(l);
    out.view_mut((k, 0), (1, k)).copy_from(&l.transpose());
    out[(k, k)] = c;
    out
}

impl AffineSde<'_> {
    /// Moments `E[(z,1)(z,1)ᵀ]` at every node and the accumulated running
    /// cost at `T`.
    pub fn moments(&self, grid: TimeGrid, z0: &Vector) -> Result<(Vec<Mat>, f64)> {
        let k = z0.len();
        let z = stack_one(z0);
        let init = {
            let mut m = Mat::zeros(k + 1, k + 2);
            m.view_mut((0, 0), (k + 1, k + 1))
                .copy_from(&(&z * z.transpose()));
            m
        };
        let rhs = |s: crate::backward::StagePoint, y: &Mat| {
            let (a, b, c, d) = (self.coefficients)(s.t);
            let (w, l, c0) = (self.running)(s.t);
            let abar = augment_square(&a, &b);
            let cbar = augment_square(&c, &d);
            let mm = y.view((0, 0), (k + 1, k + 1)).into_owned();
            let dm = &abar * &mm + &mm * abar.transpose() + &cbar * &mm * cbar.transpose();
            let wbar = augment_weight(&w, &l, c0);
            let mut out = Mat::zeros(k + 1, k + 2);
            out.view_mut((0, 0), (k + 1, k + 1)).copy_from(&dm);
            out[(0, k + 1)] = wbar.component_mul(&mm).sum();
            out
        };
        let path = march_forward("moments", grid, 0, init, rhs)?;
        let total = path.last().expect("non-empty")[(0, k + 1)];
        let mats = path
            .into_iter()
            .map(|m| m.view((0, 0), (k + 1, k + 1)).into_owned())
            .collect();
        Ok((mats, total))
    }

    pub fn expected_cost(
        &self,
        grid: TimeGrid,
        z0: &Vector,
        terminal: (&Mat, &Vector),
    ) -> Result<f64> {
        let (mats, running) = self.moments(grid, z0)?;
        let wt = augment_weight(terminal.0, terminal.1, 0.0);
        Ok(running + wt.component_mul(mats.last().expect("non-empty")).sum())
    }
}

fn stack_one(v: &Vector) -> Vector {
    let mut out = Vector::zeros(v.len() + 1);
    out.rows_mut(0, v.len()).copy_from(v);
    out[v.len()] = 1.0;
    out
}

/// Exact `J(ξ; ū₁, ū₂)` of the closed loop from its moment equations.
pub fn exact_cost(sol: &EquilibriumSolution) -> Result<f64> {
    let cl = &sol.closed_loop;
    let cost = &sol.cost;
    let coefficients = |t: f64| {
        (
            cl.a.eval(t),
            as_vector(&cl.b.eval(t)),
            cl.c.eval(t),
            as_vector(&cl.d.eval(t)),
        )
    };
    let running = |t: f64| {
        (
            cost.quad.eval(t),
            as_vector(&cost.lin.eval(t)),
            cost.constant.eval(t)[(0, 0)],
        )
    };
    let sde = AffineSde {
        coefficients: &coefficients,
        running: &running,
    };
    let m1 = sol.selectors.get(1);
    let gt = m1.transpose() * &sol.spec.g * m1;
    sde.expected_cost(sol.grid(), &sol.xi_hat(), (&gt, &Vector::zeros(gt.nrows())))
}

/// Expected second-order part `E[b]` of an arm (the base path drops out).
fn arm_quadratic(model: &ArmModel, grid: TimeGrid) -> Result<f64> {
    let coefficients = |t: f64| {
        let p = (model.point)(t);
        (p.a, p.b, p.c, p.d)
    };
    let running = |t: f64| {
        let p = (model.point)(t);
        let k = model.dim;
        let mut w = Mat::zeros(k, k);
        let mut l = Vector::zeros(k);
        let mut c = 0.0;
        for ch in &p.channels {
            w += ch.lin.transpose() * &ch.w * &ch.lin;
            l += ch.lin.transpose() * &ch.w * &ch.off;
            c += ch.off.dot(&(&ch.w * &ch.off));
        }
        (w, l, c)
    };
    let k = model.dim;
    let mut wt = Mat::zeros(k, k);
    for ch in &model.terminal {
        wt += ch.lin.transpose() * &ch.w * &ch.lin;
    }
    let sde = AffineSde {
        coefficients: &coefficients,
        running: &running,
    };
    sde.expected_cost(grid, &Vector::zeros(k), (&wt, &Vector::zeros(k)))
}

/// First variation `E[a]` of an arm against the base closed loop, computed
/// exactly from the joint moments of `(𝕏̂, δ)`.
pub fn exact_first_variation(
    sol: &EquilibriumSolution,
    test: Test,
    dir: &MatrixPath,
) -> Result<f64> {
    let spec = &sol.spec;
    let ctx = ArmContext::new(spec, &sol.p.p, &sol.p1.p, sol.delta, test == Test::Leader)?;
    let model = ctx.model(test, dir)?;
    let d = 10 * spec.n;
    let k = model.dim;
    let cl = &sol.closed_loop;
    let st = &sol.strategies;
    let n = spec.n;
    let base_map = |q: Quantity, t: f64| -> (Mat, Vector) {
        let pick = |g: &MatrixPath, o: &MatrixPath| (g.eval(t), as_vector(&o.eval(t)));
        match q {
            Quantity::X => (sol.selectors.get(1).clone(), Vector::zeros(n)),
            Quantity::XBar => (sol.selectors.get(2).clone(), Vector::zeros(n)),
            Quantity::U1 => pick(&st.u1_gain, &st.u1_offset),
            Quantity::U2 => pick(&st.u2_gain, &st.u2_offset),
            Quantity::F => pick(&st.f_gain, &st.f_offset),
            Quantity::F2 => pick(&st.f2_gain, &st.f2_offset),
        }
    };
    let coefficients = |t: f64| {
        let p = (model.point)(t);
        let mut a = Mat::zeros(d + k, d + k);
        let mut c = Mat::zeros(d + k, d + k);
        a.view_mut((0, 0), (d, d)).copy_from(&cl.a.eval(t));
        a.view_mut((d, d), (k, k)).copy_from(&p.a);
        c.view_mut((0, 0), (d, d)).copy_from(&cl.c.eval(t));
        c.view_mut((d, d), (k, k)).copy_from(&p.c);
        let mut b = Vector::zeros(d + k);
        b.rows_mut(0, d).copy_from(&as_vector(&cl.b.eval(t)));
        b.rows_mut(d, k).copy_from(&p.b);
        let mut dd = Vector::zeros(d + k);
        dd.rows_mut(0, d).copy_from(&as_vector(&cl.d.eval(t)));
        dd.rows_mut(d, k).copy_from(&p.d);
        (a, b, c, dd)
    };
    // 2(Gz + g)ᵀW(Lz + o) with base = Gz + g, pert = Lz + o, both in the joint state
    let cross = |chs: &[Channel], t: f64| {
        let mut w = Mat::zeros(d + k, d + k);
        let mut l = Vector::zeros(d + k);
        let mut c = 0.0;
        for ch in chs {
            let (g, g0) = base_map(ch.q, t);
            let mut gj = Mat::zeros(g.nrows(), d + k);
            gj.view_mut((0, 0), (g.nrows(), d)).copy_from(&g);
            let mut lj = Mat::zeros(ch.lin.nrows(), d + k);
            lj.view_mut((0, d), (ch.lin.nrows(), k)).copy_from(&ch.lin);
            let m = gj.transpose() * &ch.w * &lj;
            w += &m + m.transpose();
            l += gj.transpose() * &ch.w * &ch.off + lj.transpose() * &ch.w * &g0;
            c += 2.0 * g0.dot(&(&ch.w * &ch.off));
        }
        (w, l, c)
    };
    let running = |t: f64| cross(&(model.point)(t).channels, t);
    let sde = AffineSde {
        coefficients: &coefficients,
        running: &running,
    };
    let (wt, lt, _) = cross(&model.terminal, spec.grid.horizon());
    let mut z0 = Vector::zeros(d + k);
    z0.rows_mut(0, d).copy_from(&sol.xi_hat());
    sde.expected_cost(sol.grid(), &z0, (&wt, &lt))
}

// ---------------------------------------------------------------------------
// sampled convexity

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Functional {
    /// Follower-side disturbance functional; positive for strict concavity
    /// of the inner maximization.
    #[serde(rename = "J1'")]
    FollowerDisturbance,
    /// Follower control functional.
    #[serde(rename = "J1''")]
    FollowerControl,
    /// Leader-side disturbance functional.
    #[serde(rename = "J2'")]
    LeaderDisturbance,
    /// Leader control functional.
    #[serde(rename = "J2''")]
    LeaderControl,
}

impl Functional {
    pub const ALL: [Functional; 4] = [
        Functional::FollowerDisturbance,
        Functional::FollowerControl,
        Functional::LeaderDisturbance,
        Functional::LeaderControl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Functional::FollowerDisturbance => "J1'",
            Functional::FollowerControl => "J1''",
            Functional::LeaderDisturbance => "J2'",
            Functional::LeaderControl => "J2''",
        }
    }

    fn test(self) -> (Test, f64) {
        match self {
            Functional::FollowerDisturbance => (Test::FollowerDisturbance, -1.0),
            Functional::FollowerControl => (Test::Follower, 1.0),
            Functional::LeaderDisturbance => (Test::LeaderDisturbance, 1.0),
            Functional::LeaderControl => (Test::Leader, -1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvexityRow {
    pub functional: Functional,
    pub sample: usize,
    pub value: f64,
}

/// Sampled values of the four quadratic functionals. Positive minima are
/// evidence, not proof, of the convexity conditions.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvexityReport {
    pub rows: Vec<ConvexityRow>,
}

impl ConvexityReport {
    pub fn minimum(&self, f: Functional) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.functional == f)
            .map(|r| r.value)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn all_positive(&self) -> bool {
        self.rows.iter().all(|r| r.value > 0.0)
    }
}

/// Value of one functional in direction `dir`, exactly in expectation.
pub fn convexity_functional(
    spec: &GameSpec,
    p: &MatrixPath,
    functional: Functional,
    dir: &MatrixPath,
    delta: f64,
) -> Result<f64> {
    let (test, sign) = functional.test();
    let p1 = if test == Test::Follower {
        solve_riccati_generalized(&riccati_problem_r1(spec)?, 0.0)?.p
    } else {
        MatrixPath::zeros(spec.grid, spec.n, spec.n)
    };
    let ctx = ArmContext::new(spec, p, &p1, delta, test == Test::Leader)?;
    Ok(sign * arm_quadratic(&ctx.model(test, dir)?, spec.grid)?)
}

/// Evaluates every functional on `samples` random piecewise-constant
/// directions.
pub fn sampled_convexity(
    spec: &GameSpec,
    samples: usize,
    seed: u64,
    delta: f64,
) -> Result<ConvexityReport> {
    let p = solve_riccati_follower(spec, delta)?.p;
    let p1 = solve_riccati_generalized(&riccati_problem_r1(spec)?, 0.0)?.p;
    let ctx = ArmContext::new(spec, &p, &p1, delta, true)?;
    let mut rows = Vec::new();
    for f in Functional::ALL {
        let (test, sign) = f.test();
        let dim = match test {
            Test::Follower => spec.m1,
            Test::Leader => spec.m2,
            _ => spec.n,
        };
        for i in 0..samples {
            let id = 1 << 40 | (f as u64) << 32 | i as u64;
            let dir = random_direction(spec.grid, dim, DIRECTION_PIECES, seed, id);
            let value = sign * arm_quadratic(&ctx.model(test, &dir)?, spec.grid)?;
            rows.push(ConvexityRow {
                functional: f,
                sample: i,
                value,
            });
        }
    }
    Ok(ConvexityReport { rows })
}

// ---------------------------------------------------------------------------
// boundary-value oracle

/// Node trajectories of the forward and backward components.
#[derive(Clone, Debug)]
pub struct Trajectories {
    pub grid: TimeGrid,
    pub x: Vec<Vector>,
    pub y: Vec<Vector>,
}

impl Trajectories {
    /// `max_k ‖self − other‖∞ / max_k ‖other‖∞` over both components.
    pub fn relative_gap(&self, other: &Trajectories) -> f64 {
        let mut num: f64 = 0.0;
        let mut den: f64 = 0.0;
        for (a, b) in self
            .x
            .iter()
            .zip(&other.x)
            .chain(self.y.iter().zip(&other.y))
        {
            num = num.max((a - b).amax());
            den = den.max(b.amax());
        }
        if den == 0.0 {
            num
        } else {
            num / den
        }
    }
}

/// The game with every diffusion coefficient removed.
pub fn noise_free(spec: &GameSpec) -> GameSpec {
    let mut s = spec.clone();
    let zero = |p: &MatrixPath| MatrixPath::zeros(p.grid(), p.shape().0, p.shape().1);
    s.c = zero(&s.c);
    s.d1 = zero(&s.d1);
    s.d2 = zero(&s.d2);
    s.sigma = zero(&s.sigma);
    s
}

/// Direct implicit-Euler discretization of the leader's Hamiltonian system
/// on the noise-free game, solved as one dense linear system in all node
/// unknowns:
/// `X_{k+1} − X_k = h(Â₁X_{k+1} + B̂₁Y_{k+1} + F̂)`,
/// `Y_{k+1} − Y_k = h(−Â₂ᵀY_k + Q̂X_k + Υ̂)`, `X_0 = Ξ̂`, `Y_N = ĜX_N`.
pub fn bvp_oracle(spec: &GameSpec, steps: usize, delta: f64) -> Result<Trajectories> {
    let grid = TimeGrid::new(spec.grid.horizon(), steps)?;
    let spec = noise_free(&spec.with_grid(grid)?);
    let p = solve_riccati_follower(&spec, delta)?.p;
    let stages = (0..grid.len())
        .map(|k| cascade(&spec, grid.time(k), p.node(k), delta, k).map(|s| s.doublehat))
        .collect::<Result<Vec<_>>>()?;
    let d = stages[0].a1.nrows();
    let nn = grid.len();
    let h = grid.dt();
    let size = 2 * d * nn;
    let xi = |k: usize| 2 * d * k;
    let yi = |k: usize| 2 * d * k + d;
    let mut m = Mat::zeros(size, size);
    let mut rhs = Vector::zeros(size);
    let eye = Mat::identity(d, d);
    let mut row = 0;
    let put = |m: &mut Mat, r: usize, c: usize, block: &Mat| {
        let mut v = m.view_mut((r, c), (d, d));
        v += block;
    };
    // X_0 = Ξ̂
    put(&mut m, row, xi(0), &eye);
    rhs.rows_mut(row, d).copy_from(&stages[0].xi);
    row += d;
    for k in 0..grid.steps() {
        let s1 = &stages[k + 1];
        put(&mut m, row, xi(k + 1), &(&eye - &s1.a1 * h));
        put(&mut m, row, xi(k), &(-&eye));
        put(&mut m, row, yi(k + 1), &(-(&s1.b1 * h)));
        rhs.rows_mut(row, d).copy_from(&(&s1.f * h));
        row += d;
        let s0 = &stages[k];
        put(&mut m, row, yi(k + 1), &eye);
        put(&mut m, row, yi(k), &(-&eye + s0.a2.transpose() * h));
        put(&mut m, row, xi(k), &(-(&s0.q * h)));
        rhs.rows_mut(row, d).copy_from(&(&s0.upsilon * h));
        row += d;
    }
    // Y_N = Ĝ X_N
    let n_last = grid.steps();
    put(&mut m, row, yi(n_last), &eye);
    put(&mut m, row, xi(n_last), &(-&stages[n_last].g));
    let sol = LU::new(m)
        .solve(&rhs)
        .ok_or_else(|| Error::Simulation("boundary-value system is singular".into()))?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::Simulation(
            "boundary-value system is singular".into(),
        ));
    }
    Ok(Trajectories {
        grid,
        x: (0..nn).map(|k| sol.rows(xi(k), d).into_owned()).collect(),
        y: (0..nn).map(|k| sol.rows(yi(k), d).into_owned()).collect(),
    })
}

/// Deterministic skeleton of the pipeline on the noise-free game:
/// `Ẋ = ÃX + B̃`, `Y = P̂X + φ̂`, on the grid with `steps` intervals.
pub fn pipeline_skeleton(spec: &GameSpec, steps: usize, delta: f64) -> Result<Trajectories> {
    let grid = TimeGrid::new(spec.grid.horizon(), steps)?;
    let spec = noise_free(&spec.with_grid(grid)?);
    let sol = solve_game(&spec, delta)?;
    let cl = &sol.closed_loop;
    let xs = march_forward("skeleton", grid, 0, col(&sol.xi_hat()), |s, x| {
        cl.a.node(s.half) * x + cl.b.node(s.half)
    })?;
    let x: Vec<Vector> = xs.iter().map(as_vector).collect();
    let y = x
        .iter()
        .enumerate()
        .map(|(k, xk)| sol.phat.p.node(k) * xk + as_vector(sol.phihat.node(k)))
        .collect();
    Ok(Trajectories { grid, x, y })
}

/// Residual of the backward equation along the noise-free skeleton:
/// `‖Ẏ + Â₂ᵀY − Q̂X − Υ̂‖∞ / (1 + ‖Y‖∞)` at every node, with `Ẏ` from
/// fourth-order finite differences.
pub fn skeleton_residual(spec: &GameSpec, steps: usize, delta: f64) -> Result<Vec<f64>> {
    let tr = pipeline_skeleton(spec, steps, delta)?;
    let grid = tr.grid;
    let spec = noise_free(&spec.with_grid(grid)?);
    let p = solve_riccati_follower(&spec, delta)?.p;
    let ypath = MatrixPath::from_samples(grid, tr.y.iter().map(col).collect())?;
    let dy = crate::backward::finite_difference(&ypath);
    (0..grid.len())
        .map(|k| {
            let dh = cascade(&spec, grid.time(k), p.node(k), delta, k)?.doublehat;
            let r =
                as_vector(&dy[k]) + dh.a2.transpose() * &tr.y[k] - &dh.q * &tr.x[k] - &dh.upsilon;
            Ok(r.amax() / (1.0 + tr.y[k].amax()))
        })
        .collect()
}
