//! The full pipeline: follower and disturbance Riccati equations, the
//! augmentation cascade, the leader's Riccati and offset equations, feedback
//! gains, closed-loop coefficients and the value function.

use crate::augment::{cascade, gain_node, selectors, DoubleHatBlocks, SelectorSet, Stage};
use crate::backward::{
    coefficient_grid, march_backward, riccati_problem_r4, solve_lyapunov, solve_offset,
    solve_riccati_follower, solve_riccati_generalized, solve_riccati_r1, solve_value_offset,
    Monitor, RiccatiSolution,
};
use crate::error::{Error, Result};
use crate::linalg::{as_vector, col, inverse};
use crate::model::{
    max_eigenvalue, validate_spec, ConstantGame, GameSpec, Mat, MatrixPath, TimeGrid, Vector,
};
use crate::par::{self, Execution};

/// Default positivity margin.
pub const DEFAULT_DELTA: f64 = 1e-8;

/// Affine maps `X̂ ↦ gain·X̂ + offset` of the four strategies, sampled on the
/// coefficient grid.
#[derive(Clone, Debug)]
pub struct StrategyMaps {
    pub u1_gain: MatrixPath,
    pub u1_offset: MatrixPath,
    pub u2_gain: MatrixPath,
    pub u2_offset: MatrixPath,
    pub f_gain: MatrixPath,
    pub f_offset: MatrixPath,
    pub f2_gain: MatrixPath,
    pub f2_offset: MatrixPath,
}

/// Closed-loop coefficients `d𝕏̂ = (Ã𝕏̂ + B̃)dt + (C̃𝕏̂ + D̃)dW`.
#[derive(Clone, Debug)]
pub struct ClosedLoop {
    pub a: MatrixPath,
    pub b: MatrixPath,
    pub c: MatrixPath,
    pub d: MatrixPath,
}

/// Running cost of `J` in closed loop: `𝕏̂ᵀS𝕏̂ + 2sᵀ𝕏̂ + c₀`.
#[derive(Clone, Debug)]
pub struct CostSources {
    pub quad: MatrixPath,
    pub lin: MatrixPath,
    pub constant: MatrixPath,
}

/// Everything produced by [`solve_game`].
#[derive(Clone, Debug)]
pub struct EquilibriumSolution {
    pub spec: GameSpec,
    pub delta: f64,
    /// Follower Riccati solution.
    pub p: RiccatiSolution,
    /// Disturbance Riccati solution.
    pub p1: RiccatiSolution,
    /// Leader Riccati solution (`10n`).
    pub phat: RiccatiSolution,
    pub phihat: MatrixPath,
    pub doublehat: Stage<DoubleHatBlocks>,
    pub selectors: SelectorSet,
    pub pm1: MatrixPath,
    pub pm2: MatrixPath,
    pub phim1: MatrixPath,
    pub phim2: MatrixPath,
    pub strategies: StrategyMaps,
    pub closed_loop: ClosedLoop,
    pub cost: CostSources,
    pub lyapunov: MatrixPath,
    pub psi: MatrixPath,
    /// Largest eigenvalue of the leader weight at every coefficient node.
    pub leader_weight: Monitor,
}

impl EquilibriumSolution {
    pub fn grid(&self) -> TimeGrid {
        self.spec.grid
    }

    /// Coefficient grid (the solve grid refined by two).
    pub fn fine_grid(&self) -> TimeGrid {
        coefficient_grid(self.spec.grid)
    }

    /// Initial augmented state `Ξ̂`.
    pub fn xi_hat(&self) -> Vector {
        self.doublehat.nodes[0].xi.clone()
    }

    pub fn monitors(&self) -> Vec<&Monitor> {
        let mut out: Vec<&Monitor> = self.p.monitors.iter().collect();
        out.extend(self.p1.monitors.iter());
        out.extend(self.phat.monitors.iter());
        out.push(&self.leader_weight);
        out
    }
}

/// Strategy values at one state and time.
#[derive(Clone, Debug, PartialEq)]
pub struct StrategyOutput {
    pub u1: Vector,
    pub u2: Vector,
    /// Combined worst disturbance faced by the follower.
    pub f: Vector,
    /// The leader's worst disturbance.
    pub f2: Vector,
}

struct NodeOut {
    dh: DoubleHatBlocks,
    rr_max: f64,
}

struct LoopNode {
    a: Mat,
    b: Mat,
    c: Mat,
    d: Mat,
    pm1: Mat,
    pm2: Mat,
    phim1: Mat,
    phim2: Mat,
    maps: [Mat; 8],
    quad: Mat,
    lin: Mat,
    constant: Mat,
}

/// Closed-loop coefficients from one double-hat node and the decoupling
/// field `𝕐̂ = P̂𝕏̂ + φ̂`.
pub fn closed_loop_node(dh: &DoubleHatBlocks, phat: &Mat, phihat: &Vector) -> Option<[Mat; 4]> {
    let d = phat.nrows();
    let k = inverse(&(Mat::identity(d, d) - phat * &dh.d2))?;
    let zx = &k * phat * (&dh.c1 + &dh.d1 * phat);
    let z0 = &k * (phat * &dh.d1 * phihat + phat * &dh.sigma);
    Some([
        &dh.a1 + &dh.b1 * phat + &dh.b2 * &zx,
        col(&(&dh.b1 * phihat + &dh.b2 * &z0 + &dh.f)),
        &dh.c1 + &dh.d1 * phat + &dh.d2 * &zx,
        col(&(&dh.d1 * phihat + &dh.d2 * &z0 + &dh.sigma)),
    ])
}

/// Runs the whole pipeline.
pub fn solve_game(spec: &GameSpec, delta: f64) -> Result<EquilibriumSolution> {
    solve_game_with(spec, delta, Execution::default())
}

/// [`solve_game`] with an explicit schedule for the per-node stage work.
pub fn solve_game_with(
    spec: &GameSpec,
    delta: f64,
    exec: Execution,
) -> Result<EquilibriumSolution> {
    let report = validate_spec(spec, delta);
    if !report.passed() {
        let msg: Vec<String> = report
            .failures()
            .map(|c| format!("{}: {}", c.name, c.detail))
            .collect();
        return Err(Error::Validation(msg.join("; ")));
    }
    let n = spec.n;
    let grid = spec.grid;
    let fine = coefficient_grid(grid);

    let p = solve_riccati_follower(spec, delta)?;
    let p1 = solve_riccati_r1(spec)?;

    let nodes = par::try_map(exec, fine.len(), |j| {
        let t = fine.time(j);
        let st = cascade(spec, t, &p.p.eval(t), delta, j / 2)?;
        Ok(NodeOut {
            rr_max: max_eigenvalue(&st.weights.rr),
            dh: st.doublehat,
        })
    })?;
    let mut leader_weight = Monitor {
        name: "leader weight (negated max eigenvalue)".into(),
        threshold: delta,
        values: Vec::with_capacity(nodes.len()),
    };
    let mut dh_nodes = Vec::with_capacity(nodes.len());
    for node in nodes {
        leader_weight.values.push(-node.rr_max);
        dh_nodes.push(node.dh);
    }
    let doublehat = Stage {
        grid: fine,
        nodes: dh_nodes,
    };

    let (prob, src) = riccati_problem_r4(grid, &doublehat)?;
    let phat = solve_riccati_generalized(&prob, delta)?;
    let phihat = solve_offset(&prob, &phat.p, &src)?.phi;

    let sel = selectors(n);
    let loops = par::try_map(exec, fine.len(), |j| {
        let t = fine.time(j);
        let s = spec.at(t);
        let pk = p.p.eval(t);
        let st = cascade(spec, t, &pk, delta, j / 2)?;
        let dh = &doublehat.nodes[j];
        let ph = phat.p.eval(t);
        let phi = as_vector(&phihat.eval(t));
        let [a, b, c, d] = closed_loop_node(dh, &ph, &phi)
            .ok_or_else(|| Error::regularity("(R-4)", j / 2, "I - P D2 singular"))?;
        let g = gain_node(
            &s,
            &pk,
            &st.factors,
            &st.weights,
            dh,
            &sel,
            &ph,
            &phi,
            j / 2,
        )?;
        let ri = &st.factors.ri;
        let rri = &st.weights.rr_inv;
        let kappa = &st.factors.kappa;
        let r0hi = inverse(&s.r0hat).ok_or_else(|| Error::Input("R0hat singular".into()))?;
        let f2w = r0hi * (2.0 / spec.gamma);
        let (m1, m5, m6) = (sel.get(1), sel.get(5), sel.get(6));
        let maps = [
            ri * &g.pm1,
            col(&(ri * &g.phim1)),
            rri * &g.pm2,
            col(&(rri * &g.phim2)),
            -(kappa * m5 * &ph),
            col(&(-(kappa * m5 * &phi))),
            &f2w * m6 * &ph,
            col(&(&f2w * m6 * &phi)),
        ];
        let w2 = rri * &s.r2 * rri;
        let r = &st.weights.r;
        let quad = m1.transpose() * &s.q * m1
            + g.pm1.transpose() * r * &g.pm1
            + g.pm2.transpose() * &w2 * &g.pm2;
        let lin = g.pm1.transpose() * r * &g.phim1 + g.pm2.transpose() * &w2 * &g.phim2;
        let constant = Mat::from_element(
            1,
            1,
            g.phim1.dot(&(r * &g.phim1)) + g.phim2.dot(&(&w2 * &g.phim2)),
        );
        Ok(LoopNode {
            a,
            b,
            c,
            d,
            pm1: g.pm1,
            pm2: g.pm2,
            phim1: col(&g.phim1),
            phim2: col(&g.phim2),
            maps,
            quad,
            lin: col(&lin),
            constant,
        })
    })?;
    let path = |f: &dyn Fn(&LoopNode) -> Mat| {
        MatrixPath::from_samples(fine, loops.iter().map(f).collect())
    };
    let closed_loop = ClosedLoop {
        a: path(&|l| l.a.clone())?,
        b: path(&|l| l.b.clone())?,
        c: path(&|l| l.c.clone())?,
        d: path(&|l| l.d.clone())?,
    };
    let map = |i: usize| path(&|l| l.maps[i].clone());
    let strategies = StrategyMaps {
        u1_gain: map(0)?,
        u1_offset: map(1)?,
        u2_gain: map(2)?,
        u2_offset: map(3)?,
        f_gain: map(4)?,
        f_offset: map(5)?,
        f2_gain: map(6)?,
        f2_offset: map(7)?,
    };
    let cost = CostSources {
        quad: path(&|l| l.quad.clone())?,
        lin: path(&|l| l.lin.clone())?,
        constant: path(&|l| l.constant.clone())?,
    };
    let m1 = sel.get(1);
    let lyapunov = solve_lyapunov(
        grid,
        &closed_loop.a,
        &closed_loop.c,
        &cost.quad,
        &(m1.transpose() * &spec.g * m1),
    )?;
    let psi = solve_value_offset(
        grid,
        &closed_loop.a,
        &closed_loop.c,
        &closed_loop.b,
        &closed_loop.d,
        &lyapunov,
        &cost.lin,
    )?
    .phi;
    Ok(EquilibriumSolution {
        spec: spec.clone(),
        delta,
        pm1: path(&|l| l.pm1.clone())?,
        pm2: path(&|l| l.pm2.clone())?,
        phim1: path(&|l| l.phim1.clone())?,
        phim2: path(&|l| l.phim2.clone())?,
        p,
        p1,
        phat,
        phihat,
        doublehat,
        selectors: sel,
        strategies,
        closed_loop,
        cost,
        lyapunov,
        psi,
        leader_weight,
    })
}

/// Strategies at augmented state `xhat` and time `t`.
pub fn feedback(sol: &EquilibriumSolution, xhat: &Vector, t: f64) -> Result<StrategyOutput> {
    let d = 10 * sol.spec.n;
    if xhat.len() != d {
        return Err(Error::Input(format!(
            "state has length {}, expected {d}",
            xhat.len()
        )));
    }
    let s = &sol.strategies;
    let eval = |g: &MatrixPath, o: &MatrixPath| -> Result<Vector> {
        Ok(g.sample(t)? * xhat + as_vector(&o.sample(t)?))
    };
    Ok(StrategyOutput {
        u1: eval(&s.u1_gain, &s.u1_offset)?,
        u2: eval(&s.u2_gain, &s.u2_offset)?,
        f: eval(&s.f_gain, &s.f_offset)?,
        f2: eval(&s.f2_gain, &s.f2_offset)?,
    })
}

/// Value `Ξ̂ᵀ𝕃(0)Ξ̂ + 2ψ(0)ᵀΞ̂ + ∫(c₀ + D̃ᵀ𝕃D̃ + 2B̃ᵀψ)dt`, trapezoidal in time.
pub fn value(sol: &EquilibriumSolution) -> f64 {
    let grid = sol.grid();
    let xi = sol.xi_hat();
    let integrand: Vec<f64> = (0..grid.len())
        .map(|k| {
            let j = 2 * k;
            let l = sol.lyapunov.node(k);
            let psi = sol.psi.node(k);
            let b = sol.closed_loop.b.node(j);
            let d = sol.closed_loop.d.node(j);
            sol.cost.constant.node(j)[(0, 0)]
                + (d.transpose() * l * d)[(0, 0)]
                + 2.0 * (b.transpose() * psi)[(0, 0)]
        })
        .collect();
    let h = grid.dt();
    let integral: f64 = integrand.windows(2).map(|w| 0.5 * h * (w[0] + w[1])).sum();
    let l0 = sol.lyapunov.node(0);
    let psi0 = as_vector(sol.psi.node(0));
    xi.dot(&(l0 * &xi)) + 2.0 * psi0.dot(&xi) + integral
}

/// Scalar follower Riccati equation of the two-producer example,
/// `Ṗ + [2(1−a) + c²]P − P²(1+c)²/(r₁+P) + q = 0`, `P(T) = g`, with
/// `r₁ + P ≥ δ` monitored at every node.
#[allow(clippy::too_many_arguments)]
pub fn scalar_bode(
    a: f64,
    c: f64,
    q: f64,
    g: f64,
    r1: f64,
    horizon: f64,
    steps: usize,
) -> Result<MatrixPath> {
    scalar_bode_with(a, c, q, g, r1, horizon, steps, DEFAULT_DELTA)
}

#[allow(clippy::too_many_arguments)]
pub fn scalar_bode_with(
    a: f64,
    c: f64,
    q: f64,
    g: f64,
    r1: f64,
    horizon: f64,
    steps: usize,
    delta: f64,
) -> Result<MatrixPath> {
    const STAGE: &str = "(bode)";
    let grid = TimeGrid::new(horizon, steps)?;
    let lin = 2.0 * (1.0 - a) + c * c;
    let quad = (1.0 + c) * (1.0 + c);
    march_backward(
        STAGE,
        grid,
        Mat::from_element(1, 1, g),
        |s, p| {
            let x = p[(0, 0)];
            let den = r1 + x;
            if den == 0.0 {
                return Err(Error::regularity(STAGE, s.half / 2, "r1 + P vanishes"));
            }
            Ok(Mat::from_element(1, 1, -(lin * x - x * x * quad / den + q)))
        },
        |k, p| {
            let m = r1 + p[(0, 0)];
            if m >= delta {
                Ok(())
            } else {
                Err(Error::regularity(
                    STAGE,
                    k,
                    format!("r1 + P = {m:.3e} below {delta:.3e}"),
                ))
            }
        },
    )
}

/// Scalar two-producer market game: drift `(1−a)x + u₁ + u₂ + f`, diffusion
/// `cx + u₁ + u₂`, cost weights `q, r₁, r₂, g`, unit disturbance weights.
#[allow(clippy::too_many_arguments)]
pub fn production_spec(
    a: f64,
    c: f64,
    q: f64,
    g: f64,
    r1: f64,
    r2: f64,
    horizon: f64,
    steps: usize,
) -> Result<GameSpec> {
    let game = ConstantGame::scalar(
        [
            1.0 - a,
            c,
            1.0,
            1.0,
            1.0,
            1.0,
            0.0,
            0.0,
            q,
            r1,
            r2,
            1.0,
            1.0,
            g,
        ],
        PRODUCTION_ATTENUATION,
        PRODUCTION_ATTENUATION,
        1.0,
    );
    game.into_spec(TimeGrid::new(horizon, steps)?)
}

/// Attenuation levels `α = γ` of the two-producer game.
pub const PRODUCTION_ATTENUATION: f64 = 128.0;

/// Entrywise `max(·, 0)` on the controls; disturbances pass through.
pub fn clamp_nonnegative(s: &StrategyOutput) -> StrategyOutput {
    StrategyOutput {
        u1: s.u1.map(|x| x.max(0.0)),
        u2: s.u2.map(|x| x.max(0.0)),
        f: s.f.clone(),
        f2: s.f2.clone(),
    }
}
