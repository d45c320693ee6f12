//! Backward-in-time solvers: Riccati equations, linear offset equations,
//! the Lyapunov and value-offset equations, and the fundamental-matrix
//! closed form available when the diffusion coefficients vanish.
//!
//! All solvers use classical RK4 on a uniform grid. Solutions carry node
//! derivatives so later stages can evaluate them between nodes by cubic
//! Hermite interpolation. Every offset equation is a linear ODE because all
//! inhomogeneous inputs are deterministic paths.

use crate::augment::{self, Blocks, DoubleHatBlocks, Stage};
use crate::error::{Error, Result};
use crate::linalg::{all_finite, inverse, inverse_checked};
use crate::model::{min_eigenvalue, GameSpec, Mat, MatrixPath, TimeGrid};
use crate::par::{self, Execution};

/// Condition number above which an inverse is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Magnitude treated as a finite escape.
const ESCAPE: f64 = 1e150;

/// An evaluation point of the RK4 march: time plus its index on the grid
/// refined by two, so midpoint coefficients can be looked up exactly.
#[derive(Clone, Copy, Debug)]
pub struct StagePoint {
    pub t: f64,
    pub half: usize,
}

fn escaped(m: &Mat) -> bool {
    !all_finite(m) || m.amax() > ESCAPE
}

/// Backward RK4 march from `terminal` at `T` to `0`.
pub(crate) fn march_backward(
    stage: &str,
    grid: TimeGrid,
    terminal: Mat,
    rhs: impl Fn(StagePoint, &Mat) -> Result<Mat>,
    mut check: impl FnMut(usize, &Mat) -> Result<()>,
) -> Result<MatrixPath> {
    let n = grid.steps();
    let h = grid.dt();
    let fine = grid.refine(2);
    let at = |k: usize| StagePoint {
        t: grid.time(k),
        half: 2 * k,
    };
    let mid = |k: usize| StagePoint {
        t: fine.time(2 * k + 1),
        half: 2 * k + 1,
    };
    let mut values = vec![Mat::zeros(0, 0); n + 1];
    let mut slopes = vec![Mat::zeros(0, 0); n + 1];
    check(n, &terminal)?;
    let mut k1 = rhs(at(n), &terminal)?;
    if escaped(&k1) {
        return Err(Error::blow_up(stage, n));
    }
    values[n] = terminal;
    for k in (0..n).rev() {
        let y = &values[k + 1];
        let k2 = rhs(mid(k), &(y - &k1 * (h / 2.0)))?;
        let k3 = rhs(mid(k), &(y - &k2 * (h / 2.0)))?;
        let k4 = rhs(at(k), &(y - &k3 * h))?;
        let next = y - (&k1 + &k2 * 2.0 + &k3 * 2.0 + &k4) * (h / 6.0);
        if escaped(&next) {
            return Err(Error::blow_up(stage, k));
        }
        check(k, &next)?;
        let slope = rhs(at(k), &next)?;
        if escaped(&slope) {
            return Err(Error::blow_up(stage, k));
        }
        slopes[k + 1] = std::mem::replace(&mut k1, slope);
        values[k] = next;
    }
    slopes[0] = k1;
    MatrixPath::from_samples(grid, values)?.with_slopes(slopes)
}

/// Forward RK4 march from node `start` to `T`; returns the values at nodes
/// `start..=N`.
pub(crate) fn march_forward(
    stage: &str,
    grid: TimeGrid,
    start: usize,
    initial: Mat,
    rhs: impl Fn(StagePoint, &Mat) -> Mat,
) -> Result<Vec<Mat>> {
    let h = grid.dt();
    let fine = grid.refine(2);
    let at = |k: usize| StagePoint {
        t: grid.time(k),
        half: 2 * k,
    };
    let mid = |k: usize| StagePoint {
        t: fine.time(2 * k + 1),
        half: 2 * k + 1,
    };
    let mut out = Vec::with_capacity(grid.steps() + 1 - start);
    out.push(initial);
    for k in start..grid.steps() {
        let y = out.last().expect("non-empty");
        let k1 = rhs(at(k), y);
        let k2 = rhs(mid(k), &(y + &k1 * (h / 2.0)));
        let k3 = rhs(mid(k), &(y + &k2 * (h / 2.0)));
        let k4 = rhs(at(k + 1), &(y + &k3 * h));
        let next = y + (&k1 + &k2 * 2.0 + &k3 * 2.0 + &k4) * (h / 6.0);
        if escaped(&next) {
            return Err(Error::blow_up(stage, k + 1));
        }
        out.push(next);
    }
    Ok(out)
}

/// Integrates `Ṗ = rhs(t, P)` backward from `P(T) = terminal`.
pub fn integrate_backward(
    rhs: impl Fn(f64, &Mat) -> Mat,
    terminal: Mat,
    grid: TimeGrid,
) -> Result<MatrixPath> {
    march_backward(
        "backward",
        grid,
        terminal,
        |s, p| Ok(rhs(s.t, p)),
        |_, _| Ok(()),
    )
}

/// Per-node record of a monitored scalar.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct Monitor {
    pub name: String,
    /// Smallest admissible value.
    pub threshold: f64,
    pub values: Vec<f64>,
}

impl Monitor {
    fn new(name: &str, threshold: f64, len: usize) -> Self {
        Monitor {
            name: name.to_string(),
            threshold,
            values: vec![f64::NAN; len],
        }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn respected(&self) -> bool {
        self.values.iter().all(|v| *v >= self.threshold)
    }
}

/// Diffusion part of the generalized Riccati equation.
#[derive(Clone, Debug)]
pub struct Fraction {
    pub c1: MatrixPath,
    pub c2: MatrixPath,
    pub b2: MatrixPath,
    pub d1: MatrixPath,
    pub d2: MatrixPath,
}

impl Fraction {
    fn paths(&self) -> [&MatrixPath; 5] {
        [&self.c1, &self.c2, &self.b2, &self.d1, &self.d2]
    }

    fn vanishes(&self) -> bool {
        self.paths().iter().all(|p| p.max_abs() == 0.0)
    }
}

/// `Ṗ + PA₁ + A₂ᵀP + PB₁P − Q + (C₂ᵀ + PB₂)(I − PD₂)⁻¹(PC₁ + PD₁P) = 0`,
/// `P(T) = terminal`. Coefficient paths may live on any grid over the same
/// horizon; the grid refined by two keeps RK4 fourth order.
#[derive(Clone, Debug)]
pub struct RiccatiProblem {
    pub stage: String,
    pub grid: TimeGrid,
    pub a1: MatrixPath,
    pub a2: MatrixPath,
    pub b1: MatrixPath,
    pub q: MatrixPath,
    pub fraction: Option<Fraction>,
    pub terminal: Mat,
}

/// Values of the generalized coefficients at one time.
pub(crate) struct GenCoeffs {
    pub a1: Mat,
    pub a2: Mat,
    pub b1: Mat,
    pub q: Mat,
    pub frac: Option<[Mat; 5]>,
}

impl GenCoeffs {
    /// `(I − PD₂)⁻¹`, identity when the fraction part is absent.
    pub fn k(&self, p: &Mat) -> Option<Mat> {
        let d = p.nrows();
        match &self.frac {
            None => Some(Mat::identity(d, d)),
            Some([_, _, _, _, d2]) => {
                inverse_checked(&(Mat::identity(d, d) - p * d2), MAX_CONDITION).map(|r| r.0)
            }
        }
    }

    /// Value of the generalized Riccati operator (the expression that
    /// equals `−Ṗ`).
    pub fn operator(&self, p: &Mat) -> Option<Mat> {
        let mut out = p * &self.a1 + self.a2.transpose() * p + p * &self.b1 * p - &self.q;
        if let Some([c1, c2, b2, d1, _]) = &self.frac {
            let k = self.k(p)?;
            out += (c2.transpose() + p * b2) * k * (p * c1 + p * d1 * p);
        }
        Some(out)
    }
}

impl RiccatiProblem {
    pub fn dimension(&self) -> usize {
        self.terminal.nrows()
    }

    /// Checks shapes and horizons of every coefficient path.
    pub fn check(&self) -> Result<()> {
        let d = self.dimension();
        if self.terminal.shape() != (d, d) {
            return Err(Error::Input("terminal matrix must be square".into()));
        }
        let mut paths = vec![&self.a1, &self.a2, &self.b1, &self.q];
        if let Some(f) = &self.fraction {
            paths.extend(f.paths());
        }
        let cg = paths[0].grid();
        for p in paths {
            if p.shape() != (d, d) {
                return Err(Error::Input(format!(
                    "{}: coefficient shape {:?}, expected {d}x{d}",
                    self.stage,
                    p.shape()
                )));
            }
            if p.grid() != cg || cg.horizon() != self.grid.horizon() {
                return Err(Error::Input(format!(
                    "{}: coefficient paths do not share a grid",
                    self.stage
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn at(&self, t: f64) -> GenCoeffs {
        GenCoeffs {
            a1: self.a1.eval(t),
            a2: self.a2.eval(t),
            b1: self.b1.eval(t),
            q: self.q.eval(t),
            frac: self.fraction.as_ref().map(|f| {
                [
                    f.c1.eval(t),
                    f.c2.eval(t),
                    f.b2.eval(t),
                    f.d1.eval(t),
                    f.d2.eval(t),
                ]
            }),
        }
    }
}

/// Riccati path with the regularity record of its monitored quantities.
#[derive(Clone, Debug)]
pub struct RiccatiSolution {
    pub p: MatrixPath,
    pub monitors: Vec<Monitor>,
}

/// Follower Riccati equation
/// `Ṗ + PA + AᵀP + CᵀPC + Q − K₁ᵀR̃₁⁻¹K₁ = 0`, `P(T) = G`, with
/// `K₁ = B₁ᵀP + D₁ᵀPC` and `R̃₁ = R₁ + D₁ᵀPD₁ ⪰ δI` enforced at every node.
pub fn solve_riccati_follower(spec: &GameSpec, delta: f64) -> Result<RiccatiSolution> {
    const STAGE: &str = "(riccati)";
    let grid = spec.grid;
    let mut monitor = Monitor::new("(riccati): R1 + D1'PD1 min eigenvalue", delta, grid.len());
    let p = march_backward(
        STAGE,
        grid,
        spec.g.clone(),
        |s, p| {
            let c = spec.at(s.t);
            let rt = &c.r1 + c.d1.transpose() * p * &c.d1;
            let k1 = c.b1.transpose() * p + c.d1.transpose() * p * &c.c;
            let ri = inverse(&rt)
                .ok_or_else(|| Error::regularity(STAGE, s.half / 2, "R1 + D1'PD1 singular"))?;
            Ok(
                -(p * &c.a + c.a.transpose() * p + c.c.transpose() * p * &c.c + &c.q
                    - k1.transpose() * ri * k1),
            )
        },
        |k, p| {
            let c = spec.at(grid.time(k));
            let lam = min_eigenvalue(&(&c.r1 + c.d1.transpose() * p * &c.d1));
            monitor.values[k] = lam;
            if lam >= delta {
                Ok(())
            } else {
                Err(Error::regularity(
                    STAGE,
                    k,
                    format!("R1 + D1'PD1 minimum eigenvalue {lam:.3e} below {delta:.3e}"),
                ))
            }
        },
    )?;
    Ok(RiccatiSolution {
        p,
        monitors: vec![monitor],
    })
}

/// The disturbance Riccati equation
/// `Ṗ₁ + P₁A + AᵀP₁ − (2/α)P₁R₀⁻¹P₁ + CᵀP₁C − Q = 0`, `P₁(T) = −G`,
/// written as a generalized problem.
pub fn riccati_problem_r1(spec: &GameSpec) -> Result<RiccatiProblem> {
    let n = spec.n;
    let kappa = spec.r0.map(|r| {
        inverse(r)
            .map(|i| -i * (2.0 / spec.alpha))
            .unwrap_or_else(|| Mat::from_element(n, n, f64::NAN))
    })?;
    let zero = MatrixPath::zeros(spec.grid, n, n);
    Ok(RiccatiProblem {
        stage: "(R-1)".into(),
        grid: spec.grid,
        a1: spec.a.clone(),
        a2: spec.a.clone(),
        b1: kappa,
        q: spec.q.clone(),
        fraction: Some(Fraction {
            c1: spec.c.clone(),
            c2: spec.c.clone(),
            b2: zero.clone(),
            d1: zero.clone(),
            d2: zero,
        }),
        terminal: -&spec.g,
    })
}

/// Solves the disturbance Riccati equation.
pub fn solve_riccati_r1(spec: &GameSpec) -> Result<RiccatiSolution> {
    solve_riccati_generalized(&riccati_problem_r1(spec)?, 0.0)
}

/// Solves a generalized Riccati problem. With a fraction part the smallest
/// singular value of `I − PD₂` is monitored against `delta`.
pub fn solve_riccati_generalized(prob: &RiccatiProblem, delta: f64) -> Result<RiccatiSolution> {
    prob.check()?;
    let stage = prob.stage.as_str();
    let d = prob.dimension();
    let mut monitor = prob.fraction.as_ref().map(|_| {
        Monitor::new(
            &format!("{}: I - P D2 min singular value", prob.stage),
            delta,
            prob.grid.len(),
        )
    });
    let p = march_backward(
        stage,
        prob.grid,
        prob.terminal.clone(),
        |s, p| {
            prob.at(s.t)
                .operator(p)
                .map(|m| -m)
                .ok_or_else(|| Error::regularity(stage, s.half / 2, "I - P D2 singular"))
        },
        |k, p| {
            if let (Some(m), Some(f)) = (monitor.as_mut(), prob.fraction.as_ref()) {
                let r = Mat::identity(d, d) - p * f.d2.eval(prob.grid.time(k));
                let sv = r.singular_values();
                let (smin, smax) = (sv.min(), sv.max());
                m.values[k] = smin;
                if !(smin >= delta) || !(smax <= MAX_CONDITION * smin) {
                    return Err(Error::regularity(
                        stage,
                        k,
                        format!(
                            "I - P D2 minimum singular value {smin:.3e}, condition {:.3e}",
                            smax / smin
                        ),
                    ));
                }
            }
            Ok(())
        },
    )?;
    Ok(RiccatiSolution {
        p,
        monitors: monitor.into_iter().collect(),
    })
}

/// Inhomogeneous inputs of an offset equation: forward drift `F`, noise
/// intensity `Σ` and backward drift `Υ`, all `d × 1` paths.
#[derive(Clone, Debug)]
pub struct OffsetSources {
    pub f: MatrixPath,
    pub sigma: MatrixPath,
    pub upsilon: MatrixPath,
}

impl OffsetSources {
    pub fn zeros(grid: TimeGrid, d: usize) -> Self {
        let z = MatrixPath::zeros(grid, d, 1);
        OffsetSources {
            f: z.clone(),
            sigma: z.clone(),
            upsilon: z,
        }
    }
}

/// Deterministic offset `φ` with `Y = PX + φ`.
#[derive(Clone, Debug)]
pub struct OffsetSolution {
    pub phi: MatrixPath,
}

/// Solves
/// `φ̇ = −{[A₂ᵀ + PB₁ + (C₂ᵀ + PB₂)KPD₁]φ + (C₂ᵀ + PB₂)KPΣ + PF − Υ}`,
/// `φ(T) = 0`, with `K = (I − PD₂)⁻¹`.
pub fn solve_offset(
    prob: &RiccatiProblem,
    p: &MatrixPath,
    src: &OffsetSources,
) -> Result<OffsetSolution> {
    let stage = format!("{} offset", prob.stage);
    let d = prob.dimension();
    for s in [&src.f, &src.sigma, &src.upsilon] {
        if s.shape() != (d, 1) {
            return Err(Error::Input(format!(
                "{stage}: source shape {:?}, expected {d}x1",
                s.shape()
            )));
        }
    }
    let phi = march_backward(
        &stage,
        prob.grid,
        Mat::zeros(d, 1),
        |s, phi| {
            let c = prob.at(s.t);
            let pk = p.eval(s.t);
            let (f, sig, ups) = (src.f.eval(s.t), src.sigma.eval(s.t), src.upsilon.eval(s.t));
            let mut lin = c.a2.transpose() + &pk * &c.b1;
            let mut rest = &pk * f - ups;
            if let Some([_, c2, b2, d1, _]) = &c.frac {
                let k = c
                    .k(&pk)
                    .ok_or_else(|| Error::regularity(&stage, s.half / 2, "I - P D2 singular"))?;
                let w = (c2.transpose() + &pk * b2) * k * &pk;
                lin += &w * d1;
                rest += &w * sig;
            }
            Ok(-(lin * phi + rest))
        },
        |_, _| Ok(()),
    )?;
    Ok(OffsetSolution { phi })
}

/// `𝕃̇ + 𝕃Ã + Ãᵀ𝕃 + C̃ᵀ𝕃C̃ + S = 0`, `𝕃(T) = terminal`, on `grid`.
pub fn solve_lyapunov(
    grid: TimeGrid,
    atil: &MatrixPath,
    ctil: &MatrixPath,
    source: &MatrixPath,
    terminal: &Mat,
) -> Result<MatrixPath> {
    march_backward(
        "Lyapunov",
        grid,
        terminal.clone(),
        |s, l| {
            let (a, c) = (atil.eval(s.t), ctil.eval(s.t));
            Ok(-(l * &a + a.transpose() * l + c.transpose() * l * &c + source.eval(s.t)))
        },
        |_, _| Ok(()),
    )
}

/// `ψ̇ = −[Ãᵀψ + 𝕃B̃ + C̃ᵀ𝕃D̃ + s]`, `ψ(T) = 0`, on `grid`.
pub fn solve_value_offset(
    grid: TimeGrid,
    atil: &MatrixPath,
    ctil: &MatrixPath,
    btil: &MatrixPath,
    dtil: &MatrixPath,
    l: &MatrixPath,
    source: &MatrixPath,
) -> Result<OffsetSolution> {
    let d = atil.shape().0;
    let phi = march_backward(
        "value offset",
        grid,
        Mat::zeros(d, 1),
        |s, psi| {
            let lk = l.eval(s.t);
            Ok(-(atil.eval(s.t).transpose() * psi
                + &lk * btil.eval(s.t)
                + ctil.eval(s.t).transpose() * &lk * dtil.eval(s.t)
                + source.eval(s.t)))
        },
        |_, _| Ok(()),
    )?;
    Ok(OffsetSolution { phi })
}

/// Block matrix `Ǎ` of the shifted problem `P = Pterm + Π`.
fn shifted_generator(c: &GenCoeffs, g: &Mat) -> Mat {
    let d = g.nrows();
    let mut out = Mat::zeros(2 * d, 2 * d);
    out.view_mut((0, 0), (d, d)).copy_from(&(&c.a1 + &c.b1 * g));
    out.view_mut((0, d), (d, d)).copy_from(&c.b1);
    out.view_mut((d, 0), (d, d))
        .copy_from(&(-(g * &c.a1) - c.a2.transpose() * g - g * &c.b1 * g + &c.q));
    out.view_mut((d, d), (d, d))
        .copy_from(&(-c.a2.transpose() - g * &c.b1));
    out
}

fn special_case_guard(prob: &RiccatiProblem) -> Result<()> {
    prob.check()?;
    match &prob.fraction {
        Some(f) if !f.vanishes() => Err(Error::Input(format!(
            "{}: closed form requires vanishing diffusion blocks",
            prob.stage
        ))),
        _ => Ok(()),
    }
}

/// `P = Pterm − Ψ₂₂⁻¹Ψ₂₁` from the lower blocks of `Ψ(T, t)`.
fn from_fundamental(
    stage: &str,
    k: usize,
    psi: &Mat,
    g: &Mat,
    monitor: &mut Monitor,
) -> Result<Mat> {
    let d = g.nrows();
    let psi22 = psi.view((d, d), (d, d)).into_owned();
    let psi21 = psi.view((d, 0), (d, d)).into_owned();
    let (inv, cond) = inverse_checked(&psi22, MAX_CONDITION)
        .ok_or_else(|| Error::regularity(stage, k, "fundamental corner block ill-conditioned"))?;
    monitor.values[k] = 1.0 / cond;
    Ok(g - inv * psi21)
}

/// Closed form of a generalized Riccati problem without diffusion terms,
/// through the fundamental matrix `Ψ(T, t)` of `Ǎ` integrated backward in
/// its second argument.
pub fn closed_form_special_case(prob: &RiccatiProblem) -> Result<RiccatiSolution> {
    special_case_guard(prob)?;
    let d = prob.dimension();
    let g = &prob.terminal;
    let stage = format!("{} closed form", prob.stage);
    let phi = march_backward(
        &stage,
        prob.grid,
        Mat::identity(2 * d, 2 * d),
        |s, phi| Ok(-(phi * shifted_generator(&prob.at(s.t), g))),
        |_, _| Ok(()),
    )?;
    let mut monitor = Monitor::new(
        &format!("{}: corner block reciprocal condition", prob.stage),
        1.0 / MAX_CONDITION,
        prob.grid.len(),
    );
    let samples = (0..prob.grid.len())
        .map(|k| from_fundamental(&stage, k, phi.node(k), g, &mut monitor))
        .collect::<Result<Vec<_>>>()?;
    Ok(RiccatiSolution {
        p: MatrixPath::from_samples(prob.grid, samples)?,
        monitors: vec![monitor],
    })
}

/// Same closed form with `Ψ(·, t_k)` integrated forward from `Ψ(t_k, t_k) = I`
/// separately for every anchor `t_k`. The anchors are independent.
pub fn closed_form_special_case_anchored(
    prob: &RiccatiProblem,
    exec: Execution,
) -> Result<RiccatiSolution> {
    special_case_guard(prob)?;
    let d = prob.dimension();
    let g = &prob.terminal;
    let stage = format!("{} closed form", prob.stage);
    let grid = prob.grid;
    let finals = par::try_map(exec, grid.len(), |k| {
        let path = march_forward(&stage, grid, k, Mat::identity(2 * d, 2 * d), |s, psi| {
            shifted_generator(&prob.at(s.t), g) * psi
        })?;
        Ok(path.into_iter().last().expect("non-empty"))
    })?;
    let mut monitor = Monitor::new(
        &format!("{}: corner block reciprocal condition", prob.stage),
        1.0 / MAX_CONDITION,
        grid.len(),
    );
    let samples = finals
        .iter()
        .enumerate()
        .map(|(k, psi)| from_fundamental(&stage, k, psi, g, &mut monitor))
        .collect::<Result<Vec<_>>>()?;
    Ok(RiccatiSolution {
        p: MatrixPath::from_samples(grid, samples)?,
        monitors: vec![monitor],
    })
}

/// Grid on which stage coefficients are sampled for a solve on `grid`.
pub fn coefficient_grid(grid: TimeGrid) -> TimeGrid {
    grid.refine(2)
}

fn stage_path<B: Blocks>(stage: &Stage<B>, name: &str) -> Result<MatrixPath> {
    stage
        .path(name)
        .ok_or_else(|| Error::Input(format!("{} stage has no block {name}", stage.tag())))
}

/// Follower Hamiltonian system with a given leader control `u2`
/// (`m2 × 1` path): Riccati problem and offset sources.
pub fn riccati_problem_r2(
    spec: &GameSpec,
    p: &MatrixPath,
    u2: &MatrixPath,
    delta: f64,
) -> Result<(RiccatiProblem, OffsetSources)> {
    let fine = coefficient_grid(spec.grid);
    let hat = augment::build_hat(spec, &p.resample(fine), delta)?;
    let get = |name: &str| stage_path(&hat, name);
    let u2f = u2.resample(fine);
    let mix = |m: &str, v: &str| -> Result<MatrixPath> {
        let (m, v) = (get(m)?, get(v)?);
        MatrixPath::from_fn(fine, |k, _| m.node(k) * u2f.node(k) + v.node(k))
    };
    let prob = RiccatiProblem {
        stage: "(R-2)".into(),
        grid: spec.grid,
        a1: get("A1")?,
        a2: get("A2")?,
        b1: get("B1")?,
        q: get("Q")?,
        fraction: Some(Fraction {
            c1: get("C")?,
            c2: get("C")?,
            b2: get("B3")?,
            d1: get("D1")?,
            d2: get("D3")?,
        }),
        terminal: hat.nodes.last().expect("non-empty").g.clone(),
    };
    let src = OffsetSources {
        f: mix("B2", "b")?,
        sigma: mix("D2", "sigma")?,
        upsilon: mix("F", "v")?,
    };
    Ok((prob, src))
}

/// Leader problem with a given control `u2` in blackboard coordinates:
/// Riccati problem and offset sources.
pub fn riccati_problem_r3(
    spec: &GameSpec,
    p: &MatrixPath,
    u2: &MatrixPath,
    delta: f64,
) -> Result<(RiccatiProblem, OffsetSources)> {
    let fine = coefficient_grid(spec.grid);
    let pf = p.resample(fine);
    let check = augment::build_check(spec, &pf, delta)?;
    let hat = augment::build_hat(spec, &pf, delta)?;
    let bb = augment::build_blackboard(&check, &hat, spec.gamma, &spec.r0hat)?;
    let get = |name: &str| stage_path(&bb, name);
    let u2f = u2.resample(fine);
    let mix = |m: &str, v: &str| -> Result<MatrixPath> {
        let (m, v) = (get(m)?, get(v)?);
        MatrixPath::from_fn(fine, |k, _| m.node(k) * u2f.node(k) + v.node(k))
    };
    let prob = RiccatiProblem {
        stage: "(R-3)".into(),
        grid: spec.grid,
        a1: get("A")?,
        a2: get("A")?,
        b1: get("B1")?,
        q: get("Q")?,
        fraction: Some(Fraction {
            c1: get("C")?,
            c2: get("C")?,
            b2: get("B3")?,
            d1: get("D1")?,
            d2: get("D3")?,
        }),
        terminal: bb.nodes.last().expect("non-empty").g.clone(),
    };
    let src = OffsetSources {
        f: mix("B2", "F1")?,
        sigma: mix("D2", "Sigma")?,
        upsilon: mix("F2", "Upsilon")?,
    };
    Ok((prob, src))
}

/// Leader Hamiltonian system: Riccati problem and offset sources built from
/// a double-hat stage sampled on the coefficient grid of `grid`.
pub fn riccati_problem_r4(
    grid: TimeGrid,
    dh: &Stage<DoubleHatBlocks>,
) -> Result<(RiccatiProblem, OffsetSources)> {
    let get = |name: &str| stage_path(dh, name);
    let prob = RiccatiProblem {
        stage: "(R-4)".into(),
        grid,
        a1: get("A1")?,
        a2: get("A2")?,
        b1: get("B1")?,
        q: get("Q")?,
        fraction: Some(Fraction {
            c1: get("C1")?,
            c2: get("C2")?,
            b2: get("B2")?,
            d1: get("D1")?,
            d2: get("D2")?,
        }),
        terminal: dh.nodes.last().expect("non-empty").g.clone(),
    };
    let src = OffsetSources {
        f: get("F")?,
        sigma: get("Sigma")?,
        upsilon: get("Upsilon")?,
    };
    Ok((prob, src))
}

/// Node residual of the generalized equation along a solved path, with the
/// derivative estimated by fourth-order finite differences of node values.
pub fn generalized_residual(prob: &RiccatiProblem, p: &MatrixPath) -> Vec<f64> {
    let deriv = finite_difference(p);
    (0..p.grid().len())
        .map(|k| {
            let t = p.grid().time(k);
            match prob.at(t).operator(p.node(k)) {
                Some(op) => (&deriv[k] + op).amax(),
                None => f64::INFINITY,
            }
        })
        .collect()
}

/// Fourth-order finite-difference derivatives of the node values.
pub fn finite_difference(p: &MatrixPath) -> Vec<Mat> {
    let grid = p.grid();
    let n = grid.steps();
    let h = grid.dt();
    let y = |k: usize| p.node(k);
    assert!(n >= 4, "finite differences need at least four steps");
    (0..=n)
        .map(|k| {
            let s = k.clamp(2, n - 2);
            if s == k {
                (y(k - 2) - y(k - 1) * 8.0 + y(k + 1) * 8.0 - y(k + 2)) / (12.0 * h)
            } else if k < 2 {
                // one-sided five-point stencils
                let b = k as f64;
                let w = one_sided_weights(b);
                (0..5).fold(Mat::zeros(p.shape().0, p.shape().1), |acc, j| {
                    acc + y(j) * w[j]
                }) / h
            } else {
                let b = (n - k) as f64;
                let w = one_sided_weights(b);
                (0..5).fold(Mat::zeros(p.shape().0, p.shape().1), |acc, j| {
                    acc - y(n - j) * w[j]
                }) / h
            }
        })
        .collect()
}

/// Weights of the derivative at offset `b` from five nodes `0..5`.
fn one_sided_weights(b: f64) -> [f64; 5] {
    let mut w = [0.0; 5];
    for (j, wj) in w.iter_mut().enumerate() {
        // derivative of the Lagrange basis polynomial ℓ_j at b
        let xj = j as f64;
        let mut denom = 1.0;
        for m in 0..5 {
            if m != j {
                denom *= xj - m as f64;
            }
        }
        let mut sum = 0.0;
        for i in 0..5 {
            if i == j {
                continue;
            }
            let mut prod = 1.0;
            for m in 0..5 {
                if m != j && m != i {
                    prod *= b - m as f64;
                }
            }
            sum += prod;
        }
        *wj = sum / denom;
    }
    w
}

/// Node residual of the follower Riccati equation.
pub fn follower_residual(spec: &GameSpec, p: &MatrixPath) -> Vec<f64> {
    let deriv = finite_difference(p);
    (0..p.grid().len())
        .map(|k| {
            let c = spec.at(p.grid().time(k));
            let pk = p.node(k);
            let rt = &c.r1 + c.d1.transpose() * pk * &c.d1;
            let k1 = c.b1.transpose() * pk + c.d1.transpose() * pk * &c.c;
            match inverse(&rt) {
                Some(ri) => (&deriv[k]
                    + pk * &c.a
                    + c.a.transpose() * pk
                    + c.c.transpose() * pk * &c.c
                    + &c.q
                    - k1.transpose() * ri * k1)
                    .amax(),
                None => f64::INFINITY,
            }
        })
        .collect()
}
