//! Augmented block systems of the robust game.
//!
//! Four stages are built from the game coefficients and the follower
//! Riccati solution `P`:
//!
//! * hat (`2n`): follower Hamiltonian system in `(x̄, q̄)` / `(ȳ, p̄)`,
//! * check (`3n` forward, `2n` backward): the leader's view of the actual
//!   state together with the follower system,
//! * blackboard (`5n`): the leader's disturbance-augmented FBSDE,
//! * double hat (`10n`): the leader's Hamiltonian system.
//!
//! Every builder works node by node; [`Stage`] collects the nodes of a grid.
//!
//! Double-hat coordinates use the listing order
//! `𝕏̂ = (x, x̄, q̄, ỹ̄, p̃̄, ŷ̄, p̂̄, x̂̃, x̂̃̄, q̂̃̄)` and
//! `𝕐̂ = (x̂, x̂̄, q̂̄, ŷ̃̄, p̂̃̄, ȳ, p̄, x̃, x̃̄, q̃̄)`, so the selectors
//! `M₄ … M₇` address `ŷ̄ / ȳ`, `p̂̄ / p̄`, `x̂̃ / x̃` and `x̂̃̄ / x̃̄`.

use crate::error::{Error, Result};
use crate::linalg::{assemble, block_selector, inverse, stack, vstack};
use crate::model::{
    max_eigenvalue, min_eigenvalue, GameSpec, Mat, MatrixPath, Snapshot, TimeGrid, Vector,
};
use crate::par::{self, Execution};

/// Named access to the blocks of one node.
pub trait Blocks {
    const TAG: &'static str;
    fn named(&self) -> Vec<(&'static str, Mat)>;
}

/// Blocks of one stage at every node of a grid.
#[derive(Clone, Debug)]
pub struct Stage<B> {
    pub grid: TimeGrid,
    pub nodes: Vec<B>,
}

impl<B: Blocks> Stage<B> {
    pub fn tag(&self) -> &'static str {
        B::TAG
    }

    /// Path of the block called `name`.
    pub fn path(&self, name: &str) -> Option<MatrixPath> {
        let samples: Option<Vec<Mat>> = self
            .nodes
            .iter()
            .map(|b| {
                b.named()
                    .into_iter()
                    .find(|(k, _)| *k == name)
                    .map(|(_, m)| m)
            })
            .collect();
        MatrixPath::from_samples(self.grid, samples?).ok()
    }
}

fn vcol(v: &Vector) -> Mat {
    Mat::from_column_slice(v.len(), 1, v.as_slice())
}

/// Quantities derived from the follower Riccati solution at one node.
#[derive(Clone, Debug)]
pub struct FollowerFactors {
    /// `R̃₁ = R₁ + D₁ᵀPD₁`.
    pub rt: Mat,
    /// `R̃₁⁻¹`.
    pub ri: Mat,
    /// `K₁ = B₁ᵀP + D₁ᵀPC`.
    pub k1: Mat,
    /// `(2/α)R₀⁻¹`.
    pub kappa: Mat,
}

impl FollowerFactors {
    pub fn new(s: &Snapshot, p: &Mat, alpha: f64, delta: f64, node: usize) -> Result<Self> {
        let rt = &s.r1 + s.d1.transpose() * p * &s.d1;
        let lam = min_eigenvalue(&rt);
        if !(lam >= delta) {
            return Err(Error::regularity(
                "(riccati)",
                node,
                format!("R1 + D1'PD1 minimum eigenvalue {lam:.3e} below {delta:.3e}"),
            ));
        }
        let ri = inverse(&rt)
            .ok_or_else(|| Error::regularity("(riccati)", node, "R1 + D1'PD1 singular"))?;
        let k1 = s.b1.transpose() * p + s.d1.transpose() * p * &s.c;
        let r0i = inverse(&s.r0).ok_or_else(|| Error::regularity("(R-1)", node, "R0 singular"))?;
        Ok(FollowerFactors {
            rt,
            ri,
            k1,
            kappa: r0i * (2.0 / alpha),
        })
    }
}

/// Hat stage (`2n`).
#[derive(Clone, Debug)]
pub struct HatBlocks {
    pub a1: Mat,
    pub a2: Mat,
    pub c: Mat,
    pub b1: Mat,
    pub b2: Mat,
    pub b3: Mat,
    pub d1: Mat,
    pub d2: Mat,
    pub d3: Mat,
    pub b: Vector,
    pub sigma: Vector,
    pub v: Vector,
    pub f: Mat,
    pub q: Mat,
    pub g: Mat,
    pub xi: Vector,
}

impl HatBlocks {
    pub fn build(s: &Snapshot, p: &Mat, ff: &FollowerFactors, g: &Mat, xi: &Vector) -> Self {
        let n = s.a.nrows();
        let m2 = s.b2.ncols();
        let (ri, k1, k) = (&ff.ri, &ff.k1, &ff.kappa);
        let sz = [n, n];
        let af = &s.a - &s.b1 * ri * k1;
        let kp = k * p;
        let b1rb1 = &s.b1 * ri * s.b1.transpose();
        let b1rd1 = &s.b1 * ri * s.d1.transpose();
        let d1rb1 = &s.d1 * ri * s.b1.transpose();
        let d1rd1 = &s.d1 * ri * s.d1.transpose();
        let pd2 = p * &s.d2;
        let psig = p * &s.sigma;
        HatBlocks {
            a1: assemble(
                &sz,
                &sz,
                &[(0, 0, af.clone()), (1, 0, -&kp), (1, 1, s.a.clone())],
            ),
            a2: assemble(&sz, &sz, &[(0, 0, af), (1, 0, kp), (1, 1, s.a.clone())]),
            c: assemble(
                &sz,
                &sz,
                &[(0, 0, &s.c - &s.d1 * ri * k1), (1, 1, s.c.clone())],
            ),
            b1: assemble(
                &sz,
                &sz,
                &[(0, 0, b1rb1), (0, 1, -k), (1, 0, k.clone()), (1, 1, -k)],
            ),
            b3: assemble(&sz, &sz, &[(0, 0, b1rd1.clone())]),
            b2: vstack(&[&(&s.b2 - &b1rd1 * &pd2), &Mat::zeros(n, m2)]),
            d1: assemble(&sz, &sz, &[(0, 0, d1rb1)]),
            d3: assemble(&sz, &sz, &[(0, 0, d1rd1.clone())]),
            d2: vstack(&[&(&s.d2 - &d1rd1 * &pd2), &Mat::zeros(n, m2)]),
            b: stack(&[&(-&b1rd1 * &psig), &Vector::zeros(n)]),
            sigma: stack(&[&(&s.sigma - &d1rd1 * &psig), &Vector::zeros(n)]),
            v: stack(&[
                &(s.c.transpose() * &psig - k1.transpose() * ri * s.d1.transpose() * &psig),
                &Vector::zeros(n),
            ]),
            f: vstack(&[
                &(-(k1.transpose()) * ri * s.d1.transpose() * &pd2
                    + p * &s.b2
                    + s.c.transpose() * &pd2),
                &Mat::zeros(n, m2),
            ]),
            q: assemble(&sz, &sz, &[(0, 1, -&s.q), (1, 0, s.q.clone())]),
            g: assemble(&sz, &sz, &[(0, 1, g.clone()), (1, 0, -g)]),
            xi: stack(&[xi, &Vector::zeros(n)]),
        }
    }
}

impl Blocks for HatBlocks {
    const TAG: &'static str = "hat";
    fn named(&self) -> Vec<(&'static str, Mat)> {
        vec![
            ("A1", self.a1.clone()),
            ("A2", self.a2.clone()),
            ("C", self.c.clone()),
            ("B1", self.b1.clone()),
            ("B2", self.b2.clone()),
            ("B3", self.b3.clone()),
            ("D1", self.d1.clone()),
            ("D2", self.d2.clone()),
            ("D3", self.d3.clone()),
            ("b", vcol(&self.b)),
            ("sigma", vcol(&self.sigma)),
            ("v", vcol(&self.v)),
            ("F", self.f.clone()),
            ("Q", self.q.clone()),
            ("G", self.g.clone()),
            ("xi", vcol(&self.xi)),
        ]
    }
}

/// Check stage (`3n` forward, `2n` backward).
#[derive(Clone, Debug)]
pub struct CheckBlocks {
    pub a: Mat,
    pub c: Mat,
    pub b1: Mat,
    pub b2: Mat,
    pub b3: Mat,
    pub d1: Mat,
    pub d2: Mat,
    pub d3: Mat,
    pub f1: Vector,
    pub sigma: Vector,
    pub q: Mat,
    pub g: Mat,
    pub qbar: Mat,
    pub gbar: Mat,
    pub ibar: Mat,
    pub xi: Vector,
}

impl CheckBlocks {
    pub fn build(s: &Snapshot, p: &Mat, ff: &FollowerFactors, g: &Mat, xi: &Vector) -> Self {
        let n = s.a.nrows();
        let m2 = s.b2.ncols();
        let (ri, k1, k) = (&ff.ri, &ff.k1, &ff.kappa);
        let s3 = [n, n, n];
        let s2 = [n, n];
        let b1rk = &s.b1 * ri * k1;
        let d1rk = &s.d1 * ri * k1;
        let b1rb1 = &s.b1 * ri * s.b1.transpose();
        let b1rd1 = &s.b1 * ri * s.d1.transpose();
        let d1rb1 = &s.d1 * ri * s.b1.transpose();
        let d1rd1 = &s.d1 * ri * s.d1.transpose();
        let pd2 = p * &s.d2;
        let psig = p * &s.sigma;
        let b2e = &s.b2 - &b1rd1 * &pd2;
        let d2e = &s.d2 - &d1rd1 * &pd2;
        let seff = &s.sigma - &d1rd1 * &psig;
        let drift = -&b1rd1 * &psig;
        let zn = Vector::zeros(n);
        let mut ibar = Mat::zeros(3 * n, n);
        ibar.view_mut((0, 0), (n, n)).fill_with_identity();
        CheckBlocks {
            a: assemble(
                &s3,
                &s3,
                &[
                    (0, 0, s.a.clone()),
                    (0, 1, -&b1rk),
                    (1, 1, &s.a - &b1rk),
                    (2, 1, -(k * p)),
                    (2, 2, s.a.clone()),
                ],
            ),
            c: assemble(
                &s3,
                &s3,
                &[
                    (0, 0, s.c.clone()),
                    (0, 1, -&d1rk),
                    (1, 1, &s.c - &d1rk),
                    (2, 2, s.c.clone()),
                ],
            ),
            b1: assemble(
                &s3,
                &s2,
                &[
                    (0, 0, b1rb1.clone()),
                    (1, 0, b1rb1),
                    (1, 1, -k),
                    (2, 0, k.clone()),
                    (2, 1, -k),
                ],
            ),
            b3: assemble(&s3, &s2, &[(0, 0, b1rd1.clone()), (1, 0, b1rd1)]),
            d1: assemble(&s3, &s2, &[(0, 0, d1rb1.clone()), (1, 0, d1rb1)]),
            d3: assemble(&s3, &s2, &[(0, 0, d1rd1.clone()), (1, 0, d1rd1)]),
            b2: vstack(&[&b2e, &b2e, &Mat::zeros(n, m2)]),
            d2: vstack(&[&d2e, &d2e, &Mat::zeros(n, m2)]),
            f1: stack(&[&(&s.f1 + &drift), &drift, &zn]),
            sigma: stack(&[&seff, &seff, &zn]),
            q: assemble(&s2, &s3, &[(0, 2, -&s.q), (1, 1, s.q.clone())]),
            g: assemble(&s2, &s3, &[(0, 2, g.clone()), (1, 1, -g)]),
            qbar: assemble(&s3, &s3, &[(0, 0, s.q.clone())]),
            gbar: assemble(&s3, &s3, &[(0, 0, g.clone())]),
            ibar,
            xi: stack(&[xi, xi, &zn]),
        }
    }
}

impl Blocks for CheckBlocks {
    const TAG: &'static str = "check";
    fn named(&self) -> Vec<(&'static str, Mat)> {
        vec![
            ("A", self.a.clone()),
            ("C", self.c.clone()),
            ("B1", self.b1.clone()),
            ("B2", self.b2.clone()),
            ("B3", self.b3.clone()),
            ("D1", self.d1.clone()),
            ("D2", self.d2.clone()),
            ("D3", self.d3.clone()),
            ("F1", vcol(&self.f1)),
            ("sigma", vcol(&self.sigma)),
            ("Q", self.q.clone()),
            ("G", self.g.clone()),
            ("Qbar", self.qbar.clone()),
            ("Gbar", self.gbar.clone()),
            ("I", self.ibar.clone()),
            ("xi", vcol(&self.xi)),
        ]
    }
}

/// Blackboard stage (`5n`): `𝕏 = (x, x̄, q̄, ỹ̄, p̃̄)`, `𝕐 = (x̃, x̃̄, q̃̄, ȳ, p̄)`.
#[derive(Clone, Debug)]
pub struct BlackboardBlocks {
    pub a: Mat,
    pub c: Mat,
    pub b1: Mat,
    pub b2: Mat,
    pub b3: Mat,
    pub d1: Mat,
    pub d2: Mat,
    pub d3: Mat,
    pub f1: Vector,
    pub f2: Mat,
    pub sigma: Vector,
    pub xi: Vector,
    pub upsilon: Vector,
    pub q: Mat,
    pub g: Mat,
}

impl BlackboardBlocks {
    pub fn build(ck: &CheckBlocks, ht: &HatBlocks, gamma: f64, r0hat: &Mat) -> Result<Self> {
        let n = r0hat.nrows();
        let m2 = ck.b2.ncols();
        let r0hi = inverse(r0hat).ok_or_else(|| Error::Input("R0hat singular".into()))?;
        let sz = [3 * n, 2 * n];
        let z2 = Vector::zeros(2 * n);
        let z3 = Vector::zeros(3 * n);
        Ok(BlackboardBlocks {
            a: assemble(&sz, &sz, &[(0, 0, ck.a.clone()), (1, 1, ht.a2.clone())]),
            c: assemble(&sz, &sz, &[(0, 0, ck.c.clone()), (1, 1, ht.c.clone())]),
            b1: assemble(
                &sz,
                &sz,
                &[
                    (0, 0, &ck.ibar * r0hi * ck.ibar.transpose() * (2.0 / gamma)),
                    (0, 1, ck.b1.clone()),
                    (1, 0, -ck.b1.transpose()),
                ],
            ),
            b3: assemble(
                &sz,
                &sz,
                &[(0, 1, ck.b3.clone()), (1, 0, -ck.d1.transpose())],
            ),
            d1: assemble(
                &sz,
                &sz,
                &[(0, 1, ck.d1.clone()), (1, 0, -ck.b3.transpose())],
            ),
            d3: assemble(
                &sz,
                &sz,
                &[(0, 1, ck.d3.clone()), (1, 0, -ck.d3.transpose())],
            ),
            b2: vstack(&[&ck.b2, &Mat::zeros(2 * n, m2)]),
            d2: vstack(&[&ck.d2, &Mat::zeros(2 * n, m2)]),
            f1: stack(&[&ck.f1, &z2]),
            f2: vstack(&[&Mat::zeros(3 * n, m2), &ht.f]),
            sigma: stack(&[&ck.sigma, &z2]),
            xi: stack(&[&ck.xi, &z2]),
            upsilon: stack(&[&z3, &ht.v]),
            q: assemble(
                &sz,
                &sz,
                &[
                    (0, 0, ck.qbar.clone()),
                    (0, 1, -ck.q.transpose()),
                    (1, 0, ck.q.clone()),
                ],
            ),
            g: assemble(
                &sz,
                &sz,
                &[
                    (0, 0, -&ck.gbar),
                    (0, 1, -ck.g.transpose()),
                    (1, 0, ck.g.clone()),
                ],
            ),
        })
    }
}

impl Blocks for BlackboardBlocks {
    const TAG: &'static str = "blackboard";
    fn named(&self) -> Vec<(&'static str, Mat)> {
        vec![
            ("A", self.a.clone()),
            ("C", self.c.clone()),
            ("B1", self.b1.clone()),
            ("B2", self.b2.clone()),
            ("B3", self.b3.clone()),
            ("D1", self.d1.clone()),
            ("D2", self.d2.clone()),
            ("D3", self.d3.clone()),
            ("F1", vcol(&self.f1)),
            ("F2", self.f2.clone()),
            ("Sigma", vcol(&self.sigma)),
            ("Xi", vcol(&self.xi)),
            ("Upsilon", vcol(&self.upsilon)),
            ("Q", self.q.clone()),
            ("G", self.g.clone()),
        ]
    }
}

/// Weights of the leader's cost written in blackboard coordinates.
#[derive(Clone, Debug)]
pub struct LeaderCostWeights {
    /// `R = R̃₁⁻¹R₁R̃₁⁻¹`.
    pub r: Mat,
    /// `ℝ = R₂ + D₂ᵀPD₁RD₁ᵀPD₂`.
    pub rr: Mat,
    pub rr_inv: Mat,
    pub qbb: Mat,
    pub bbb: Mat,
    pub dbb: Mat,
    pub s1: Mat,
    pub m1: Mat,
    pub l1: Mat,
    pub s2: Mat,
    pub m2: Mat,
    pub l2: Mat,
    pub s3: Mat,
    pub m3: Mat,
    pub l3: Mat,
    pub gbb: Mat,
    /// `D₂ᵀPD₁RD₁ᵀPσ`, the cross term with `u₂`.
    pub cross: Vector,
}

impl LeaderCostWeights {
    pub fn build(
        s: &Snapshot,
        p: &Mat,
        ff: &FollowerFactors,
        g: &Mat,
        gamma: f64,
        delta: f64,
        node: usize,
    ) -> Result<Self> {
        let n = s.a.nrows();
        let m2 = s.b2.ncols();
        let (ri, k1) = (&ff.ri, &ff.k1);
        let r = ri * &s.r1 * ri;
        let w = s.d2.transpose() * p * &s.d1 * &r;
        let rr = &s.r2 + &w * s.d1.transpose() * p * &s.d2;
        let lam = max_eigenvalue(&rr);
        if !(lam <= -delta) {
            return Err(Error::regularity(
                "(A8)(i)",
                node,
                format!(
                    "leader weight maximum eigenvalue {lam:.3e} above {:.3e}",
                    -delta
                ),
            ));
        }
        let rr_inv = inverse(&rr)
            .ok_or_else(|| Error::regularity("(A8)(i)", node, "leader weight singular"))?;
        let r0hi = inverse(&s.r0hat).ok_or_else(|| Error::Input("R0hat singular".into()))?;
        let s5 = [n; 5];
        let sq = |i: usize, j: usize, m: Mat| assemble(&s5, &s5, &[(i, j, m)]);
        let row = |rows: usize, j: usize, m: Mat| assemble(&[rows], &s5, &[(0, j, m)]);
        let pd1r = p * &s.d1 * &r;
        Ok(LeaderCostWeights {
            qbb: assemble(
                &s5,
                &s5,
                &[(0, 0, s.q.clone()), (1, 1, k1.transpose() * &r * k1)],
            ),
            bbb: assemble(
                &s5,
                &s5,
                &[
                    (0, 0, r0hi * (2.0 / gamma)),
                    (3, 3, &s.b1 * &r * s.b1.transpose()),
                ],
            ),
            dbb: sq(3, 3, &s.d1 * &r * s.d1.transpose()),
            s1: sq(3, 1, -(&s.b1 * &r * k1)),
            m1: sq(3, 3, &s.d1 * &r * s.b1.transpose()),
            l1: sq(3, 1, -(&s.d1 * &r * k1)),
            s2: row(m2, 1, &w * k1),
            m2: row(m2, 3, -(&w * s.b1.transpose())),
            l2: row(m2, 3, -(&w * s.d1.transpose())),
            s3: row(n, 1, &pd1r * k1),
            m3: row(n, 3, -(&pd1r * s.b1.transpose())),
            l3: row(n, 3, -(&pd1r * s.d1.transpose())),
            gbb: sq(0, 0, g.clone()),
            cross: &w * s.d1.transpose() * p * &s.sigma,
            r,
            rr,
            rr_inv,
        })
    }
}

impl Blocks for LeaderCostWeights {
    const TAG: &'static str = "weights";
    fn named(&self) -> Vec<(&'static str, Mat)> {
        vec![
            ("R", self.r.clone()),
            ("RR", self.rr.clone()),
            ("Qbb", self.qbb.clone()),
            ("Bbb", self.bbb.clone()),
            ("Dbb", self.dbb.clone()),
            ("S1", self.s1.clone()),
            ("M1", self.m1.clone()),
            ("L1", self.l1.clone()),
            ("S2", self.s2.clone()),
            ("M2", self.m2.clone()),
            ("L2", self.l2.clone()),
            ("S3", self.s3.clone()),
            ("M3", self.m3.clone()),
            ("L3", self.l3.clone()),
            ("Gbb", self.gbb.clone()),
            ("cross", vcol(&self.cross)),
        ]
    }
}

/// Double-hat stage (`10n`), in listing order.
#[derive(Clone, Debug)]
pub struct DoubleHatBlocks {
    pub a1: Mat,
    pub a2: Mat,
    pub c1: Mat,
    pub c2: Mat,
    pub b1: Mat,
    pub b2: Mat,
    pub d1: Mat,
    pub d2: Mat,
    pub q: Mat,
    pub f: Vector,
    pub sigma: Vector,
    pub upsilon: Vector,
    pub xi: Vector,
    pub g: Mat,
    /// The leader's optimal control read off the Hamiltonian system:
    /// `ū₂ = ℝ⁻¹(U_X 𝕏̂ + U_Y 𝕐̂ + U_Z ℤ̂ − c)`.
    pub u2_x: Mat,
    pub u2_y: Mat,
    pub u2_z: Mat,
}

/// Index map from listing order to natural order `(𝕏, adjoint of 𝕐)`.
pub fn listing_order(n: usize) -> Vec<usize> {
    (0..5 * n)
        .chain(8 * n..10 * n)
        .chain(5 * n..8 * n)
        .collect()
}

fn permute_square(m: &Mat, idx: &[usize]) -> Mat {
    Mat::from_fn(idx.len(), idx.len(), |i, j| m[(idx[i], idx[j])])
}

fn permute_cols(m: &Mat, idx: &[usize]) -> Mat {
    Mat::from_fn(m.nrows(), idx.len(), |i, j| m[(i, idx[j])])
}

fn permute_vec(v: &Vector, idx: &[usize]) -> Vector {
    Vector::from_fn(idx.len(), |i, _| v[idx[i]])
}

impl DoubleHatBlocks {
    pub fn build(bb: &BlackboardBlocks, w: &LeaderCostWeights, sigma: &Vector) -> Self {
        let d = bb.a.nrows();
        let n = d / 5;
        let ri = &w.rr_inv;
        let (b2, d2, f2) = (&bb.b2, &bb.d2, &bb.f2);
        let (s2, m2, l2) = (&w.s2, &w.m2, &w.l2);
        let sz = [d, d];
        let b2r = b2 * ri;
        let d2r = d2 * ri;
        let m2r = m2.transpose() * ri;
        let l2r = l2.transpose() * ri;
        let f2r = f2 * ri;
        let s2r = s2.transpose() * ri;
        let c = &w.cross;

        let a11 = &bb.a - &b2r * s2;
        let a22 = &bb.a + &m2r * f2.transpose();
        let a12 = &b2r * f2.transpose();
        let a21 = &w.s1 - &m2r * s2;
        let c11 = &bb.c - &d2r * s2;
        let c22 = &bb.c + &l2r * f2.transpose();
        let c12 = &d2r * f2.transpose();
        let c21 = &w.l1 - &l2r * s2;

        let natural = |entries: [(usize, usize, Mat); 4]| assemble(&sz, &sz, &entries);
        let a1 = natural([
            (0, 0, a11.clone()),
            (0, 1, a12.clone()),
            (1, 0, a21.clone()),
            (1, 1, a22.clone()),
        ]);
        let a2 = natural([(0, 0, a11), (0, 1, -a12), (1, 0, -a21), (1, 1, a22)]);
        let c1 = natural([
            (0, 0, c11.clone()),
            (0, 1, c12.clone()),
            (1, 0, c21.clone()),
            (1, 1, c22.clone()),
        ]);
        let c2 = natural([(0, 0, c11), (0, 1, -c12), (1, 0, -c21), (1, 1, c22)]);
        let b1 = natural([
            (0, 0, &b2r * b2.transpose()),
            (0, 1, &bb.b1 - &b2r * m2),
            (1, 0, -bb.b1.transpose() + &m2r * b2.transpose()),
            (1, 1, &w.bbb - &m2r * m2),
        ]);
        let b2h = natural([
            (0, 0, &b2r * d2.transpose()),
            (0, 1, &bb.b3 - &b2r * l2),
            (1, 0, -bb.d1.transpose() + &m2r * d2.transpose()),
            (1, 1, w.m1.transpose() - &m2r * l2),
        ]);
        let d1 = natural([
            (0, 0, &d2r * b2.transpose()),
            (0, 1, &bb.d1 - &d2r * m2),
            (1, 0, -bb.b3.transpose() + &l2r * b2.transpose()),
            (1, 1, &w.m1 - &l2r * m2),
        ]);
        let d2h = natural([
            (0, 0, &d2r * d2.transpose()),
            (0, 1, &bb.d3 - &d2r * l2),
            (1, 0, -bb.d3.transpose() + &l2r * d2.transpose()),
            (1, 1, w.dbb.transpose() - &l2r * l2),
        ]);
        let q = natural([
            (0, 0, &w.qbb - &s2r * s2),
            (0, 1, -bb.q.transpose() + &s2r * f2.transpose()),
            (1, 0, &bb.q - &f2r * s2),
            (1, 1, &f2r * f2.transpose()),
        ]);
        let g = natural([
            (0, 0, -&w.gbb),
            (0, 1, -bb.g.transpose()),
            (1, 0, bb.g.clone()),
            (1, 1, Mat::zeros(d, d)),
        ]);
        let rc = ri * c;
        let f = stack(&[
            &(&bb.f1 - b2 * &rc),
            &(w.m3.transpose() * sigma - m2.transpose() * &rc),
        ]);
        let sg = stack(&[
            &(&bb.sigma - d2 * &rc),
            &(w.l3.transpose() * sigma - l2.transpose() * &rc),
        ]);
        let ups = stack(&[
            &(w.s3.transpose() * sigma - s2.transpose() * &rc),
            &(&bb.upsilon - f2 * &rc),
        ]);
        let xi = stack(&[&bb.xi, &Vector::zeros(d)]);
        let u2_x = assemble(&[s2.nrows()], &sz, &[(0, 0, -s2), (0, 1, f2.transpose())]);
        let u2_y = assemble(&[s2.nrows()], &sz, &[(0, 0, b2.transpose()), (0, 1, -m2)]);
        let u2_z = assemble(&[s2.nrows()], &sz, &[(0, 0, d2.transpose()), (0, 1, -l2)]);

        let idx = listing_order(n);
        let ps = |m: &Mat| permute_square(m, &idx);
        DoubleHatBlocks {
            a1: ps(&a1),
            a2: ps(&a2),
            c1: ps(&c1),
            c2: ps(&c2),
            b1: ps(&b1),
            b2: ps(&b2h),
            d1: ps(&d1),
            d2: ps(&d2h),
            q: ps(&q),
            g: ps(&g),
            f: permute_vec(&f, &idx),
            sigma: permute_vec(&sg, &idx),
            upsilon: permute_vec(&ups, &idx),
            xi: permute_vec(&xi, &idx),
            u2_x: permute_cols(&u2_x, &idx),
            u2_y: permute_cols(&u2_y, &idx),
            u2_z: permute_cols(&u2_z, &idx),
        }
    }
}

impl Blocks for DoubleHatBlocks {
    const TAG: &'static str = "doublehat";
    fn named(&self) -> Vec<(&'static str, Mat)> {
        vec![
            ("A1", self.a1.clone()),
            ("A2", self.a2.clone()),
            ("C1", self.c1.clone()),
            ("C2", self.c2.clone()),
            ("B1", self.b1.clone()),
            ("B2", self.b2.clone()),
            ("D1", self.d1.clone()),
            ("D2", self.d2.clone()),
            ("Q", self.q.clone()),
            ("F", vcol(&self.f)),
            ("Sigma", vcol(&self.sigma)),
            ("Upsilon", vcol(&self.upsilon)),
            ("Xi", vcol(&self.xi)),
            ("G", self.g.clone()),
        ]
    }
}

/// Block-row selectors `M₁ … M₇` over ten `n`-blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectorSet {
    pub m: [Mat; 7],
}

impl SelectorSet {
    /// `M_i`, one-based as in the usual notation.
    pub fn get(&self, i: usize) -> &Mat {
        &self.m[i - 1]
    }
}

pub fn selectors(n: usize) -> SelectorSet {
    let b = |j: usize| block_selector(n, 10, j);
    SelectorSet {
        m: [b(0), b(1), b(0) + b(1), b(5), b(6), b(7), b(8)],
    }
}

/// Feedback gains of the two players at one node.
#[derive(Clone, Debug)]
pub struct GainNode {
    pub pm1: Mat,
    pub pm2: Mat,
    pub phim1: Vector,
    pub phim2: Vector,
}

/// `ℤ̂ = Z_X 𝕏̂ + Z_0` on the decoupled solution.
pub fn z_representation(
    dh: &DoubleHatBlocks,
    phat: &Mat,
    phihat: &Vector,
) -> Option<(Mat, Vector)> {
    let d = phat.nrows();
    let k = inverse(&(Mat::identity(d, d) - phat * &dh.d2))?;
    let zx = &k * (phat * &dh.c1 + phat * &dh.d1 * phat);
    let z0 = &k * (phat * &dh.d1 * phihat + phat * &dh.sigma);
    Some((zx, z0))
}

/// Gain maps at one node. The leader maps are formed first because the
/// follower maps reference them.
#[allow(clippy::too_many_arguments)]
pub fn gain_node(
    s: &Snapshot,
    p: &Mat,
    ff: &FollowerFactors,
    w: &LeaderCostWeights,
    dh: &DoubleHatBlocks,
    sel: &SelectorSet,
    phat: &Mat,
    phihat: &Vector,
    node: usize,
) -> Result<GainNode> {
    let (zx, z0) = z_representation(dh, phat, phihat)
        .ok_or_else(|| Error::regularity("(R-4)", node, "I - P D2 singular"))?;
    let (m2s, m3s, m4s) = (sel.get(2), sel.get(3), sel.get(4));
    let (ri, k1) = (&ff.ri, &ff.k1);
    let d2p = s.d2.transpose() * p;
    let d2pd1 = &d2p * &s.d1;
    let w_r = &d2pd1 * &w.r;
    let t1 = s.b2.transpose() - &d2pd1 * ri * s.b1.transpose();
    let t2 = s.d2.transpose() - &d2pd1 * ri * s.d1.transpose();
    let zmix = &t2 * m3s + &w_r * s.d1.transpose() * m4s;
    let pm2 = &t1 * m3s * phat + (s.b2.transpose() * p + &d2p * &s.c - &d2pd1 * ri * k1) * m4s
        - &w_r * k1 * m2s
        + &w_r * s.b1.transpose() * m4s * phat
        + &zmix * &zx;
    let phim2 =
        &t1 * m3s * phihat + &w_r * s.b1.transpose() * m4s * phihat - &w.cross + &zmix * &z0;
    let d1pd2r = s.d1.transpose() * p * &s.d2 * &w.rr_inv;
    let pm1 =
        s.b1.transpose() * m4s * phat + s.d1.transpose() * m4s * &zx - k1 * m2s - &d1pd2r * &pm2;
    let phim1 = s.b1.transpose() * m4s * phihat + s.d1.transpose() * m4s * &z0
        - s.d1.transpose() * p * &s.sigma
        - &d1pd2r * &phim2;
    Ok(GainNode {
        pm1,
        pm2,
        phim1,
        phim2,
    })
}

/// All quantities of the augmentation cascade at one node.
#[derive(Clone, Debug)]
pub struct NodeStages {
    pub factors: FollowerFactors,
    pub hat: HatBlocks,
    pub check: CheckBlocks,
    pub blackboard: BlackboardBlocks,
    pub weights: LeaderCostWeights,
    pub doublehat: DoubleHatBlocks,
}

/// Runs the whole cascade at time `t` for the follower solution value `p`.
pub fn cascade(spec: &GameSpec, t: f64, p: &Mat, delta: f64, node: usize) -> Result<NodeStages> {
    let s = spec.at(t);
    let factors = FollowerFactors::new(&s, p, spec.alpha, delta, node)?;
    let hat = HatBlocks::build(&s, p, &factors, &spec.g, &spec.xi);
    let check = CheckBlocks::build(&s, p, &factors, &spec.g, &spec.xi);
    let blackboard = BlackboardBlocks::build(&check, &hat, spec.gamma, &s.r0hat)?;
    let weights = LeaderCostWeights::build(&s, p, &factors, &spec.g, spec.gamma, delta, node)?;
    let doublehat = DoubleHatBlocks::build(&blackboard, &weights, &s.sigma);
    Ok(NodeStages {
        factors,
        hat,
        check,
        blackboard,
        weights,
        doublehat,
    })
}

fn over_nodes<B: Send>(
    p: &MatrixPath,
    exec: Execution,
    f: impl Fn(usize, f64, &Mat) -> Result<B> + Sync,
) -> Result<Stage<B>> {
    let grid = p.grid();
    let nodes = par::try_map(exec, grid.len(), |k| f(k, grid.time(k), p.node(k)))?;
    Ok(Stage { grid, nodes })
}

/// Hat stage on the grid of `p`.
pub fn build_hat(spec: &GameSpec, p: &MatrixPath, delta: f64) -> Result<Stage<HatBlocks>> {
    over_nodes(p, Execution::default(), |k, t, pk| {
        let s = spec.at(t);
        let ff = FollowerFactors::new(&s, pk, spec.alpha, delta, k)?;
        Ok(HatBlocks::build(&s, pk, &ff, &spec.g, &spec.xi))
    })
}

/// Check stage on the grid of `p`.
pub fn build_check(spec: &GameSpec, p: &MatrixPath, delta: f64) -> Result<Stage<CheckBlocks>> {
    over_nodes(p, Execution::default(), |k, t, pk| {
        let s = spec.at(t);
        let ff = FollowerFactors::new(&s, pk, spec.alpha, delta, k)?;
        Ok(CheckBlocks::build(&s, pk, &ff, &spec.g, &spec.xi))
    })
}

/// Blackboard stage from matching check and hat stages.
pub fn build_blackboard(
    check: &Stage<CheckBlocks>,
    hat: &Stage<HatBlocks>,
    gamma: f64,
    r0hat: &MatrixPath,
) -> Result<Stage<BlackboardBlocks>> {
    if check.grid != hat.grid || check.nodes.len() != hat.nodes.len() {
        return Err(Error::Input(
            "check and hat stages live on different grids".into(),
        ));
    }
    let n = r0hat.shape().0;
    if check.nodes[0].a.nrows() != 3 * n || hat.nodes[0].a1.nrows() != 2 * n {
        return Err(Error::Input("stage dimensions do not match R0hat".into()));
    }
    let nodes = check
        .nodes
        .iter()
        .zip(&hat.nodes)
        .enumerate()
        .map(|(k, (c, h))| BlackboardBlocks::build(c, h, gamma, &r0hat.eval(check.grid.time(k))))
        .collect::<Result<_>>()?;
    Ok(Stage {
        grid: check.grid,
        nodes,
    })
}

/// Leader cost weights on the grid of `p`.
pub fn build_cost_weights(
    spec: &GameSpec,
    p: &MatrixPath,
    delta: f64,
) -> Result<Stage<LeaderCostWeights>> {
    over_nodes(p, Execution::default(), |k, t, pk| {
        let s = spec.at(t);
        let ff = FollowerFactors::new(&s, pk, spec.alpha, delta, k)?;
        LeaderCostWeights::build(&s, pk, &ff, &spec.g, spec.gamma, delta, k)
    })
}

/// Double-hat stage from blackboard blocks and cost weights. `sigma` is the
/// game noise intensity path.
pub fn build_doublehat(
    bb: &Stage<BlackboardBlocks>,
    w: &Stage<LeaderCostWeights>,
    sigma: &MatrixPath,
) -> Result<Stage<DoubleHatBlocks>> {
    if bb.grid != w.grid {
        return Err(Error::Input(
            "blackboard and weights live on different grids".into(),
        ));
    }
    let nodes = bb
        .nodes
        .iter()
        .zip(&w.nodes)
        .enumerate()
        .map(|(k, (b, wk))| {
            let sig = sigma.eval(bb.grid.time(k));
            DoubleHatBlocks::build(b, wk, &Vector::from_column_slice(sig.as_slice()))
        })
        .collect();
    Ok(Stage {
        grid: bb.grid,
        nodes,
    })
}

/// Gain maps as paths.
#[derive(Clone, Debug)]
pub struct GainMaps {
    pub pm1: MatrixPath,
    pub pm2: MatrixPath,
    pub phim1: MatrixPath,
    pub phim2: MatrixPath,
}

/// Gain maps on the grid of `dh`, with `P`, `P̂`, `φ̂` evaluated there.
pub fn build_gain_maps(
    spec: &GameSpec,
    p: &MatrixPath,
    phat: &MatrixPath,
    dh: &Stage<DoubleHatBlocks>,
    sel: &SelectorSet,
    phihat: &MatrixPath,
    delta: f64,
) -> Result<GainMaps> {
    let grid = dh.grid;
    let nodes = par::try_map(Execution::default(), grid.len(), |k| {
        let t = grid.time(k);
        let s = spec.at(t);
        let pk = p.eval(t);
        let ff = FollowerFactors::new(&s, &pk, spec.alpha, delta, k)?;
        let w = LeaderCostWeights::build(&s, &pk, &ff, &spec.g, spec.gamma, delta, k)?;
        let ph = phat.eval(t);
        let phi = Vector::from_column_slice(phihat.eval(t).as_slice());
        gain_node(&s, &pk, &ff, &w, &dh.nodes[k], sel, &ph, &phi, k)
    })?;
    let path = |f: &dyn Fn(&GainNode) -> Mat| {
        MatrixPath::from_samples(grid, nodes.iter().map(f).collect())
    };
    Ok(GainMaps {
        pm1: path(&|g| g.pm1.clone())?,
        pm2: path(&|g| g.pm2.clone())?,
        phim1: path(&|g| vcol(&g.phim1))?,
        phim2: path(&|g| vcol(&g.phim2))?,
    })
}
