//! Game data model: time grids, node-sampled matrix paths, the game
//! specification and validation of its decidable standing assumptions.
//!
//! Coefficients are deterministic functions of time stored as samples on a
//! uniform grid and evaluated between nodes by linear interpolation. Paths
//! produced by the backward solvers additionally carry node derivatives and
//! are evaluated by cubic Hermite interpolation, which keeps chained
//! fourth-order solves fourth-order.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Uniform grid `0 = t_0 < ... < t_N = T`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::Input("horizon must be positive".into()));
        }
        if steps == 0 {
            return Err(Error::Input("number of steps must be positive".into()));
        }
        Ok(TimeGrid { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Time of node `k`; the last node is `T` exactly.
    pub fn time(&self, k: usize) -> f64 {
        if k >= self.steps {
            self.horizon
        } else {
            k as f64 * self.horizon / self.steps as f64
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }

    /// Grid with `factor` times as many steps over the same horizon.
    pub fn refine(&self, factor: usize) -> TimeGrid {
        TimeGrid {
            horizon: self.horizon,
            steps: self.steps * factor.max(1),
        }
    }

    pub fn contains(&self, t: f64) -> bool {
        (0.0..=self.horizon).contains(&t)
    }

    /// Interval index `k` and local fraction `s ∈ [0,1]` with
    /// `t = t_k + s·Δt`.
    pub fn locate(&self, t: f64) -> (usize, f64) {
        let x = t / self.horizon * self.steps as f64;
        let k = (x.floor() as usize).min(self.steps - 1);
        let s = (x - k as f64).clamp(0.0, 1.0);
        (k, s)
    }

    /// Index of the node at `t` when `t` is a node up to roundoff.
    pub fn node_index(&self, t: f64) -> Option<usize> {
        let x = t / self.horizon * self.steps as f64;
        let k = x.round();
        if (x - k).abs() <= 1e-9 && k >= 0.0 && k <= self.steps as f64 {
            Some(k as usize)
        } else {
            None
        }
    }
}

/// Spec-named constructor for [`TimeGrid`].
pub fn make_grid(horizon: f64, steps: usize) -> Result<TimeGrid> {
    TimeGrid::new(horizon, steps)
}

/// Matrix-valued function of time sampled at the nodes of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixPath {
    grid: TimeGrid,
    rows: usize,
    cols: usize,
    samples: Vec<Mat>,
    slopes: Option<Vec<Mat>>,
}

impl MatrixPath {
    pub fn constant(grid: TimeGrid, value: Mat) -> Self {
        let (rows, cols) = value.shape();
        MatrixPath {
            grid,
            rows,
            cols,
            samples: vec![value; grid.len()],
            slopes: None,
        }
    }

    pub fn zeros(grid: TimeGrid, rows: usize, cols: usize) -> Self {
        Self::constant(grid, Mat::zeros(rows, cols))
    }

    pub fn from_samples(grid: TimeGrid, samples: Vec<Mat>) -> Result<Self> {
        if samples.len() != grid.len() {
            return Err(Error::Input(format!(
                "path has {} samples, grid has {} nodes",
                samples.len(),
                grid.len()
            )));
        }
        let (rows, cols) = samples[0].shape();
        if samples.iter().any(|m| m.shape() != (rows, cols)) {
            return Err(Error::Input("path samples differ in shape".into()));
        }
        Ok(MatrixPath {
            grid,
            rows,
            cols,
            samples,
            slopes: None,
        })
    }

    /// Attaches node derivatives, switching evaluation to cubic Hermite.
    pub fn with_slopes(mut self, slopes: Vec<Mat>) -> Result<Self> {
        if slopes.len() != self.samples.len()
            || slopes.iter().any(|m| m.shape() != (self.rows, self.cols))
        {
            return Err(Error::Input("slopes do not match samples".into()));
        }
        self.slopes = Some(slopes);
        Ok(self)
    }

    /// Builds a path by evaluating `f` at every node.
    pub fn from_fn(grid: TimeGrid, mut f: impl FnMut(usize, f64) -> Mat) -> Result<Self> {
        let samples = (0..grid.len()).map(|k| f(k, grid.time(k))).collect();
        Self::from_samples(grid, samples)
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn samples(&self) -> &[Mat] {
        &self.samples
    }

    pub fn slopes(&self) -> Option<&[Mat]> {
        self.slopes.as_deref()
    }

    pub fn node(&self, k: usize) -> &Mat {
        &self.samples[k]
    }

    pub fn is_constant(&self) -> bool {
        self.samples.iter().all(|m| m == &self.samples[0])
    }

    /// Value at `t`. Node times return the stored sample bit-exactly.
    pub fn sample(&self, t: f64) -> Result<Mat> {
        if !self.grid.contains(t) || t.is_nan() {
            return Err(Error::Input(format!(
                "time {t} outside [0, {}]",
                self.grid.horizon()
            )));
        }
        Ok(self.eval(t))
    }

    pub(crate) fn eval(&self, t: f64) -> Mat {
        let (k, s) = self.grid.locate(t);
        if s == 0.0 {
            return self.samples[k].clone();
        }
        if s == 1.0 {
            return self.samples[k + 1].clone();
        }
        let y0 = &self.samples[k];
        let y1 = &self.samples[k + 1];
        match &self.slopes {
            None => y0 * (1.0 - s) + y1 * s,
            Some(m) => {
                let h = self.grid.dt();
                let s2 = s * s;
                let s3 = s2 * s;
                let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
                let h10 = s3 - 2.0 * s2 + s;
                let h01 = -2.0 * s3 + 3.0 * s2;
                let h11 = s3 - s2;
                y0 * h00 + &m[k] * (h10 * h) + y1 * h01 + &m[k + 1] * (h11 * h)
            }
        }
    }

    /// Re-samples the path on another grid over the same horizon.
    pub fn resample(&self, grid: TimeGrid) -> MatrixPath {
        let samples = (0..grid.len())
            .map(|k| {
                let t = grid.time(k);
                match self.grid.node_index(t) {
                    Some(j) => self.samples[j].clone(),
                    None => self.eval(t),
                }
            })
            .collect();
        MatrixPath {
            grid,
            rows: self.rows,
            cols: self.cols,
            samples,
            slopes: None,
        }
    }

    pub fn map(&self, f: impl Fn(&Mat) -> Mat) -> Result<MatrixPath> {
        Self::from_samples(self.grid, self.samples.iter().map(f).collect())
    }

    /// Largest absolute entry over all samples.
    pub fn max_abs(&self) -> f64 {
        self.samples.iter().map(|m| m.amax()).fold(0.0, f64::max)
    }
}

/// Spec-named accessor for [`MatrixPath::sample`].
pub fn sample(path: &MatrixPath, t: f64) -> Result<Mat> {
    path.sample(t)
}

/// All coefficients of one game instance.
#[derive(Clone, Debug, PartialEq)]
pub struct GameSpec {
    pub n: usize,
    pub m1: usize,
    pub m2: usize,
    pub grid: TimeGrid,
    pub a: MatrixPath,
    pub c: MatrixPath,
    pub b1: MatrixPath,
    pub d1: MatrixPath,
    pub b2: MatrixPath,
    pub d2: MatrixPath,
    pub sigma: MatrixPath,
    pub f1: MatrixPath,
    pub q: MatrixPath,
    pub r1: MatrixPath,
    pub r2: MatrixPath,
    pub r0: MatrixPath,
    pub r0hat: MatrixPath,
    pub g: Mat,
    pub alpha: f64,
    pub gamma: f64,
    pub xi: Vector,
}

/// Coefficient values frozen at one time.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub a: Mat,
    pub c: Mat,
    pub b1: Mat,
    pub d1: Mat,
    pub b2: Mat,
    pub d2: Mat,
    pub sigma: Vector,
    pub f1: Vector,
    pub q: Mat,
    pub r1: Mat,
    pub r2: Mat,
    pub r0: Mat,
    pub r0hat: Mat,
}

/// Time-invariant coefficients, convenient for building test and example
/// instances.
#[derive(Clone, Debug)]
pub struct ConstantGame {
    pub a: Mat,
    pub c: Mat,
    pub b1: Mat,
    pub d1: Mat,
    pub b2: Mat,
    pub d2: Mat,
    pub sigma: Vector,
    pub f1: Vector,
    pub q: Mat,
    pub r1: Mat,
    pub r2: Mat,
    pub r0: Mat,
    pub r0hat: Mat,
    pub g: Mat,
    pub alpha: f64,
    pub gamma: f64,
    pub xi: Vector,
}

impl ConstantGame {
    /// Homogeneous game: zero dynamics, zero weights, `R1 = I`, `R2 = -I`,
    /// `R0 = R0hat = I`, `alpha = gamma = 2`, `xi = 0`.
    pub fn homogeneous(n: usize, m1: usize, m2: usize) -> Self {
        ConstantGame {
            a: Mat::zeros(n, n),
            c: Mat::zeros(n, n),
            b1: Mat::zeros(n, m1),
            d1: Mat::zeros(n, m1),
            b2: Mat::zeros(n, m2),
            d2: Mat::zeros(n, m2),
            sigma: Vector::zeros(n),
            f1: Vector::zeros(n),
            q: Mat::zeros(n, n),
            r1: Mat::identity(m1, m1),
            r2: -Mat::identity(m2, m2),
            r0: Mat::identity(n, n),
            r0hat: Mat::identity(n, n),
            g: Mat::zeros(n, n),
            alpha: 2.0,
            gamma: 2.0,
            xi: Vector::zeros(n),
        }
    }

    /// Scalar game from plain numbers, in the order
    /// `a, c, b1, d1, b2, d2, sigma, f1, q, r1, r2, r0, r0hat, g`.
    pub fn scalar(v: [f64; 14], alpha: f64, gamma: f64, xi: f64) -> Self {
        let s = |x: f64| Mat::from_element(1, 1, x);
        ConstantGame {
            a: s(v[0]),
            c: s(v[1]),
            b1: s(v[2]),
            d1: s(v[3]),
            b2: s(v[4]),
            d2: s(v[5]),
            sigma: Vector::from_element(1, v[6]),
            f1: Vector::from_element(1, v[7]),
            q: s(v[8]),
            r1: s(v[9]),
            r2: s(v[10]),
            r0: s(v[11]),
            r0hat: s(v[12]),
            g: s(v[13]),
            alpha,
            gamma,
            xi: Vector::from_element(1, xi),
        }
    }

    pub fn into_spec(self, grid: TimeGrid) -> Result<GameSpec> {
        let n = self.a.nrows();
        let m1 = self.b1.ncols();
        let m2 = self.b2.ncols();
        let p = |m: Mat| MatrixPath::constant(grid, m);
        let v = |x: Vector| {
            MatrixPath::constant(grid, Mat::from_column_slice(x.len(), 1, x.as_slice()))
        };
        let spec = GameSpec {
            n,
            m1,
            m2,
            grid,
            a: p(self.a),
            c: p(self.c),
            b1: p(self.b1),
            d1: p(self.d1),
            b2: p(self.b2),
            d2: p(self.d2),
            sigma: v(self.sigma),
            f1: v(self.f1),
            q: p(self.q),
            r1: p(self.r1),
            r2: p(self.r2),
            r0: p(self.r0),
            r0hat: p(self.r0hat),
            g: self.g,
            alpha: self.alpha,
            gamma: self.gamma,
            xi: self.xi,
        };
        spec.check_dimensions()?;
        Ok(spec)
    }
}

const PATH_NAMES: [&str; 13] = [
    "A", "C", "B1", "D1", "B2", "D2", "sigma", "f1", "Q", "R1", "R2", "R0", "R0hat",
];

impl GameSpec {
    fn path_by_name(&self, name: &str) -> &MatrixPath {
        match name {
            "A" => &self.a,
            "C" => &self.c,
            "B1" => &self.b1,
            "D1" => &self.d1,
            "B2" => &self.b2,
            "D2" => &self.d2,
            "sigma" => &self.sigma,
            "f1" => &self.f1,
            "Q" => &self.q,
            "R1" => &self.r1,
            "R2" => &self.r2,
            "R0" => &self.r0,
            "R0hat" => &self.r0hat,
            _ => unreachable!("unknown coefficient {name}"),
        }
    }

    fn expected_shape(&self, name: &str) -> (usize, usize) {
        let (n, m1, m2) = (self.n, self.m1, self.m2);
        match name {
            "A" | "C" | "Q" | "R0" | "R0hat" | "G" => (n, n),
            "B1" | "D1" => (n, m1),
            "B2" | "D2" => (n, m2),
            "sigma" | "f1" => (n, 1),
            "R1" => (m1, m1),
            "R2" => (m2, m2),
            _ => unreachable!("unknown coefficient {name}"),
        }
    }

    /// Dimension contract of every coefficient.
    pub fn check_dimensions(&self) -> Result<()> {
        if self.n == 0 || self.m1 == 0 || self.m2 == 0 {
            return Err(Error::Input("dimensions must be positive".into()));
        }
        for name in PATH_NAMES {
            let path = self.path_by_name(name);
            let want = self.expected_shape(name);
            if path.shape() != want {
                return Err(Error::Input(format!(
                    "{name} has shape {:?}, expected {:?}",
                    path.shape(),
                    want
                )));
            }
            if path.grid() != self.grid {
                return Err(Error::Input(format!(
                    "{name} is not sampled on the spec grid"
                )));
            }
        }
        if self.g.shape() != (self.n, self.n) {
            return Err(Error::Input(format!(
                "G has shape {:?}, expected {:?}",
                self.g.shape(),
                (self.n, self.n)
            )));
        }
        if self.xi.len() != self.n {
            return Err(Error::Input(format!(
                "xi has length {}, expected {}",
                self.xi.len(),
                self.n
            )));
        }
        Ok(())
    }

    /// Coefficients at time `t` (linear interpolation between nodes).
    pub fn at(&self, t: f64) -> Snapshot {
        let col = |p: &MatrixPath| {
            let m = p.eval(t);
            Vector::from_column_slice(m.as_slice())
        };
        Snapshot {
            a: self.a.eval(t),
            c: self.c.eval(t),
            b1: self.b1.eval(t),
            d1: self.d1.eval(t),
            b2: self.b2.eval(t),
            d2: self.d2.eval(t),
            sigma: col(&self.sigma),
            f1: col(&self.f1),
            q: self.q.eval(t),
            r1: self.r1.eval(t),
            r2: self.r2.eval(t),
            r0: self.r0.eval(t),
            r0hat: self.r0hat.eval(t),
        }
    }

    /// Same game on a different grid (coefficients re-sampled).
    pub fn with_grid(&self, grid: TimeGrid) -> Result<GameSpec> {
        if (grid.horizon() - self.grid.horizon()).abs() > 0.0 {
            return Err(Error::Input("re-gridding must keep the horizon".into()));
        }
        let r = |p: &MatrixPath| {
            if p.is_constant() {
                MatrixPath::constant(grid, p.node(0).clone())
            } else {
                p.resample(grid)
            }
        };
        Ok(GameSpec {
            grid,
            a: r(&self.a),
            c: r(&self.c),
            b1: r(&self.b1),
            d1: r(&self.d1),
            b2: r(&self.b2),
            d2: r(&self.d2),
            sigma: r(&self.sigma),
            f1: r(&self.f1),
            q: r(&self.q),
            r1: r(&self.r1),
            r2: r(&self.r2),
            r0: r(&self.r0),
            r0hat: r(&self.r0hat),
            ..self.clone()
        })
    }

    /// True when `C`, `D1` and `D2` vanish identically.
    pub fn is_noise_free_control(&self) -> bool {
        [&self.c, &self.d1, &self.d2]
            .iter()
            .all(|p| p.samples().iter().all(|m| m.amax() == 0.0))
    }

    pub fn from_json(text: &str) -> Result<GameSpec> {
        let file: SpecFile = serde_json::from_str(text).map_err(|e| {
            Error::Input(format!(
                "malformed spec at line {} column {}: {e}",
                e.line(),
                e.column()
            ))
        })?;
        file.into_spec()
    }

    pub fn to_json(&self) -> String {
        let mut matrices = BTreeMap::new();
        for name in PATH_NAMES {
            let path = self.path_by_name(name);
            let entry = if path.is_constant() {
                MatrixEntry::Constant {
                    constant: rows_of(path.node(0)),
                }
            } else {
                MatrixEntry::Nodes {
                    nodes: (0..self.grid.len())
                        .map(|k| NodeEntry {
                            t: self.grid.time(k),
                            value: rows_of(path.node(k)),
                        })
                        .collect(),
                }
            };
            matrices.insert(name.to_string(), entry);
        }
        matrices.insert(
            "G".to_string(),
            MatrixEntry::Constant {
                constant: rows_of(&self.g),
            },
        );
        let file = SpecFile {
            n: self.n,
            m1: self.m1,
            m2: self.m2,
            horizon: self.grid.horizon(),
            steps: self.grid.steps(),
            alpha: self.alpha,
            gamma: self.gamma,
            xi: self.xi.iter().copied().collect(),
            matrices,
        };
        serde_json::to_string_pretty(&file).expect("spec serializes")
    }
}

fn rows_of(m: &Mat) -> Value {
    let rows: Vec<Vec<f64>> = (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect();
    Value::from(rows)
}

/// Grid size used when a spec file omits `N`.
pub const DEFAULT_STEPS: usize = 1000;

fn default_steps() -> usize {
    DEFAULT_STEPS
}

#[derive(Serialize, Deserialize)]
struct SpecFile {
    n: usize,
    m1: usize,
    m2: usize,
    #[serde(rename = "T")]
    horizon: f64,
    #[serde(rename = "N", default = "default_steps")]
    steps: usize,
    alpha: f64,
    gamma: f64,
    xi: Vec<f64>,
    matrices: BTreeMap<String, MatrixEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum MatrixEntry {
    Constant { constant: Value },
    Nodes { nodes: Vec<NodeEntry> },
}

#[derive(Serialize, Deserialize)]
struct NodeEntry {
    t: f64,
    value: Value,
}

fn parse_matrix(name: &str, v: &Value, shape: (usize, usize)) -> Result<Mat> {
    let bad = || Error::Input(format!("{name}: expected a {}x{} matrix", shape.0, shape.1));
    let arr = v.as_array().ok_or_else(bad)?;
    // Column vectors may be written flat.
    if shape.1 == 1 && arr.iter().all(Value::is_number) {
        if arr.len() != shape.0 {
            return Err(bad());
        }
        let data: Vec<f64> = arr.iter().map(|x| x.as_f64().unwrap()).collect();
        return Ok(Mat::from_column_slice(shape.0, 1, &data));
    }
    if arr.len() != shape.0 {
        return Err(bad());
    }
    let mut m = Mat::zeros(shape.0, shape.1);
    for (i, row) in arr.iter().enumerate() {
        let row = row.as_array().ok_or_else(bad)?;
        if row.len() != shape.1 {
            return Err(bad());
        }
        for (j, x) in row.iter().enumerate() {
            m[(i, j)] = x.as_f64().ok_or_else(bad)?;
        }
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Input(format!("{name}: entries must be finite")));
    }
    Ok(m)
}

impl SpecFile {
    fn into_spec(self) -> Result<GameSpec> {
        let grid = TimeGrid::new(self.horizon, self.steps)?;
        let (n, m1, m2) = (self.n, self.m1, self.m2);
        if n == 0 || m1 == 0 || m2 == 0 {
            return Err(Error::Input("dimensions must be positive".into()));
        }
        for key in self.matrices.keys() {
            if key != "G" && !PATH_NAMES.contains(&key.as_str()) {
                return Err(Error::Input(format!("unknown matrix {key}")));
            }
        }
        let shape = |name: &str| match name {
            "A" | "C" | "Q" | "R0" | "R0hat" | "G" => (n, n),
            "B1" | "D1" => (n, m1),
            "B2" | "D2" => (n, m2),
            "sigma" | "f1" => (n, 1),
            "R1" => (m1, m1),
            _ => (m2, m2),
        };
        let path = |name: &str| -> Result<MatrixPath> {
            let sh = shape(name);
            match self.matrices.get(name) {
                None if name == "sigma" || name == "f1" => Ok(MatrixPath::zeros(grid, n, 1)),
                None => Err(Error::Input(format!("missing matrix {name}"))),
                Some(MatrixEntry::Constant { constant }) => Ok(MatrixPath::constant(
                    grid,
                    parse_matrix(name, constant, sh)?,
                )),
                Some(MatrixEntry::Nodes { nodes }) => {
                    let pts: Vec<(f64, Mat)> = nodes
                        .iter()
                        .map(|e| Ok((e.t, parse_matrix(name, &e.value, sh)?)))
                        .collect::<Result<_>>()?;
                    interpolate_nodes(name, &pts, grid)
                }
            }
        };
        let g = match self.matrices.get("G") {
            Some(MatrixEntry::Constant { constant }) => parse_matrix("G", constant, (n, n))?,
            Some(MatrixEntry::Nodes { .. }) => {
                return Err(Error::Input("G must be a constant matrix".into()))
            }
            None => return Err(Error::Input("missing matrix G".into())),
        };
        if self.xi.len() != n {
            return Err(Error::Input(format!("xi must have length {n}")));
        }
        let spec = GameSpec {
            n,
            m1,
            m2,
            grid,
            a: path("A")?,
            c: path("C")?,
            b1: path("B1")?,
            d1: path("D1")?,
            b2: path("B2")?,
            d2: path("D2")?,
            sigma: path("sigma")?,
            f1: path("f1")?,
            q: path("Q")?,
            r1: path("R1")?,
            r2: path("R2")?,
            r0: path("R0")?,
            r0hat: path("R0hat")?,
            g,
            alpha: self.alpha,
            gamma: self.gamma,
            xi: Vector::from_vec(self.xi),
        };
        spec.check_dimensions()?;
        Ok(spec)
    }
}

fn interpolate_nodes(name: &str, pts: &[(f64, Mat)], grid: TimeGrid) -> Result<MatrixPath> {
    if pts.is_empty() {
        return Err(Error::Input(format!("{name}: empty node list")));
    }
    if pts.windows(2).any(|w| !(w[1].0 > w[0].0)) {
        return Err(Error::Input(format!("{name}: node times must increase")));
    }
    let (t0, tn) = (pts[0].0, pts[pts.len() - 1].0);
    if t0 > 0.0 || tn < grid.horizon() {
        return Err(Error::Input(format!("{name}: nodes must cover [0, T]")));
    }
    MatrixPath::from_fn(grid, |_, t| {
        let j = pts.partition_point(|p| p.0 <= t).saturating_sub(1);
        if pts[j].0 == t || j + 1 == pts.len() {
            return pts[j].1.clone();
        }
        let (ta, ma) = (&pts[j].0, &pts[j].1);
        let (tb, mb) = (&pts[j + 1].0, &pts[j + 1].1);
        let w = (t - ta) / (tb - ta);
        ma + (mb - ma) * w
    })
}

/// One line of a [`ValidationReport`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub node: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    fn push(&mut self, name: &str, failure: Option<(String, Option<usize>)>, ok: &str) {
        let (passed, detail, node) = match failure {
            None => (true, ok.to_string(), None),
            Some((d, k)) => (false, d, k),
        };
        self.checks.push(Check {
            name: name.to_string(),
            passed,
            detail,
            node,
        });
    }
}

fn symmetric_defect(m: &Mat) -> f64 {
    let scale = m.norm();
    let d = (m - m.transpose()).norm();
    if scale == 0.0 {
        d
    } else {
        d / scale
    }
}

pub(crate) fn min_eigenvalue(m: &Mat) -> f64 {
    let s = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(s).eigenvalues.min()
}

pub(crate) fn max_eigenvalue(m: &Mat) -> f64 {
    let s = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(s).eigenvalues.max()
}

/// Checks dimensions, finiteness, symmetry, positivity of `R0` and `R0hat`
/// and positivity of the attenuation parameters.
pub fn validate_spec(spec: &GameSpec, delta: f64) -> ValidationReport {
    let mut report = ValidationReport::default();
    report.push(
        "dimensions",
        spec.check_dimensions().err().map(|e| (e.to_string(), None)),
        "all coefficient shapes match (n, m1, m2)",
    );
    if !report.passed() {
        return report;
    }

    let finite = PATH_NAMES.iter().find_map(|name| {
        spec.path_by_name(name)
            .samples()
            .iter()
            .position(|m| m.iter().any(|x| !x.is_finite()))
            .map(|k| (format!("{name} has a non-finite entry"), Some(k)))
    });
    let finite = finite.or_else(|| {
        (spec.g.iter().chain(spec.xi.iter()).any(|x| !x.is_finite()))
            .then(|| ("G or xi has a non-finite entry".to_string(), None))
    });
    report.push("finite", finite, "all entries finite");

    for name in ["Q", "R1", "R2", "R0", "R0hat"] {
        let bad = spec
            .path_by_name(name)
            .samples()
            .iter()
            .position(|m| symmetric_defect(m) > 1e-12)
            .map(|k| (format!("{name} is not symmetric"), Some(k)));
        report.push(&format!("symmetric {name}"), bad, "symmetric at every node");
    }
    let bad = (symmetric_defect(&spec.g) > 1e-12).then(|| ("G is not symmetric".to_string(), None));
    report.push("symmetric G", bad, "symmetric");

    for name in ["R0", "R0hat"] {
        let bad = spec
            .path_by_name(name)
            .samples()
            .iter()
            .enumerate()
            .find_map(|(k, m)| {
                let lam = min_eigenvalue(m);
                (!(lam >= delta)).then(|| {
                    (
                        format!("{name} minimum eigenvalue {lam:.3e} below {delta:.3e}"),
                        Some(k),
                    )
                })
            });
        report.push(
            &format!("positive {name}"),
            bad,
            "uniformly positive definite",
        );
    }

    for (name, v) in [("alpha", spec.alpha), ("gamma", spec.gamma)] {
        let bad =
            (!(v > 0.0 && v.is_finite())).then(|| (format!("{name} = {v} is not positive"), None));
        report.push(&format!("positive {name}"), bad, "positive");
    }
    report
}
