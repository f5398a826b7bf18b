//! Problem data: horizon grid, coefficient functions, weights, initial law,
//! built-in presets and TOML configuration.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::matcore::{asymmetry, ensure_finite, min_eigenvalue, symmetrize, Matrix, Vector};
use crate::streams;

const SYMMETRY_TOL: f64 = 1e-12;
const HORIZON_SLACK: f64 = 1e-12;

pub const PRESETS: [&str; 2] = ["example-1.1", "example-5.1"];

/// Uniform grid `t0 = s_0 < s_1 < ... < s_N = t1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t0: f64,
    pub t1: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, n_steps: usize) -> Result<Self> {
        if !(t0.is_finite() && t1.is_finite() && t0 < t1) {
            return Err(Error::InvalidArgument(format!(
                "time grid needs t0 < t1, got [{t0}, {t1}]"
            )));
        }
        if n_steps == 0 {
            return Err(Error::InvalidArgument(
                "time grid needs n_steps >= 1".into(),
            ));
        }
        Ok(Self { t0, t1, n_steps })
    }

    pub fn step(&self) -> f64 {
        (self.t1 - self.t0) / self.n_steps as f64
    }

    pub fn len(&self) -> usize {
        self.n_steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Time of node `i`; the last node is exactly `t1`.
    pub fn time(&self, i: usize) -> f64 {
        if i == self.n_steps {
            self.t1
        } else {
            self.t0 + i as f64 * self.step()
        }
    }

    /// Time of half-node `k` (node `i` is half-node `2i`, midpoints are odd).
    pub fn half_time(&self, k: usize) -> f64 {
        if k == 2 * self.n_steps {
            self.t1
        } else {
            self.t0 + k as f64 * 0.5 * self.step()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|i| self.time(i)).collect()
    }

    pub fn contains(&self, s: f64) -> bool {
        s >= self.t0 - HORIZON_SLACK && s <= self.t1 + HORIZON_SLACK
    }

    /// Index of the node at time `s`, which must lie on the grid.
    pub fn index_of(&self, s: f64) -> Result<usize> {
        if !self.contains(s) {
            return Err(Error::OutOfHorizon {
                s,
                t0: self.t0,
                t1: self.t1,
            });
        }
        let x = (s - self.t0) / self.step();
        let i = x.round();
        if (x - i).abs() > 1e-6 {
            return Err(Error::GridMismatch(format!(
                "time {s} is not a node of the grid with step {}",
                self.step()
            )));
        }
        Ok(i as usize)
    }

    /// The sub-grid between nodes `i0 < i1`.
    pub fn subgrid(&self, i0: usize, i1: usize) -> Result<TimeGrid> {
        if i0 >= i1 || i1 > self.n_steps {
            return Err(Error::GridMismatch(format!(
                "sub-grid [{i0}, {i1}] of a grid with {} steps",
                self.n_steps
            )));
        }
        TimeGrid::new(self.time(i0), self.time(i1), i1 - i0)
    }

    /// Offset of `other`'s first node within this grid, if `other` is a sub-grid with the same step.
    pub fn offset_of(&self, other: &TimeGrid) -> Result<usize> {
        let i0 = self.index_of(other.t0)?;
        let i1 = self.index_of(other.t1)?;
        if i1 - i0 != other.n_steps {
            return Err(Error::GridMismatch(format!(
                "grid [{}, {}] with {} steps is not a sub-grid of [{}, {}] with {} steps",
                other.t0, other.t1, other.n_steps, self.t0, self.t1, self.n_steps
            )));
        }
        Ok(i0)
    }
}

pub type AnalyticFn = Arc<dyn Fn(f64) -> Matrix + Send + Sync>;

/// A deterministic matrix-valued function of time.
#[derive(Clone)]
pub enum CoefficientFn {
    Constant(Matrix),
    /// Linear interpolation between samples; no extrapolation.
    Table {
        times: Vec<f64>,
        values: Vec<Matrix>,
    },
    Analytic {
        name: String,
        rows: usize,
        cols: usize,
        f: AnalyticFn,
    },
}

impl fmt::Debug for CoefficientFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant(m) => f.debug_tuple("Constant").field(m).finish(),
            Self::Table { times, values } => f
                .debug_struct("Table")
                .field("times", times)
                .field("values", values)
                .finish(),
            Self::Analytic {
                name, rows, cols, ..
            } => f
                .debug_struct("Analytic")
                .field("name", name)
                .field("rows", rows)
                .field("cols", cols)
                .finish(),
        }
    }
}

impl CoefficientFn {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::Constant(Matrix::zeros(rows, cols))
    }

    pub fn scalar(x: f64) -> Self {
        Self::Constant(Matrix::from_element(1, 1, x))
    }

    pub fn constant_vector(v: &[f64]) -> Self {
        Self::Constant(Matrix::from_column_slice(v.len(), 1, v))
    }

    pub fn table(times: Vec<f64>, values: Vec<Matrix>) -> Result<Self> {
        if times.len() < 2 || times.len() != values.len() {
            return Err(Error::InvalidArgument(format!(
                "table needs at least two samples and matching lengths, got {} times and {} values",
                times.len(),
                values.len()
            )));
        }
        if times
            .windows(2)
            .any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less))
        {
            return Err(Error::InvalidArgument(
                "table times must be strictly increasing".into(),
            ));
        }
        let shape = values[0].shape();
        if values.iter().any(|v| v.shape() != shape) {
            return Err(Error::Dimension("table values differ in shape".into()));
        }
        Ok(Self::Table { times, values })
    }

    pub fn analytic(
        name: &str,
        rows: usize,
        cols: usize,
        f: impl Fn(f64) -> Matrix + Send + Sync + 'static,
    ) -> Self {
        Self::Analytic {
            name: name.to_string(),
            rows,
            cols,
            f: Arc::new(f),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        match self {
            Self::Constant(m) => m.shape(),
            Self::Table { values, .. } => values[0].shape(),
            Self::Analytic { rows, cols, .. } => (*rows, *cols),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Self::Constant(_))
    }

    /// True when the function is identically zero (only decidable for constants and tables).
    pub fn is_zero(&self) -> bool {
        match self {
            Self::Constant(m) => m.iter().all(|&x| x == 0.0),
            Self::Table { values, .. } => values.iter().all(|m| m.iter().all(|&x| x == 0.0)),
            Self::Analytic { .. } => false,
        }
    }

    /// Evaluate without a horizon check; tables still refuse to extrapolate.
    pub fn eval(&self, s: f64) -> Result<Matrix> {
        let out = match self {
            Self::Constant(m) => m.clone(),
            Self::Table { times, values } => {
                let first = times[0];
                let last = *times.last().expect("table is nonempty");
                if s < first - HORIZON_SLACK || s > last + HORIZON_SLACK {
                    return Err(Error::OutOfHorizon {
                        s,
                        t0: first,
                        t1: last,
                    });
                }
                let j = times.partition_point(|&t| t <= s).clamp(1, times.len() - 1);
                let (ta, tb) = (times[j - 1], times[j]);
                let w = ((s - ta) / (tb - ta)).clamp(0.0, 1.0);
                &values[j - 1] * (1.0 - w) + &values[j] * w
            }
            Self::Analytic {
                name,
                rows,
                cols,
                f,
            } => {
                let m = f(s);
                if m.shape() != (*rows, *cols) {
                    return Err(Error::Dimension(format!(
                        "analytic coefficient `{name}` returned {}x{}, declared {rows}x{cols}",
                        m.nrows(),
                        m.ncols()
                    )));
                }
                ensure_finite(&m, name)?;
                m
            }
        };
        Ok(out)
    }

    fn map_values(&self, g: impl Fn(&Matrix) -> Matrix) -> Self {
        match self {
            Self::Constant(m) => Self::Constant(g(m)),
            Self::Table { times, values } => Self::Table {
                times: times.clone(),
                values: values.iter().map(g).collect(),
            },
            other => other.clone(),
        }
    }

    fn max_asymmetry(&self) -> f64 {
        match self {
            Self::Constant(m) => asymmetry(m),
            Self::Table { values, .. } => values.iter().map(asymmetry).fold(0.0, f64::max),
            Self::Analytic { .. } => 0.0,
        }
    }
}

/// Law of the initial state.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialLaw {
    Deterministic {
        mean: Vector,
    },
    Gaussian {
        mean: Vector,
        cov: Matrix,
    },
    /// Takes `mean + offset` with probability `p` and `mean - p/(1-p) offset` otherwise.
    TwoPointCentered {
        mean: Vector,
        offset: Vector,
        p: f64,
    },
}

impl InitialLaw {
    pub fn deterministic(mean: &[f64]) -> Self {
        Self::Deterministic {
            mean: Vector::from_column_slice(mean),
        }
    }

    pub fn two_point(mean: &[f64], offset: &[f64], p: f64) -> Self {
        Self::TwoPointCentered {
            mean: Vector::from_column_slice(mean),
            offset: Vector::from_column_slice(offset),
            p,
        }
    }

    pub fn gaussian(mean: &[f64], cov: Matrix) -> Self {
        Self::Gaussian {
            mean: Vector::from_column_slice(mean),
            cov,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean().len()
    }

    pub fn mean(&self) -> &Vector {
        match self {
            Self::Deterministic { mean }
            | Self::Gaussian { mean, .. }
            | Self::TwoPointCentered { mean, .. } => mean,
        }
    }

    pub fn covariance(&self) -> Matrix {
        let n = self.dim();
        match self {
            Self::Deterministic { .. } => Matrix::zeros(n, n),
            Self::Gaussian { cov, .. } => cov.clone(),
            Self::TwoPointCentered { offset, p, .. } => {
                // deviations: offset w.p. p, -p/(1-p) offset w.p. 1-p
                let scale = p + p * p / (1.0 - p);
                offset * offset.transpose() * scale
            }
        }
    }

    /// `E|ξ|²`.
    pub fn second_moment(&self) -> f64 {
        self.mean().norm_squared() + self.covariance().trace()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        let mean = Matrix::from_column_slice(n, 1, self.mean().as_slice());
        ensure_finite(&mean, "initial law mean")?;
        match self {
            Self::Deterministic { .. } => Ok(()),
            Self::Gaussian { cov, .. } => {
                if cov.shape() != (n, n) {
                    return Err(Error::Dimension(format!(
                        "initial covariance is {}x{}, expected {n}x{n}",
                        cov.nrows(),
                        cov.ncols()
                    )));
                }
                ensure_finite(cov, "initial covariance")?;
                if asymmetry(cov) > SYMMETRY_TOL * (1.0 + cov.norm()) {
                    return Err(Error::InvalidArgument(
                        "initial covariance is not symmetric".into(),
                    ));
                }
                if min_eigenvalue(cov)? < -1e-12 * (1.0 + cov.norm()) {
                    return Err(Error::InvalidArgument(
                        "initial covariance is not positive semidefinite".into(),
                    ));
                }
                Ok(())
            }
            Self::TwoPointCentered { offset, p, .. } => {
                if offset.len() != n {
                    return Err(Error::Dimension(format!(
                        "two-point offset has length {}, expected {n}",
                        offset.len()
                    )));
                }
                if !(*p > 0.0 && *p < 1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "two-point probability must lie in (0, 1), got {p}"
                    )));
                }
                if offset.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite("two-point offset".into()));
                }
                Ok(())
            }
        }
    }

    /// Draw one sample from `rng`.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        match self {
            Self::Deterministic { mean } => mean.clone(),
            Self::Gaussian { mean, cov } => {
                let n = mean.len();
                let z = Vector::from_iterator(n, (0..n).map(|_| rng.sample(StandardNormal)));
                mean + gaussian_factor(cov) * z
            }
            Self::TwoPointCentered { mean, offset, p } => {
                let u: f64 = rng.random();
                if u < *p {
                    mean + offset
                } else {
                    mean - offset * (p / (1.0 - p))
                }
            }
        }
    }
}

/// A square root `L` with `L Lᵀ = cov`, tolerating singular covariances.
fn gaussian_factor(cov: &Matrix) -> Matrix {
    if let Some(chol) = cov.clone().cholesky() {
        return chol.l();
    }
    let eig = symmetrize(cov).symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * Matrix::from_diagonal(&roots)
}

/// `n_paths` draws of the initial state; path `p` uses its own stream, so
/// the result does not depend on how paths are scheduled.
pub fn sample_initial(law: &InitialLaw, n_paths: usize, seed: u64) -> Result<Vec<Vector>> {
    if n_paths == 0 {
        return Err(Error::InvalidArgument("n_paths must be at least 1".into()));
    }
    law.validate()?;
    Ok((0..n_paths)
        .map(|p| law.draw(&mut streams::initial_stream(seed, p as u64)))
        .collect())
}

/// Coefficients and weights evaluated at one time.
#[derive(Debug, Clone)]
pub struct Coefficients {
    pub a: Matrix,
    pub a_bar: Matrix,
    pub b: Matrix,
    pub b_bar: Matrix,
    pub c: Matrix,
    pub c_bar: Matrix,
    pub d: Matrix,
    pub d_bar: Matrix,
    pub drift: Matrix,
    pub sigma: Matrix,
    pub q: Matrix,
    pub q_bar: Matrix,
    pub s: Matrix,
    pub s_bar: Matrix,
    pub r: Matrix,
    pub r_bar: Matrix,
    pub q_lin: Matrix,
    pub q_lin_bar: Matrix,
    pub rho: Matrix,
    pub rho_bar: Matrix,
}

/// All data of a mean-field LQ problem on a finite horizon.
///
/// Matrix-valued coefficients are `n x n` (A, Ā, C, C̄, Q, Q̄), `n x m`
/// (B, B̄, D, D̄), `m x n` (S, S̄) or `m x m` (R, R̄). The nonhomogeneous
/// terms `drift`, `sigma`, `q_lin`, `q_lin_bar` are `n x 1`; `rho`, `rho_bar`
/// are `m x 1`. All of them are deterministic.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub name: String,
    pub n: usize,
    pub m: usize,
    pub grid: TimeGrid,
    pub a: CoefficientFn,
    pub a_bar: CoefficientFn,
    pub b: CoefficientFn,
    pub b_bar: CoefficientFn,
    pub c: CoefficientFn,
    pub c_bar: CoefficientFn,
    pub d: CoefficientFn,
    pub d_bar: CoefficientFn,
    pub drift: CoefficientFn,
    pub sigma: CoefficientFn,
    pub q: CoefficientFn,
    pub q_bar: CoefficientFn,
    pub s: CoefficientFn,
    pub s_bar: CoefficientFn,
    pub r: CoefficientFn,
    pub r_bar: CoefficientFn,
    pub q_lin: CoefficientFn,
    pub q_lin_bar: CoefficientFn,
    pub rho: CoefficientFn,
    pub rho_bar: CoefficientFn,
    pub g: Matrix,
    pub g_bar: Matrix,
    pub g_lin: Vector,
    pub g_lin_bar: Vector,
    pub initial: InitialLaw,
}

/// Config/field name, role and expected shape of every coefficient.
#[derive(Clone, Copy)]
enum Shape {
    NN,
    NM,
    MN,
    MM,
    N1,
    M1,
}

impl Shape {
    fn dims(self, n: usize, m: usize) -> (usize, usize) {
        match self {
            Shape::NN => (n, n),
            Shape::NM => (n, m),
            Shape::MN => (m, n),
            Shape::MM => (m, m),
            Shape::N1 => (n, 1),
            Shape::M1 => (m, 1),
        }
    }

    fn is_vector(self) -> bool {
        matches!(self, Shape::N1 | Shape::M1)
    }
}

const DYNAMICS: [(&str, Shape); 10] = [
    ("A", Shape::NN),
    ("Abar", Shape::NN),
    ("B", Shape::NM),
    ("Bbar", Shape::NM),
    ("C", Shape::NN),
    ("Cbar", Shape::NN),
    ("D", Shape::NM),
    ("Dbar", Shape::NM),
    ("b", Shape::N1),
    ("sigma", Shape::N1),
];

const WEIGHTS: [(&str, Shape); 10] = [
    ("Q", Shape::NN),
    ("Qbar", Shape::NN),
    ("S", Shape::MN),
    ("Sbar", Shape::MN),
    ("R", Shape::MM),
    ("Rbar", Shape::MM),
    ("q", Shape::N1),
    ("qbar", Shape::N1),
    ("rho", Shape::M1),
    ("rhobar", Shape::M1),
];

const SYMMETRIC: [&str; 4] = ["Q", "Qbar", "R", "Rbar"];

impl ProblemSpec {
    /// A problem with every coefficient and weight equal to zero and `ξ ≡ 0`.
    pub fn zeros(n: usize, m: usize, grid: TimeGrid) -> Self {
        let nn = || CoefficientFn::zeros(n, n);
        let nm = || CoefficientFn::zeros(n, m);
        Self {
            name: "custom".into(),
            n,
            m,
            grid,
            a: nn(),
            a_bar: nn(),
            b: nm(),
            b_bar: nm(),
            c: nn(),
            c_bar: nn(),
            d: nm(),
            d_bar: nm(),
            drift: CoefficientFn::zeros(n, 1),
            sigma: CoefficientFn::zeros(n, 1),
            q: nn(),
            q_bar: nn(),
            s: CoefficientFn::zeros(m, n),
            s_bar: CoefficientFn::zeros(m, n),
            r: CoefficientFn::zeros(m, m),
            r_bar: CoefficientFn::zeros(m, m),
            q_lin: CoefficientFn::zeros(n, 1),
            q_lin_bar: CoefficientFn::zeros(n, 1),
            rho: CoefficientFn::zeros(m, 1),
            rho_bar: CoefficientFn::zeros(m, 1),
            g: Matrix::zeros(n, n),
            g_bar: Matrix::zeros(n, n),
            g_lin: Vector::zeros(n),
            g_lin_bar: Vector::zeros(n),
            initial: InitialLaw::Deterministic {
                mean: Vector::zeros(n),
            },
        }
    }

    /// Built-in problems on `[0, 1]` with 2000 steps.
    ///
    /// `example-1.1`: `dX = (X + EX + u + Eu) ds + (X + EX) dW`, cost `|E X(1)|²`, `ξ ≡ 1`.
    ///
    /// `example-5.1`: `dX = (-X + EX + u + Eu) ds + √2 (X - EX) dW`, cost
    /// `E|X(1)|² + |E X(1)|²`, `ξ` two-point with mean 1 and variance 1.
    pub fn preset(name: &str) -> Result<Self> {
        let grid = TimeGrid::new(0.0, 1.0, 2000)?;
        let mut spec = Self::zeros(1, 1, grid);
        spec.name = name.to_string();
        let one = || CoefficientFn::scalar(1.0);
        match name {
            "example-1.1" => {
                spec.a = one();
                spec.a_bar = one();
                spec.b = one();
                spec.b_bar = one();
                spec.c = one();
                spec.c_bar = one();
                spec.g_bar = Matrix::from_element(1, 1, 1.0);
                spec.initial = InitialLaw::deterministic(&[1.0]);
            }
            "example-5.1" => {
                spec.a = CoefficientFn::scalar(-1.0);
                spec.a_bar = one();
                spec.b = one();
                spec.b_bar = one();
                spec.c = CoefficientFn::scalar(2f64.sqrt());
                spec.c_bar = CoefficientFn::scalar(-(2f64.sqrt()));
                spec.g = Matrix::from_element(1, 1, 1.0);
                spec.g_bar = Matrix::from_element(1, 1, 1.0);
                spec.initial = InitialLaw::two_point(&[1.0], &[1.0], 0.5);
            }
            other => {
                return Err(Error::Config {
                    field: "preset".into(),
                    msg: format!("unknown preset `{other}` (known: {})", PRESETS.join(", ")),
                })
            }
        }
        Ok(spec)
    }

    /// Same problem on a grid with `n_steps` steps over the same horizon.
    pub fn with_steps(mut self, n_steps: usize) -> Result<Self> {
        self.grid = TimeGrid::new(self.grid.t0, self.grid.t1, n_steps)?;
        Ok(self)
    }

    /// Same problem started at `t0` (the horizon end is unchanged).
    pub fn with_grid(mut self, grid: TimeGrid) -> Self {
        self.grid = grid;
        self
    }

    fn field(&self, key: &str) -> &CoefficientFn {
        match key {
            "A" => &self.a,
            "Abar" => &self.a_bar,
            "B" => &self.b,
            "Bbar" => &self.b_bar,
            "C" => &self.c,
            "Cbar" => &self.c_bar,
            "D" => &self.d,
            "Dbar" => &self.d_bar,
            "b" => &self.drift,
            "sigma" => &self.sigma,
            "Q" => &self.q,
            "Qbar" => &self.q_bar,
            "S" => &self.s,
            "Sbar" => &self.s_bar,
            "R" => &self.r,
            "Rbar" => &self.r_bar,
            "q" => &self.q_lin,
            "qbar" => &self.q_lin_bar,
            "rho" => &self.rho,
            "rhobar" => &self.rho_bar,
            _ => unreachable!("unknown coefficient key {key}"),
        }
    }

    fn field_mut(&mut self, key: &str) -> &mut CoefficientFn {
        match key {
            "A" => &mut self.a,
            "Abar" => &mut self.a_bar,
            "B" => &mut self.b,
            "Bbar" => &mut self.b_bar,
            "C" => &mut self.c,
            "Cbar" => &mut self.c_bar,
            "D" => &mut self.d,
            "Dbar" => &mut self.d_bar,
            "b" => &mut self.drift,
            "sigma" => &mut self.sigma,
            "Q" => &mut self.q,
            "Qbar" => &mut self.q_bar,
            "S" => &mut self.s,
            "Sbar" => &mut self.s_bar,
            "R" => &mut self.r,
            "Rbar" => &mut self.r_bar,
            "q" => &mut self.q_lin,
            "qbar" => &mut self.q_lin_bar,
            "rho" => &mut self.rho,
            "rhobar" => &mut self.rho_bar,
            _ => unreachable!("unknown coefficient key {key}"),
        }
    }

    fn all_fields() -> impl Iterator<Item = (&'static str, &'static str, Shape)> {
        DYNAMICS
            .iter()
            .map(|&(k, s)| ("coefficients", k, s))
            .chain(WEIGHTS.iter().map(|&(k, s)| ("weights", k, s)))
    }

    /// Check dimensions, finiteness and symmetry; errors name the config field.
    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.n, self.m);
        if n == 0 || m == 0 {
            return Err(config_err("dims", "n and m must be positive"));
        }
        for (section, key, shape) in Self::all_fields() {
            let f = self.field(key);
            let want = shape.dims(n, m);
            if f.dims() != want {
                let got = f.dims();
                return Err(config_err(
                    &format!("{section}.{key}"),
                    &format!("expected {}x{}, got {}x{}", want.0, want.1, got.0, got.1),
                ));
            }
            if let CoefficientFn::Table { times, .. } = f {
                if times[0] > self.grid.t0 + HORIZON_SLACK
                    || *times.last().unwrap() < self.grid.t1 - HORIZON_SLACK
                {
                    return Err(config_err(
                        &format!("{section}.{key}.table.times"),
                        "table must cover the whole horizon",
                    ));
                }
            }
            for s in [self.grid.t0, self.grid.t1] {
                let v = f
                    .eval(s)
                    .map_err(|e| config_err(&format!("{section}.{key}"), &e.to_string()))?;
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(config_err(&format!("{section}.{key}"), "non-finite entry"));
                }
            }
            if SYMMETRIC.contains(&key) && f.max_asymmetry() > SYMMETRY_TOL {
                return Err(config_err(&format!("{section}.{key}"), "not symmetric"));
            }
        }
        for (key, g) in [("G", &self.g), ("Gbar", &self.g_bar)] {
            let field = format!("weights.{key}");
            if g.shape() != (n, n) {
                return Err(config_err(
                    &field,
                    &format!("expected {n}x{n}, got {}x{}", g.nrows(), g.ncols()),
                ));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(config_err(&field, "non-finite entry"));
            }
            if asymmetry(g) > SYMMETRY_TOL {
                return Err(config_err(&field, "not symmetric"));
            }
        }
        for (key, g) in [("g", &self.g_lin), ("gbar", &self.g_lin_bar)] {
            let field = format!("weights.{key}");
            if g.len() != n {
                return Err(config_err(
                    &field,
                    &format!("expected length {n}, got {}", g.len()),
                ));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(config_err(&field, "non-finite entry"));
            }
        }
        if self.initial.dim() != n {
            return Err(config_err(
                "initial.mean",
                &format!("expected length {n}, got {}", self.initial.dim()),
            ));
        }
        self.initial
            .validate()
            .map_err(|e| config_err("initial", &e.to_string()))?;
        Ok(())
    }

    /// Evaluate `f` at `s`, which must lie in the horizon.
    pub fn eval_coeff(&self, f: &CoefficientFn, s: f64) -> Result<Matrix> {
        if !self.grid.contains(s) {
            return Err(Error::OutOfHorizon {
                s,
                t0: self.grid.t0,
                t1: self.grid.t1,
            });
        }
        f.eval(s)
    }

    /// Every coefficient and weight at time `s`.
    pub fn at(&self, s: f64) -> Result<Coefficients> {
        let e = |f: &CoefficientFn| self.eval_coeff(f, s);
        Ok(Coefficients {
            a: e(&self.a)?,
            a_bar: e(&self.a_bar)?,
            b: e(&self.b)?,
            b_bar: e(&self.b_bar)?,
            c: e(&self.c)?,
            c_bar: e(&self.c_bar)?,
            d: e(&self.d)?,
            d_bar: e(&self.d_bar)?,
            drift: e(&self.drift)?,
            sigma: e(&self.sigma)?,
            q: e(&self.q)?,
            q_bar: e(&self.q_bar)?,
            s: e(&self.s)?,
            s_bar: e(&self.s_bar)?,
            r: e(&self.r)?,
            r_bar: e(&self.r_bar)?,
            q_lin: e(&self.q_lin)?,
            q_lin_bar: e(&self.q_lin_bar)?,
            rho: e(&self.rho)?,
            rho_bar: e(&self.rho_bar)?,
        })
    }

    /// True when every nonhomogeneous term (b, σ, q, q̄, ρ, ρ̄, g, ḡ) vanishes.
    pub fn is_homogeneous(&self) -> bool {
        [
            &self.drift,
            &self.sigma,
            &self.q_lin,
            &self.q_lin_bar,
            &self.rho,
            &self.rho_bar,
        ]
        .iter()
        .all(|f| f.is_zero())
            && self.g_lin.iter().all(|&x| x == 0.0)
            && self.g_lin_bar.iter().all(|&x| x == 0.0)
    }

    /// The same problem with all nonhomogeneous terms set to zero.
    pub fn homogeneous(&self) -> Self {
        let mut out = self.clone();
        out.drift = CoefficientFn::zeros(self.n, 1);
        out.sigma = CoefficientFn::zeros(self.n, 1);
        out.q_lin = CoefficientFn::zeros(self.n, 1);
        out.q_lin_bar = CoefficientFn::zeros(self.n, 1);
        out.rho = CoefficientFn::zeros(self.m, 1);
        out.rho_bar = CoefficientFn::zeros(self.m, 1);
        out.g_lin = Vector::zeros(self.n);
        out.g_lin_bar = Vector::zeros(self.n);
        out
    }

    /// Parse and validate a TOML configuration.
    ///
    /// Layout:
    ///
    /// ```toml
    /// [dims]
    /// n = 1
    /// m = 1
    /// [horizon]
    /// t0 = 0.0
    /// t1 = 1.0
    /// n_steps = 2000
    /// [coefficients]
    /// A = { constant = [[-1.0]] }
    /// Abar = { table = { times = [0.0, 1.0], values = [[[0.0]], [[2.0]]] } }
    /// C = { preset = "example-5.1" }
    /// b = { constant = [0.5] }
    /// [weights]
    /// R = { constant = [[1.0]] }
    /// G = [[1.0]]
    /// g = [0.0]
    /// [initial]
    /// kind = "two-point-centered"
    /// mean = [1.0]
    /// offset = [1.0]
    /// p = 0.5
    /// ```
    ///
    /// Omitted coefficients and weights are zero; vector-valued entries
    /// (`b`, `sigma`, `q`, `qbar`, `rho`, `rhobar`) take flat lists. `Q`,
    /// `Qbar`, `R`, `Rbar` are symmetrized with a warning when slightly
    /// asymmetric; `G` and `Gbar` must be symmetric.
    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: Table = text.parse::<Table>().map_err(|e| Error::Config {
            field: "<document>".into(),
            msg: e.to_string().trim().to_string(),
        })?;
        check_keys(
            &doc,
            "",
            &["dims", "horizon", "coefficients", "weights", "initial"],
        )?;

        let dims = sub_table(&doc, "dims", "dims")?.ok_or_else(|| config_err("dims", "missing"))?;
        check_keys(dims, "dims", &["n", "m"])?;
        let n = get_usize(dims, "n", "dims.n")?;
        let m = get_usize(dims, "m", "dims.m")?;
        if n == 0 || m == 0 {
            return Err(config_err("dims", "n and m must be positive"));
        }

        let grid = match sub_table(&doc, "horizon", "horizon")? {
            None => TimeGrid::new(0.0, 1.0, 2000)?,
            Some(h) => {
                check_keys(h, "horizon", &["t0", "t1", "n_steps"])?;
                let t0 = opt_f64(h, "t0", "horizon.t0")?.unwrap_or(0.0);
                let t1 = opt_f64(h, "t1", "horizon.t1")?.unwrap_or(1.0);
                let steps = if h.contains_key("n_steps") {
                    get_usize(h, "n_steps", "horizon.n_steps")?
                } else {
                    2000
                };
                TimeGrid::new(t0, t1, steps).map_err(|e| config_err("horizon", &e.to_string()))?
            }
        };

        let mut spec = Self::zeros(n, m, grid);
        spec.name = "config".into();

        let coeffs = sub_table(&doc, "coefficients", "coefficients")?;
        let weights = sub_table(&doc, "weights", "weights")?;
        let coeff_keys: Vec<&str> = DYNAMICS.iter().map(|(k, _)| *k).collect();
        let mut weight_keys: Vec<&str> = WEIGHTS.iter().map(|(k, _)| *k).collect();
        weight_keys.extend(["G", "Gbar", "g", "gbar"]);
        if let Some(t) = coeffs {
            check_keys(t, "coefficients", &coeff_keys)?;
        }
        if let Some(t) = weights {
            check_keys(t, "weights", &weight_keys)?;
        }

        for (section, key, shape) in Self::all_fields() {
            let table = if section == "coefficients" {
                coeffs
            } else {
                weights
            };
            let Some(value) = table.and_then(|t| t.get(key)) else {
                continue;
            };
            let path = format!("{section}.{key}");
            let mut f = parse_coefficient(value, &path, key, shape, n, m)?;
            if SYMMETRIC.contains(&key) {
                let asym = f.max_asymmetry();
                if asym > SYMMETRY_TOL {
                    log::warn!("{path}: symmetrizing (asymmetry {asym:.3e})");
                    f = f.map_values(symmetrize);
                }
            }
            *spec.field_mut(key) = f;
        }

        if let Some(w) = weights {
            for (key, target) in [("G", &mut spec.g), ("Gbar", &mut spec.g_bar)] {
                if let Some(v) = w.get(key) {
                    let path = format!("weights.{key}");
                    let mat = parse_matrix(v, &path)?;
                    if mat.shape() != (n, n) {
                        return Err(config_err(
                            &path,
                            &format!("expected {n}x{n}, got {}x{}", mat.nrows(), mat.ncols()),
                        ));
                    }
                    if asymmetry(&mat) > SYMMETRY_TOL {
                        return Err(config_err(&path, "not symmetric"));
                    }
                    *target = mat;
                }
            }
            for (key, target) in [("g", &mut spec.g_lin), ("gbar", &mut spec.g_lin_bar)] {
                if let Some(v) = w.get(key) {
                    let path = format!("weights.{key}");
                    let vec = parse_vector(v, &path)?;
                    if vec.len() != n {
                        return Err(config_err(
                            &path,
                            &format!("expected length {n}, got {}", vec.len()),
                        ));
                    }
                    *target = vec;
                }
            }
        }

        if let Some(init) = sub_table(&doc, "initial", "initial")? {
            spec.initial = parse_initial(init, n)?;
        }

        spec.validate()?;
        Ok(spec)
    }

    /// Serialize to the TOML layout read by [`ProblemSpec::from_toml`].
    /// Analytic coefficients are written as tables sampled on the grid.
    pub fn to_toml(&self) -> Result<String> {
        let mut doc = Table::new();
        let mut dims = Table::new();
        dims.insert("n".into(), Value::Integer(self.n as i64));
        dims.insert("m".into(), Value::Integer(self.m as i64));
        doc.insert("dims".into(), Value::Table(dims));

        let mut horizon = Table::new();
        horizon.insert("t0".into(), Value::Float(self.grid.t0));
        horizon.insert("t1".into(), Value::Float(self.grid.t1));
        horizon.insert("n_steps".into(), Value::Integer(self.grid.n_steps as i64));
        doc.insert("horizon".into(), Value::Table(horizon));

        let mut coeffs = Table::new();
        let mut weights = Table::new();
        for (section, key, shape) in Self::all_fields() {
            let value = self.coefficient_value(self.field(key), shape)?;
            if section == "coefficients" {
                coeffs.insert(key.into(), value);
            } else {
                weights.insert(key.into(), value);
            }
        }
        weights.insert("G".into(), matrix_value(&self.g));
        weights.insert("Gbar".into(), matrix_value(&self.g_bar));
        weights.insert("g".into(), vector_value(self.g_lin.as_slice()));
        weights.insert("gbar".into(), vector_value(self.g_lin_bar.as_slice()));
        doc.insert("coefficients".into(), Value::Table(coeffs));
        doc.insert("weights".into(), Value::Table(weights));

        let mut init = Table::new();
        match &self.initial {
            InitialLaw::Deterministic { mean } => {
                init.insert("kind".into(), Value::String("deterministic".into()));
                init.insert("mean".into(), vector_value(mean.as_slice()));
            }
            InitialLaw::Gaussian { mean, cov } => {
                init.insert("kind".into(), Value::String("gaussian".into()));
                init.insert("mean".into(), vector_value(mean.as_slice()));
                init.insert("cov".into(), matrix_value(cov));
            }
            InitialLaw::TwoPointCentered { mean, offset, p } => {
                init.insert("kind".into(), Value::String("two-point-centered".into()));
                init.insert("mean".into(), vector_value(mean.as_slice()));
                init.insert("offset".into(), vector_value(offset.as_slice()));
                init.insert("p".into(), Value::Float(*p));
            }
        }
        doc.insert("initial".into(), Value::Table(init));
        toml::to_string(&doc).map_err(|e| Error::InvalidArgument(format!("serializing spec: {e}")))
    }

    fn coefficient_value(&self, f: &CoefficientFn, shape: Shape) -> Result<Value> {
        let enc = |m: &Matrix| {
            if shape.is_vector() {
                vector_value(m.as_slice())
            } else {
                matrix_value(m)
            }
        };
        let mut t = Table::new();
        match f {
            CoefficientFn::Constant(m) => {
                t.insert("constant".into(), enc(m));
            }
            CoefficientFn::Table { times, values } => {
                t.insert(
                    "table".into(),
                    table_value(times, &values.iter().map(enc).collect::<Vec<_>>()),
                );
            }
            CoefficientFn::Analytic { .. } => {
                let times = self.grid.times();
                let values = times
                    .iter()
                    .map(|&s| f.eval(s).map(|m| enc(&m)))
                    .collect::<Result<Vec<_>>>()?;
                t.insert("table".into(), table_value(&times, &values));
            }
        }
        Ok(Value::Table(t))
    }
}

fn config_err(field: &str, msg: &str) -> Error {
    Error::Config {
        field: field.to_string(),
        msg: msg.to_string(),
    }
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

fn check_keys(t: &Table, path: &str, allowed: &[&str]) -> Result<()> {
    for k in t.keys() {
        if !allowed.contains(&k.as_str()) {
            return Err(config_err(&join(path, k), "unknown field"));
        }
    }
    Ok(())
}

fn sub_table<'a>(t: &'a Table, key: &str, path: &str) -> Result<Option<&'a Table>> {
    match t.get(key) {
        None => Ok(None),
        Some(Value::Table(s)) => Ok(Some(s)),
        Some(_) => Err(config_err(path, "expected a table")),
    }
}

fn as_f64(v: &Value, path: &str) -> Result<f64> {
    let x = match v {
        Value::Float(x) => *x,
        Value::Integer(i) => *i as f64,
        _ => return Err(config_err(path, "expected a number")),
    };
    if !x.is_finite() {
        return Err(config_err(path, "non-finite entry"));
    }
    Ok(x)
}

fn opt_f64(t: &Table, key: &str, path: &str) -> Result<Option<f64>> {
    t.get(key).map(|v| as_f64(v, path)).transpose()
}

fn get_usize(t: &Table, key: &str, path: &str) -> Result<usize> {
    match t.get(key) {
        Some(Value::Integer(i)) if *i >= 0 => Ok(*i as usize),
        Some(_) => Err(config_err(path, "expected a nonnegative integer")),
        None => Err(config_err(path, "missing")),
    }
}

fn parse_vector(v: &Value, path: &str) -> Result<Vector> {
    let Value::Array(items) = v else {
        return Err(config_err(path, "expected a list of numbers"));
    };
    let xs = items
        .iter()
        .enumerate()
        .map(|(i, x)| as_f64(x, &format!("{path}[{i}]")))
        .collect::<Result<Vec<_>>>()?;
    Ok(Vector::from_vec(xs))
}

fn parse_matrix(v: &Value, path: &str) -> Result<Matrix> {
    let Value::Array(rows) = v else {
        return Err(config_err(path, "expected a list of rows"));
    };
    if rows.is_empty() {
        return Err(config_err(path, "empty matrix"));
    }
    let mut data = Vec::new();
    let mut ncols = None;
    for (i, row) in rows.iter().enumerate() {
        let rp = format!("{path}[{i}]");
        let r = parse_vector(row, &rp)?;
        match ncols {
            None => ncols = Some(r.len()),
            Some(c) if c != r.len() => return Err(config_err(&rp, "ragged matrix rows")),
            _ => {}
        }
        data.extend(r.iter());
    }
    let c = ncols.unwrap_or(0);
    if c == 0 {
        return Err(config_err(path, "empty matrix"));
    }
    Ok(Matrix::from_row_slice(rows.len(), c, &data))
}

fn parse_shaped(v: &Value, path: &str, shape: Shape) -> Result<Matrix> {
    if shape.is_vector() {
        let x = parse_vector(v, path)?;
        Ok(Matrix::from_column_slice(x.len(), 1, x.as_slice()))
    } else {
        parse_matrix(v, path)
    }
}

fn parse_coefficient(
    v: &Value,
    path: &str,
    key: &str,
    shape: Shape,
    n: usize,
    m: usize,
) -> Result<CoefficientFn> {
    let Value::Table(t) = v else {
        return Err(config_err(
            path,
            "expected one of {constant = ...}, {table = ...}, {preset = ...}",
        ));
    };
    if t.len() != 1 {
        return Err(config_err(
            path,
            "expected exactly one of constant, table, preset",
        ));
    }
    let want = shape.dims(n, m);
    let check = |mat: &Matrix, p: &str| -> Result<()> {
        if mat.shape() != want {
            Err(config_err(
                p,
                &format!(
                    "expected {}x{}, got {}x{}",
                    want.0,
                    want.1,
                    mat.nrows(),
                    mat.ncols()
                ),
            ))
        } else {
            Ok(())
        }
    };
    let (kind, body) = t.iter().next().expect("one entry");
    match kind.as_str() {
        "constant" => {
            let p = format!("{path}.constant");
            let mat = parse_shaped(body, &p, shape)?;
            check(&mat, &p)?;
            Ok(CoefficientFn::Constant(mat))
        }
        "table" => {
            let p = format!("{path}.table");
            let Value::Table(tt) = body else {
                return Err(config_err(&p, "expected {times = [...], values = [...]}"));
            };
            check_keys(tt, &p, &["times", "values"])?;
            let times_v = tt
                .get("times")
                .ok_or_else(|| config_err(&format!("{p}.times"), "missing"))?;
            let times = parse_vector(times_v, &format!("{p}.times"))?;
            let Some(Value::Array(vals)) = tt.get("values") else {
                return Err(config_err(&format!("{p}.values"), "expected a list"));
            };
            let mut values = Vec::with_capacity(vals.len());
            for (i, x) in vals.iter().enumerate() {
                let vp = format!("{p}.values[{i}]");
                let mat = parse_shaped(x, &vp, shape)?;
                check(&mat, &vp)?;
                values.push(mat);
            }
            CoefficientFn::table(times.as_slice().to_vec(), values)
                .map_err(|e| config_err(&p, &e.to_string()))
        }
        "preset" => {
            let p = format!("{path}.preset");
            let Value::String(name) = body else {
                return Err(config_err(&p, "expected a preset name"));
            };
            let preset = ProblemSpec::preset(name).map_err(|_| {
                config_err(
                    &p,
                    &format!("unknown preset `{name}` (known: {})", PRESETS.join(", ")),
                )
            })?;
            let f = preset.field(key).clone();
            let got = f.dims();
            if got != want {
                return Err(config_err(
                    &p,
                    &format!(
                        "preset value is {}x{}, expected {}x{}",
                        got.0, got.1, want.0, want.1
                    ),
                ));
            }
            Ok(f)
        }
        other => Err(config_err(
            &format!("{path}.{other}"),
            "unknown coefficient kind (expected constant, table or preset)",
        )),
    }
}

fn parse_initial(t: &Table, n: usize) -> Result<InitialLaw> {
    let kind = match t.get("kind") {
        Some(Value::String(s)) => s.as_str(),
        Some(_) => return Err(config_err("initial.kind", "expected a string")),
        None => "deterministic",
    };
    let mean = match t.get("mean") {
        Some(v) => parse_vector(v, "initial.mean")?,
        None => Vector::zeros(n),
    };
    if mean.len() != n {
        return Err(config_err(
            "initial.mean",
            &format!("expected length {n}, got {}", mean.len()),
        ));
    }
    let law = match kind {
        "deterministic" => {
            check_keys(t, "initial", &["kind", "mean"])?;
            InitialLaw::Deterministic { mean }
        }
        "gaussian" => {
            check_keys(t, "initial", &["kind", "mean", "cov"])?;
            let cov = t
                .get("cov")
                .ok_or_else(|| config_err("initial.cov", "missing"))
                .and_then(|v| parse_matrix(v, "initial.cov"))?;
            InitialLaw::Gaussian { mean, cov }
        }
        "two-point-centered" => {
            check_keys(t, "initial", &["kind", "mean", "offset", "p"])?;
            let offset = t
                .get("offset")
                .ok_or_else(|| config_err("initial.offset", "missing"))
                .and_then(|v| parse_vector(v, "initial.offset"))?;
            let p = opt_f64(t, "p", "initial.p")?.unwrap_or(0.5);
            InitialLaw::TwoPointCentered { mean, offset, p }
        }
        other => {
            return Err(config_err(
                "initial.kind",
                &format!(
                    "unknown kind `{other}` (expected deterministic, gaussian, two-point-centered)"
                ),
            ))
        }
    };
    law.validate()
        .map_err(|e| config_err("initial", &e.to_string()))?;
    Ok(law)
}

fn vector_value(xs: &[f64]) -> Value {
    Value::Array(xs.iter().map(|&x| Value::Float(x)).collect())
}

fn matrix_value(m: &Matrix) -> Value {
    Value::Array(
        (0..m.nrows())
            .map(|i| Value::Array((0..m.ncols()).map(|j| Value::Float(m[(i, j)])).collect()))
            .collect(),
    )
}

fn table_value(times: &[f64], values: &[Value]) -> Value {
    let mut t = Table::new();
    t.insert("times".into(), vector_value(times));
    t.insert("values".into(), Value::Array(values.to_vec()));
    Value::Table(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_nodes_and_halves() {
        let g = TimeGrid::new(0.0, 1.0, 4).unwrap();
        assert_eq!(g.times(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(g.half_time(3), 0.375);
        assert_eq!(g.index_of(0.75).unwrap(), 3);
        assert!(g.index_of(0.3).is_err());
        assert!(g.index_of(1.5).is_err());
        let sub = g.subgrid(1, 3).unwrap();
        assert_eq!((sub.t0, sub.t1, sub.n_steps), (0.25, 0.75, 2));
        assert_eq!(g.offset_of(&sub).unwrap(), 1);
        assert!(TimeGrid::new(1.0, 1.0, 4).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
    }

    #[test]
    fn coefficient_kinds() {
        let c = CoefficientFn::scalar(2.0);
        assert_eq!(c.eval(0.3).unwrap()[(0, 0)], 2.0);

        let t = CoefficientFn::table(
            vec![0.0, 1.0],
            vec![Matrix::zeros(1, 1), Matrix::from_element(1, 1, 2.0)],
        )
        .unwrap();
        assert!((t.eval(0.5).unwrap()[(0, 0)] - 1.0).abs() < 1e-15);
        assert!(t.eval(1.5).is_err());

        let spec = ProblemSpec::preset("example-5.1").unwrap();
        let c = spec.eval_coeff(&spec.c, 0.7).unwrap();
        assert!((c[(0, 0)] - 2f64.sqrt()).abs() < 1e-15);
        assert!(spec.eval_coeff(&spec.c, 1.2).is_err());
    }

    #[test]
    fn presets_are_valid() {
        for name in PRESETS {
            ProblemSpec::preset(name).unwrap().validate().unwrap();
        }
        let s = ProblemSpec::preset("example-1.1").unwrap();
        assert_eq!(s.g[(0, 0)], 0.0);
        assert_eq!(s.g_bar[(0, 0)], 1.0);
        assert!(ProblemSpec::preset("nope").is_err());
    }

    #[test]
    fn two_point_covariance() {
        let law = InitialLaw::two_point(&[1.0], &[1.0], 0.5);
        assert!((law.covariance()[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((law.second_moment() - 2.0).abs() < 1e-15);
        let law = InitialLaw::two_point(&[0.0], &[1.0], 0.2);
        // values 1 (p=0.2) and -0.25 (p=0.8): variance 0.2 + 0.8/16 = 0.25
        assert!((law.covariance()[(0, 0)] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn deterministic_samples() {
        let xs = sample_initial(&InitialLaw::deterministic(&[1.0]), 3, 9).unwrap();
        assert!(xs.iter().all(|x| x[0] == 1.0));
        assert!(sample_initial(&InitialLaw::deterministic(&[1.0]), 0, 9).is_err());
        assert!(sample_initial(&InitialLaw::two_point(&[0.0], &[1.0], 1.0), 3, 9).is_err());
    }

    #[test]
    fn dimension_error_names_field() {
        let text = "[dims]\nn = 2\nm = 1\n[weights]\nG = [[1.0]]\n";
        match ProblemSpec::from_toml(text) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "weights.G"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_field_rejected() {
        let text = "[dims]\nn = 1\nm = 1\n[coefficients]\nZ = { constant = [[1.0]] }\n";
        match ProblemSpec::from_toml(text) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "coefficients.Z"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn asymmetric_g_rejected_and_q_symmetrized() {
        let text = "[dims]\nn = 2\nm = 1\n[weights]\nG = [[1.0, 0.5], [0.0, 1.0]]\n";
        assert!(matches!(
            ProblemSpec::from_toml(text),
            Err(Error::Config { ref field, .. }) if field == "weights.G"
        ));
        let text = "[dims]\nn = 2\nm = 1\n[weights]\nQ = { constant = [[1.0, 0.5], [0.0, 1.0]] }\n";
        let spec = ProblemSpec::from_toml(text).unwrap();
        let q = spec.q.eval(0.0).unwrap();
        assert_eq!(q[(0, 1)], 0.25);
        assert_eq!(q[(1, 0)], 0.25);
    }

    #[test]
    fn preset_coefficient_reference() {
        let text = "[dims]\nn = 1\nm = 1\n[coefficients]\nC = { preset = \"example-5.1\" }\n";
        let spec = ProblemSpec::from_toml(text).unwrap();
        assert!((spec.c.eval(0.2).unwrap()[(0, 0)] - 2f64.sqrt()).abs() < 1e-15);
        let text = "[dims]\nn = 1\nm = 1\n[coefficients]\nC = { preset = \"example-9\" }\n";
        assert!(matches!(
            ProblemSpec::from_toml(text),
            Err(Error::Config { ref field, .. }) if field == "coefficients.C.preset"
        ));
    }

    #[test]
    fn table_must_cover_horizon() {
        let text = "[dims]\nn = 1\nm = 1\n[coefficients]\nA = { table = { times = [0.0, 0.5], values = [[[0.0]], [[1.0]]] } }\n";
        assert!(matches!(
            ProblemSpec::from_toml(text),
            Err(Error::Config { ref field, .. }) if field == "coefficients.A.table.times"
        ));
    }

    #[test]
    fn toml_round_trip_of_presets() {
        for name in PRESETS {
            let spec = ProblemSpec::preset(name).unwrap();
            let back = ProblemSpec::from_toml(&spec.to_toml().unwrap()).unwrap();
            assert_eq!(back.grid, spec.grid);
            assert_eq!(back.initial, spec.initial);
            for s in [0.0, 0.5, 1.0] {
                let a = spec.at(s).unwrap();
                let b = back.at(s).unwrap();
                assert_eq!(a.c, b.c);
                assert_eq!(a.a_bar, b.a_bar);
            }
            assert_eq!(back.g_bar, spec.g_bar);
        }
    }
}
