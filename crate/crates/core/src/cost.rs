//! Monte Carlo evaluation of the quadratic cost
//!
//! ```text
//! J = E[ ⟨G X(T), X(T)⟩ + 2⟨g, X(T)⟩ ] + ⟨Ḡ E X(T), E X(T)⟩ + 2⟨ḡ, E X(T)⟩
//!   + E ∫ ⟨Q X, X⟩ + 2⟨S X, u⟩ + ⟨R u, u⟩ + 2⟨q, X⟩ + 2⟨ρ, u⟩ ds
//!   + ∫ ⟨Q̄ E X, E X⟩ + 2⟨S̄ E X, E u⟩ + ⟨R̄ E u, E u⟩ + 2⟨q̄, E X⟩ + 2⟨ρ̄, E u⟩ ds
//! ```
//!
//! plus `ε E ∫ |u|² ds` for the perturbed cost. Mean terms use the
//! deterministic mean trajectory of the ensemble, so the standard error only
//! reflects the path-dependent terms.
//!
//! Time integrals use the left-point rule on the simulation grid: the
//! Euler–Maruyama scheme holds the control at `u(s_i)` over `[s_i, s_{i+1})`,
//! and the left-point sum is the exact integral of that piecewise-constant
//! control.

use crate::error::{Error, Result};
use crate::matcore::{row_major, Matrix, Vector};
use crate::problem::{ProblemSpec, TimeGrid};
use crate::riccati::CoeffSource;
use crate::simulate::PathEnsemble;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CostComponents {
    pub terminal_stochastic: f64,
    pub terminal_mean: f64,
    pub running_stochastic: f64,
    pub running_mean: f64,
    pub epsilon_penalty: f64,
}

impl CostComponents {
    pub fn total(&self) -> f64 {
        self.terminal_stochastic
            + self.terminal_mean
            + self.running_stochastic
            + self.running_mean
            + self.epsilon_penalty
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostEstimate {
    pub value: f64,
    pub stderr: f64,
    pub n_paths: usize,
    pub components: CostComponents,
}

/// Path-dependent part of the cost for one path.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct PathTerms {
    pub terminal: f64,
    pub running: f64,
    /// `∫ |u|² ds`
    pub control_sq: f64,
}

/// Cost weights on the grid nodes, row-major.
pub(crate) struct CostWeights {
    grid: TimeGrid,
    n: usize,
    m: usize,
    g: Vec<f64>,
    g_lin: Vec<f64>,
    q: Vec<f64>,
    s: Vec<f64>,
    r: Vec<f64>,
    q_lin: Vec<f64>,
    rho: Vec<f64>,
    /// All of `q, s, r, q_lin, rho` vanish.
    no_running: bool,
    g_bar: Matrix,
    g_lin_bar: Vector,
    q_bar: Vec<Matrix>,
    s_bar: Vec<Matrix>,
    r_bar: Vec<Matrix>,
    q_lin_bar: Vec<Vector>,
    rho_bar: Vec<Vector>,
}

fn quad(a: &[f64], x: &[f64], y: &[f64]) -> f64 {
    // ⟨a x, y⟩ with a row-major, dims y.len() x x.len()
    let c = x.len();
    let mut acc = 0.0;
    for (i, yi) in y.iter().enumerate() {
        let row = &a[i * c..(i + 1) * c];
        let mut r = 0.0;
        for (aij, xj) in row.iter().zip(x) {
            r += aij * xj;
        }
        acc += r * yi;
    }
    acc
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl CostWeights {
    pub(crate) fn new(spec: &ProblemSpec, grid: TimeGrid) -> Result<Self> {
        let coeffs = CoeffSource::new(spec)?;
        let (n, m) = (spec.n, spec.m);
        let mut w = CostWeights {
            grid,
            n,
            m,
            g: row_major(&spec.g),
            g_lin: spec.g_lin.as_slice().to_vec(),
            q: Vec::new(),
            s: Vec::new(),
            r: Vec::new(),
            q_lin: Vec::new(),
            rho: Vec::new(),
            no_running: false,
            g_bar: spec.g_bar.clone(),
            g_lin_bar: spec.g_lin_bar.clone(),
            q_bar: Vec::new(),
            s_bar: Vec::new(),
            r_bar: Vec::new(),
            q_lin_bar: Vec::new(),
            rho_bar: Vec::new(),
        };
        for i in 0..grid.n_steps {
            let k = coeffs.at(grid.time(i))?;
            w.q.extend(row_major(&k.q));
            w.s.extend(row_major(&k.s));
            w.r.extend(row_major(&k.r));
            w.q_lin.extend(k.q_lin.iter());
            w.rho.extend(k.rho.iter());
            w.q_bar.push(k.q_bar.clone());
            w.s_bar.push(k.s_bar.clone());
            w.r_bar.push(k.r_bar.clone());
            w.q_lin_bar
                .push(Vector::from_column_slice(k.q_lin_bar.as_slice()));
            w.rho_bar
                .push(Vector::from_column_slice(k.rho_bar.as_slice()));
        }
        w.no_running = [&w.q, &w.s, &w.r, &w.q_lin, &w.rho]
            .iter()
            .all(|v| v.iter().all(|&x| x == 0.0));
        Ok(w)
    }

    /// Terms of one path given its states and controls on all nodes.
    pub(crate) fn path_terms(&self, x: &[f64], u: &[f64]) -> PathTerms {
        let (n, m) = (self.n, self.m);
        let steps = self.grid.n_steps;
        let h = self.grid.step();
        let xt = &x[steps * n..(steps + 1) * n];
        let terminal = quad(&self.g, xt, xt) + 2.0 * dot(&self.g_lin, xt);
        let mut running = 0.0;
        let mut control_sq = 0.0;
        if self.no_running {
            control_sq = u[..steps * m].iter().map(|v| v * v).sum();
            return PathTerms {
                terminal,
                running: 0.0,
                control_sq: control_sq * h,
            };
        }
        for i in 0..steps {
            let xi = &x[i * n..(i + 1) * n];
            let ui = &u[i * m..(i + 1) * m];
            running += quad(&self.q[i * n * n..(i + 1) * n * n], xi, xi)
                + 2.0 * quad(&self.s[i * m * n..(i + 1) * m * n], xi, ui)
                + quad(&self.r[i * m * m..(i + 1) * m * m], ui, ui)
                + 2.0 * dot(&self.q_lin[i * n..(i + 1) * n], xi)
                + 2.0 * dot(&self.rho[i * m..(i + 1) * m], ui);
            control_sq += dot(ui, ui);
        }
        PathTerms {
            terminal,
            running: running * h,
            control_sq: control_sq * h,
        }
    }

    /// `(terminal, running)` mean-field terms.
    pub(crate) fn mean_terms(&self, mean_x: &[Vector], mean_u: &[Vector]) -> (f64, f64) {
        let steps = self.grid.n_steps;
        let mt = &mean_x[steps];
        let terminal = (&self.g_bar * mt).dot(mt) + 2.0 * self.g_lin_bar.dot(mt);
        let mut running = 0.0;
        for i in 0..steps {
            let (mx, mu) = (&mean_x[i], &mean_u[i]);
            running += (&self.q_bar[i] * mx).dot(mx)
                + 2.0 * (&self.s_bar[i] * mx).dot(mu)
                + (&self.r_bar[i] * mu).dot(mu)
                + 2.0 * self.q_lin_bar[i].dot(mx)
                + 2.0 * self.rho_bar[i].dot(mu);
        }
        (terminal, running * self.grid.step())
    }
}

/// Running mean and variance (Welford), combined in a fixed order.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Moments {
    pub count: usize,
    pub mean: f64,
    m2: f64,
}

impl Moments {
    pub(crate) fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub(crate) fn merge(&mut self, other: &Moments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let d = other.mean - self.mean;
        self.mean += d * other.count as f64 / n;
        self.m2 += other.m2 + d * d * self.count as f64 * other.count as f64 / n;
        self.count += other.count;
    }

    pub(crate) fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.m2 / (self.count - 1) as f64).max(0.0)
        }
    }

    pub(crate) fn stderr(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }
}

/// Accumulated path terms for one control family.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct CostAccumulator {
    pub epsilon: f64,
    pub terminal: Moments,
    pub running: Moments,
    pub control_sq: Moments,
    /// `terminal + running` per path.
    pub plain: Moments,
    /// `terminal + running + ε control_sq` per path.
    pub perturbed: Moments,
}

impl CostAccumulator {
    pub(crate) fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            ..Self::default()
        }
    }

    pub(crate) fn push(&mut self, t: &PathTerms) {
        self.terminal.push(t.terminal);
        self.running.push(t.running);
        self.control_sq.push(t.control_sq);
        self.plain.push(t.terminal + t.running);
        self.perturbed
            .push(t.terminal + t.running + self.epsilon * t.control_sq);
    }

    pub(crate) fn merge(&mut self, o: &CostAccumulator) {
        self.terminal.merge(&o.terminal);
        self.running.merge(&o.running);
        self.control_sq.merge(&o.control_sq);
        self.plain.merge(&o.plain);
        self.perturbed.merge(&o.perturbed);
    }

    /// `J_ε` when `with_penalty`, else `J`.
    pub(crate) fn estimate(&self, mean_terms: (f64, f64), with_penalty: bool) -> CostEstimate {
        let components = CostComponents {
            terminal_stochastic: self.terminal.mean,
            terminal_mean: mean_terms.0,
            running_stochastic: self.running.mean,
            running_mean: mean_terms.1,
            epsilon_penalty: if with_penalty {
                self.epsilon * self.control_sq.mean
            } else {
                0.0
            },
        };
        let spread = if with_penalty {
            &self.perturbed
        } else {
            &self.plain
        };
        CostEstimate {
            value: components.total(),
            stderr: spread.stderr(),
            n_paths: spread.count,
            components,
        }
    }
}

fn check_grid(spec: &ProblemSpec, ens: &PathEnsemble) -> Result<()> {
    if ens.grid != spec.grid {
        return Err(Error::GridMismatch(format!(
            "ensemble grid [{}, {}]/{} differs from the problem grid [{}, {}]/{}",
            ens.grid.t0,
            ens.grid.t1,
            ens.grid.n_steps,
            spec.grid.t0,
            spec.grid.t1,
            spec.grid.n_steps
        )));
    }
    if ens.n != spec.n || ens.m != spec.m {
        return Err(Error::Dimension(
            "ensemble and problem dimensions differ".into(),
        ));
    }
    Ok(())
}

/// `J_ε` on an ensemble; `epsilon = 0` gives `J`.
pub fn evaluate_cost(spec: &ProblemSpec, ens: &PathEnsemble, epsilon: f64) -> Result<CostEstimate> {
    if epsilon.is_nan() || epsilon < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be >= 0, got {epsilon}"
        )));
    }
    check_grid(spec, ens)?;
    let w = CostWeights::new(spec, ens.grid)?;
    let len = ens.grid.len();
    let mut acc = CostAccumulator::new(epsilon);
    for p in 0..ens.n_paths {
        let x = &ens.x[p * len * ens.n..(p + 1) * len * ens.n];
        let u = &ens.u[p * len * ens.m..(p + 1) * len * ens.m];
        acc.push(&w.path_terms(x, u));
    }
    Ok(acc.estimate(w.mean_terms(&ens.mean_x, &ens.mean_u), true))
}

/// Per-path controls on the nodes `i0..=i1` of a grid.
#[derive(Debug, Clone, Copy)]
pub struct ControlPaths<'a> {
    pub grid: TimeGrid,
    pub m: usize,
    pub n_paths: usize,
    /// `n_paths * grid.len() * m` values, path-major.
    pub values: &'a [f64],
    pub i0: usize,
    pub i1: usize,
}

impl<'a> ControlPaths<'a> {
    pub fn of(ens: &'a PathEnsemble) -> Self {
        Self {
            grid: ens.grid,
            m: ens.m,
            n_paths: ens.n_paths,
            values: &ens.u,
            i0: 0,
            i1: ens.grid.n_steps,
        }
    }

    /// The same family restricted to `[t_lo, t_hi]`, which must be grid nodes.
    pub fn window(self, t_lo: f64, t_hi: f64) -> Result<Self> {
        let i0 = self.grid.index_of(t_lo)?;
        let i1 = self.grid.index_of(t_hi)?;
        if i0 >= i1 {
            return Err(Error::InvalidArgument(format!(
                "empty window [{t_lo}, {t_hi}]"
            )));
        }
        Ok(Self { i0, i1, ..self })
    }

    fn row(&self, p: usize, i: usize) -> &[f64] {
        let base = (p * self.grid.len() + i) * self.m;
        &self.values[base..base + self.m]
    }
}

/// `(E ∫ |u|² ds)^{1/2}` over the family's window.
pub fn l2_norm_control(u: &ControlPaths<'_>) -> f64 {
    let h = u.grid.step();
    let mut total = 0.0;
    for p in 0..u.n_paths {
        let mut s = 0.0;
        for i in u.i0..u.i1 {
            s += u.row(p, i).iter().map(|x| x * x).sum::<f64>();
        }
        total += s * h;
    }
    (total / u.n_paths as f64).sqrt()
}

/// `(E ∫ |u1 − u2|² ds)^{1/2}` for two families on the same grid and paths.
pub fn l2_distance(u1: &ControlPaths<'_>, u2: &ControlPaths<'_>) -> Result<f64> {
    if u1.grid != u2.grid
        || u1.m != u2.m
        || u1.n_paths != u2.n_paths
        || u1.i0 != u2.i0
        || u1.i1 != u2.i1
    {
        return Err(Error::GridMismatch(
            "control families are not comparable".into(),
        ));
    }
    let h = u1.grid.step();
    let mut total = 0.0;
    for p in 0..u1.n_paths {
        let mut s = 0.0;
        for i in u1.i0..u1.i1 {
            s += u1
                .row(p, i)
                .iter()
                .zip(u2.row(p, i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        total += s * h;
    }
    Ok((total / u1.n_paths as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn family(grid: TimeGrid, values: &[f64]) -> ControlPaths<'_> {
        ControlPaths {
            grid,
            m: 1,
            n_paths: 3,
            values,
            i0: 0,
            i1: grid.n_steps,
        }
    }

    #[test]
    fn norms_of_constants() {
        let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let zeros = vec![0.0; 3 * grid.len()];
        let ones = vec![1.0; 3 * grid.len()];
        let (z, o) = (family(grid, &zeros), family(grid, &ones));
        assert_eq!(l2_norm_control(&z), 0.0);
        assert!((l2_norm_control(&o) - 1.0).abs() < 1e-14);
        assert!((l2_distance(&z, &o).unwrap() - 1.0).abs() < 1e-14);
        assert_eq!(l2_distance(&o, &o).unwrap(), 0.0);
        let w = o.window(0.25, 0.75).unwrap();
        assert!((l2_norm_control(&w) - 0.5f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn moments_merge_matches_sequential() {
        let xs: Vec<f64> = (0..100).map(|i| ((i * 37) % 17) as f64 * 0.3).collect();
        let mut all = Moments::default();
        xs.iter().for_each(|&x| all.push(x));
        let mut a = Moments::default();
        let mut b = Moments::default();
        xs[..40].iter().for_each(|&x| a.push(x));
        xs[40..].iter().for_each(|&x| b.push(x));
        a.merge(&b);
        assert!((a.mean - all.mean).abs() < 1e-12);
        assert!((a.variance() - all.variance()).abs() < 1e-12);
    }
}
