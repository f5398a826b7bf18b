//! Forward simulation of the controlled mean-field SDE
//!
//! ```text
//! dX = (AX + ĀE[X] + Bu + B̄E[u] + b) ds + (CX + C̄E[X] + Du + D̄E[u] + σ) dW
//! ```
//!
//! For linear dynamics the mean solves its own ODE, so `E[X]` is propagated
//! deterministically with RK4 and the paths read their mean-field terms from
//! it. Paths are stepped with Euler–Maruyama.
//!
//! Every control handled here has the form `u = ΘX + Θ̄E[X] + v + w`, where
//! `w` is an optional per-path, mean-zero exogenous term. Closed-loop runs
//! have `w = 0`; open-loop runs have `Θ = Θ̄ = 0`, `v = E[u]` and
//! `w = u − E[u]`.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::feedback::FeedbackStrategy;
use crate::matcore::{gemv_acc, row_major, Vector};
use crate::problem::{InitialLaw, ProblemSpec, TimeGrid};
use crate::riccati::CoeffSource;
use crate::streams;

/// Paths per parallel work item. Results do not depend on it.
pub(crate) const BLOCK: usize = 256;

/// Brownian increments of path `path` on a grid with `n_steps` steps of size `h`.
pub fn brownian_increments(seed: u64, path: usize, n_steps: usize, h: f64) -> Vec<f64> {
    let mut rng = streams::noise_stream(seed, path as u64);
    let sh = h.sqrt();
    (0..n_steps)
        .map(|_| sh * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Initial state of path `path`.
pub fn initial_state(law: &InitialLaw, seed: u64, path: usize) -> Vector {
    law.draw(&mut streams::initial_stream(seed, path as u64))
}

/// RK4 solution of the closed-loop mean equation
/// `m' = (Â + B̂Θ̃) m + B̂ v + b` on the strategy's grid.
pub fn propagate_mean_closed_loop(
    spec: &ProblemSpec,
    strat: &FeedbackStrategy,
    mean0: &Vector,
) -> Result<Vec<Vector>> {
    check_strategy(spec, strat)?;
    if mean0.len() != spec.n {
        return Err(Error::Dimension(format!(
            "initial mean has length {}, expected {}",
            mean0.len(),
            spec.n
        )));
    }
    let grid = strat.grid;
    let coeffs = CoeffSource::new(spec)?;
    let h = grid.step();
    let mut slopes = Vec::with_capacity(2 * grid.n_steps + 1);
    for k in 0..=2 * grid.n_steps {
        let c = coeffs.at(grid.half_time(k))?;
        let bh = &c.b + &c.b_bar;
        let m_mat = &c.a + &c.a_bar + &bh * strat.theta_tilde_half(k);
        let f = bh * strat.v_half(k) + Vector::from_column_slice(c.drift.as_slice());
        slopes.push((m_mat, f));
    }
    let eval = |k: usize, x: &Vector| &slopes[k].0 * x + &slopes[k].1;
    let mut out = Vec::with_capacity(grid.len());
    let mut x = mean0.clone();
    out.push(x.clone());
    for i in 0..grid.n_steps {
        let k1 = eval(2 * i, &x);
        let k2 = eval(2 * i + 1, &(&x + &k1 * (0.5 * h)));
        let k3 = eval(2 * i + 1, &(&x + &k2 * (0.5 * h)));
        let k4 = eval(2 * i + 2, &(&x + &k3 * h));
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "mean at s = {}",
                grid.time(i + 1)
            )));
        }
        out.push(x.clone());
    }
    Ok(out)
}

fn check_strategy(spec: &ProblemSpec, strat: &FeedbackStrategy) -> Result<()> {
    let g = strat.grid;
    if !(spec.grid.contains(g.t0) && spec.grid.contains(g.t1)) {
        return Err(Error::GridMismatch(format!(
            "strategy interval [{}, {}] is outside the horizon [{}, {}]",
            g.t0, g.t1, spec.grid.t0, spec.grid.t1
        )));
    }
    if strat.state_dim() != spec.n || strat.control_dim() != spec.m {
        return Err(Error::Dimension(format!(
            "strategy is {}x{}, problem needs {}x{}",
            strat.control_dim(),
            strat.state_dim(),
            spec.m,
            spec.n
        )));
    }
    Ok(())
}

/// Per-step coefficients of the Euler–Maruyama recursion, row-major.
pub(crate) struct Engine {
    pub(crate) grid: TimeGrid,
    pub(crate) n: usize,
    pub(crate) m: usize,
    /// `A + BΘ` and `C + DΘ` per step.
    kx: Vec<f64>,
    lx: Vec<f64>,
    /// Path-independent drift and diffusion offsets per step.
    c: Vec<f64>,
    d: Vec<f64>,
    /// `B` and `D` per step, for the exogenous term.
    bw: Vec<f64>,
    dw: Vec<f64>,
    /// `Θ` and `Θ̄ E[X] + v` per node (including the last).
    ku: Vec<f64>,
    cu: Vec<f64>,
    pub(crate) mean_x: Vec<Vector>,
    pub(crate) mean_u: Vec<Vector>,
}

impl Engine {
    pub(crate) fn closed_loop(
        spec: &ProblemSpec,
        strat: &FeedbackStrategy,
        mean0: &Vector,
    ) -> Result<Self> {
        let mean_x = propagate_mean_closed_loop(spec, strat, mean0)?;
        Self::build(spec, strat, mean_x)
    }

    fn build(spec: &ProblemSpec, strat: &FeedbackStrategy, mean_x: Vec<Vector>) -> Result<Self> {
        let grid = strat.grid;
        let (n, m) = (spec.n, spec.m);
        let coeffs = CoeffSource::new(spec)?;
        let steps = grid.n_steps;
        let mut e = Engine {
            grid,
            n,
            m,
            kx: Vec::with_capacity(steps * n * n),
            lx: Vec::with_capacity(steps * n * n),
            c: Vec::with_capacity(steps * n),
            d: Vec::with_capacity(steps * n),
            bw: Vec::with_capacity(steps * n * m),
            dw: Vec::with_capacity(steps * n * m),
            ku: Vec::with_capacity((steps + 1) * m * n),
            cu: Vec::with_capacity((steps + 1) * m),
            mean_u: Vec::with_capacity(steps + 1),
            mean_x,
        };
        for i in 0..=steps {
            let k = coeffs.at(grid.time(i))?;
            let th = strat.theta(i);
            let thb = strat.theta_bar(i);
            let v = strat.v(i);
            let mx = &e.mean_x[i];
            let cu = thb * mx + v;
            let mean_u = strat.theta_tilde(i) * mx + v;
            e.ku.extend(row_major(th));
            e.cu.extend(cu.iter());
            if i < steps {
                let kx = &k.a + &k.b * th;
                let lx = &k.c + &k.d * th;
                let c = &k.a_bar * mx
                    + &k.b * &cu
                    + &k.b_bar * &mean_u
                    + Vector::from_column_slice(k.drift.as_slice());
                let d = &k.c_bar * mx
                    + &k.d * &cu
                    + &k.d_bar * &mean_u
                    + Vector::from_column_slice(k.sigma.as_slice());
                e.kx.extend(row_major(&kx));
                e.lx.extend(row_major(&lx));
                e.c.extend(c.iter());
                e.d.extend(d.iter());
                e.bw.extend(row_major(&k.b));
                e.dw.extend(row_major(&k.d));
            }
            e.mean_u.push(mean_u);
        }
        Ok(e)
    }

    /// One Euler–Maruyama path. `w`, when given, holds the exogenous control
    /// term at every node (`(n_steps + 1) * m` values). On a non-finite state
    /// returns the index of the offending node.
    pub(crate) fn run_path(
        &self,
        x0: &[f64],
        dw: &[f64],
        w: Option<&[f64]>,
        x_out: &mut [f64],
        u_out: &mut [f64],
    ) -> std::result::Result<(), usize> {
        let (n, m) = (self.n, self.m);
        let h = self.grid.step();
        let steps = self.grid.n_steps;
        let len = steps + 1;
        let x_out = &mut x_out[..len * n];
        let u_out = &mut u_out[..len * m];
        x_out[..n].copy_from_slice(x0);

        // u = Θx + (Θ̄E[X] + v) + w, node by node
        let control = |x: &[f64], ku: &[f64], cu: &[f64], wi: Option<&[f64]>, u: &mut [f64]| {
            u.copy_from_slice(cu);
            gemv_acc(u, ku, x, 1.0);
            if let Some(wi) = wi {
                for (a, b) in u.iter_mut().zip(wi) {
                    *a += b;
                }
            }
        };

        let steps_iter = self
            .kx
            .chunks_exact(n * n)
            .zip(self.lx.chunks_exact(n * n))
            .zip(self.c.chunks_exact(n).zip(self.d.chunks_exact(n)))
            .zip(self.ku.chunks_exact(m * n).zip(self.cu.chunks_exact(m)))
            .zip(u_out.chunks_exact_mut(m))
            .zip(dw.iter())
            .enumerate();
        for (i, (((((kx, lx), (c, d)), (ku, cu)), u), &dwi)) in steps_iter {
            let (done, rest) = x_out.split_at_mut((i + 1) * n);
            let x = &done[i * n..];
            let wi = w.map(|w| &w[i * m..(i + 1) * m]);
            control(x, ku, cu, wi, u);
            let next = &mut rest[..n];
            for r in 0..n {
                let row = r * n..(r + 1) * n;
                let mut a = c[r];
                let mut b = d[r];
                for ((&k, &l), &xj) in kx[row.clone()].iter().zip(&lx[row]).zip(x) {
                    a += k * xj;
                    b += l * xj;
                }
                if let Some(wi) = wi {
                    let base = i * n * m + r * m;
                    for ((&bw, &dw), &wj) in self.bw[base..base + m]
                        .iter()
                        .zip(&self.dw[base..base + m])
                        .zip(wi)
                    {
                        a += bw * wj;
                        b += dw * wj;
                    }
                }
                next[r] = x[r] + a * h + b * dwi;
            }
        }
        let x_end = &x_out[steps * n..];
        let wi = w.map(|w| &w[steps * m..len * m]);
        control(
            x_end,
            &self.ku[steps * m * n..],
            &self.cu[steps * m..],
            wi,
            &mut u_out[steps * m..],
        );
        // Non-finite values persist under the affine recursion, so checking
        // the end state is enough; the first offending node is located only
        // on failure.
        if x_end.iter().all(|v| v.is_finite()) {
            return Ok(());
        }
        let first = x_out
            .chunks_exact(n)
            .position(|x| x.iter().any(|v| !v.is_finite()))
            .unwrap_or(steps);
        Err(first)
    }
}

/// Per-path control given on the grid nodes, with its mean.
#[derive(Debug, Clone)]
pub struct PathControl {
    /// `n_paths * (n_steps + 1) * m` values, path-major.
    pub values: Vec<f64>,
    /// Deterministic `E[u]` on the half-grid, when known. Otherwise the
    /// ensemble average is used at nodes and interpolated at midpoints.
    pub mean_half: Option<Vec<Vector>>,
}

/// An open-loop control.
#[derive(Debug, Clone)]
pub enum OpenLoopControl {
    /// Deterministic control on the half-grid.
    Deterministic(Vec<Vector>),
    PerPath(PathControl),
}

/// Paths, controls and noise of one simulation.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub grid: TimeGrid,
    pub n: usize,
    pub m: usize,
    pub n_paths: usize,
    pub seed: u64,
    /// `n_paths * n_steps` increments, path-major.
    pub dw: Vec<f64>,
    /// `n_paths * (n_steps + 1) * n` states, path-major then time.
    pub x: Vec<f64>,
    /// `n_paths * (n_steps + 1) * m` controls.
    pub u: Vec<f64>,
    /// ODE-propagated `E[X]` and the matching `E[u]` on the nodes.
    pub mean_x: Vec<Vector>,
    pub mean_u: Vec<Vector>,
    /// True when the control mean had to be estimated from the ensemble.
    pub mean_from_ensemble: bool,
}

impl PathEnsemble {
    pub fn x(&self, p: usize, i: usize) -> &[f64] {
        let base = (p * self.grid.len() + i) * self.n;
        &self.x[base..base + self.n]
    }

    pub fn u(&self, p: usize, i: usize) -> &[f64] {
        let base = (p * self.grid.len() + i) * self.m;
        &self.u[base..base + self.m]
    }

    pub fn increments(&self, p: usize) -> &[f64] {
        &self.dw[p * self.grid.n_steps..(p + 1) * self.grid.n_steps]
    }

    /// Ensemble average and sample standard deviation of `X(s_i)`.
    pub fn state_stats(&self, i: usize) -> (Vector, Vector) {
        stats(
            (0..self.n_paths).map(|p| self.x(p, i)),
            self.n,
            self.n_paths,
        )
    }

    pub fn control_stats(&self, i: usize) -> (Vector, Vector) {
        stats(
            (0..self.n_paths).map(|p| self.u(p, i)),
            self.m,
            self.n_paths,
        )
    }
}

fn stats<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize, count: usize) -> (Vector, Vector) {
    let mut sum = Vector::zeros(dim);
    let mut sq = Vector::zeros(dim);
    for r in rows {
        for j in 0..dim {
            sum[j] += r[j];
            sq[j] += r[j] * r[j];
        }
    }
    let k = count as f64;
    let mean = &sum / k;
    let var = if count > 1 {
        (sq - sum.component_mul(&mean)) / (k - 1.0)
    } else {
        Vector::zeros(dim)
    };
    (mean, var.map(|v| v.max(0.0).sqrt()))
}

fn run_all(
    engine: &Engine,
    law: &InitialLaw,
    n_paths: usize,
    seed: u64,
    w: Option<&[f64]>,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let grid = engine.grid;
    let (n, m) = (engine.n, engine.m);
    let (steps, len) = (grid.n_steps, grid.len());
    let h = grid.step();
    let mut dw = vec![0.0; n_paths * steps];
    let mut x = vec![0.0; n_paths * len * n];
    let mut u = vec![0.0; n_paths * len * m];

    let failures: Vec<(usize, usize)> = dw
        .par_chunks_mut(BLOCK * steps)
        .zip(x.par_chunks_mut(BLOCK * len * n))
        .zip(u.par_chunks_mut(BLOCK * len * m))
        .enumerate()
        .filter_map(|(b, ((dwb, xb), ub))| {
            let count = dwb.len() / steps.max(1);
            for q in 0..count {
                let p = b * BLOCK + q;
                let inc = brownian_increments(seed, p, steps, h);
                dwb[q * steps..(q + 1) * steps].copy_from_slice(&inc);
                let x0 = initial_state(law, seed, p);
                let wp = w.map(|w| &w[p * len * m..(p + 1) * len * m]);
                if let Err(i) = engine.run_path(
                    x0.as_slice(),
                    &inc,
                    wp,
                    &mut xb[q * len * n..(q + 1) * len * n],
                    &mut ub[q * len * m..(q + 1) * len * m],
                ) {
                    return Some((p, i));
                }
            }
            None
        })
        .collect();
    if let Some(&(path, i)) = failures.iter().min() {
        return Err(Error::NonFiniteState {
            time: grid.time(i),
            path,
        });
    }
    Ok((dw, x, u))
}

fn check_paths(n_paths: usize, law: &InitialLaw, n: usize) -> Result<()> {
    if n_paths == 0 {
        return Err(Error::InvalidArgument("n_paths must be at least 1".into()));
    }
    if law.dim() != n {
        return Err(Error::Dimension(format!(
            "initial law has dimension {}, expected {n}",
            law.dim()
        )));
    }
    law.validate()
}

/// Closed-loop ensemble on the strategy's grid.
pub fn simulate_closed_loop(
    spec: &ProblemSpec,
    strat: &FeedbackStrategy,
    law: &InitialLaw,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    check_paths(n_paths, law, spec.n)?;
    let engine = Engine::closed_loop(spec, strat, law.mean())?;
    let (dw, x, u) = run_all(&engine, law, n_paths, seed, None)?;
    Ok(PathEnsemble {
        grid: engine.grid,
        n: spec.n,
        m: spec.m,
        n_paths,
        seed,
        dw,
        x,
        u,
        mean_x: engine.mean_x,
        mean_u: engine.mean_u,
        mean_from_ensemble: false,
    })
}

/// Open-loop ensemble on the problem's grid.
pub fn simulate_open_loop(
    spec: &ProblemSpec,
    control: &OpenLoopControl,
    law: &InitialLaw,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    check_paths(n_paths, law, spec.n)?;
    let grid = spec.grid;
    let (m, len) = (spec.m, grid.len());
    let half = 2 * grid.n_steps + 1;
    let (mean_half, w, from_ensemble) = match control {
        OpenLoopControl::Deterministic(v) => (v.clone(), None, false),
        OpenLoopControl::PerPath(pc) => {
            if pc.values.len() != n_paths * len * m {
                return Err(Error::GridMismatch(format!(
                    "per-path control has {} values, expected {}",
                    pc.values.len(),
                    n_paths * len * m
                )));
            }
            let (mean_half, from_ensemble) = match &pc.mean_half {
                Some(mh) => (mh.clone(), false),
                None => {
                    let nodes: Vec<Vector> = (0..len)
                        .map(|i| {
                            stats(
                                (0..n_paths)
                                    .map(|p| &pc.values[(p * len + i) * m..(p * len + i + 1) * m]),
                                m,
                                n_paths,
                            )
                            .0
                        })
                        .collect();
                    let mh = (0..half)
                        .map(|k| {
                            if k % 2 == 0 {
                                nodes[k / 2].clone()
                            } else {
                                (&nodes[k / 2] + &nodes[k / 2 + 1]) * 0.5
                            }
                        })
                        .collect();
                    (mh, true)
                }
            };
            let mut w = pc.values.clone();
            for p in 0..n_paths {
                for i in 0..len {
                    let base = (p * len + i) * m;
                    for j in 0..m {
                        w[base + j] -= mean_half[2 * i][j];
                    }
                }
            }
            (mean_half, Some(w), from_ensemble)
        }
    };
    if mean_half.len() != half || mean_half.iter().any(|v| v.len() != m) {
        return Err(Error::GridMismatch(format!(
            "open-loop control must have {half} half-grid samples of length {m}"
        )));
    }
    let strat = FeedbackStrategy::open_loop(grid, spec.n, mean_half)?;
    let engine = Engine::closed_loop(spec, &strat, law.mean())?;
    let (dw, x, u) = run_all(&engine, law, n_paths, seed, w.as_deref())?;
    Ok(PathEnsemble {
        grid,
        n: spec.n,
        m,
        n_paths,
        seed,
        dw,
        x,
        u,
        mean_x: engine.mean_x,
        mean_u: engine.mean_u,
        mean_from_ensemble: from_ensemble,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::CoefficientFn;
    use crate::Matrix;

    #[test]
    fn increments_are_reproducible() {
        let a = brownian_increments(11, 4, 100, 0.01);
        let b = brownian_increments(11, 4, 100, 0.01);
        assert_eq!(a, b);
        assert_ne!(a, brownian_increments(11, 5, 100, 0.01));
        assert_ne!(a, brownian_increments(12, 4, 100, 0.01));
    }

    #[test]
    fn zero_problem_keeps_initial_state() {
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let spec = ProblemSpec::zeros(1, 1, grid);
        let law = InitialLaw::two_point(&[0.0], &[1.0], 0.5);
        let ctl = OpenLoopControl::Deterministic(vec![Vector::zeros(1); 21]);
        let ens = simulate_open_loop(&spec, &ctl, &law, 5, 1).unwrap();
        for p in 0..5 {
            let x0 = ens.x(p, 0)[0];
            assert!(x0 == 1.0 || x0 == -1.0);
            for i in 0..=10 {
                assert_eq!(ens.x(p, i)[0], x0);
            }
        }
    }

    #[test]
    fn degenerate_diffusion_paths_follow_euler_recursion() {
        let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let mut spec = ProblemSpec::zeros(1, 1, grid);
        spec.a = CoefficientFn::scalar(0.5);
        spec.a_bar = CoefficientFn::scalar(-0.2);
        spec.drift = CoefficientFn::constant_vector(&[0.3]);
        let law = InitialLaw::deterministic(&[1.0]);
        let strat = FeedbackStrategy::zero(grid, 1, 1);
        let ens = simulate_closed_loop(&spec, &strat, &law, 3, 5).unwrap();
        // x_{i+1} = x_i + h (0.5 x_i - 0.2 m_i + 0.3) with the RK4 mean m_i,
        // which itself solves m' = 0.3 m + 0.3.
        let h = grid.step();
        let mut x = 1.0;
        for i in 0..=50 {
            let s = grid.time(i);
            let exact = 2.0 * (0.3 * s).exp() - 1.0;
            assert!((ens.mean_x[i][0] - exact).abs() < 1e-9);
            for p in 0..3 {
                assert!((ens.x(p, i)[0] - x).abs() < 1e-13);
            }
            x += h * (0.5 * x - 0.2 * ens.mean_x[i][0] + 0.3);
        }
    }

    #[test]
    fn non_finite_state_is_reported() {
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let mut spec = ProblemSpec::zeros(1, 1, grid);
        spec.a = CoefficientFn::scalar(1e308);
        let law = InitialLaw::deterministic(&[1e10]);
        let strat = FeedbackStrategy::zero(grid, 1, 1);
        // the mean ODE overflows first
        assert!(simulate_closed_loop(&spec, &strat, &law, 2, 0).is_err());
    }

    #[test]
    fn per_path_mean_estimated_when_missing() {
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let mut spec = ProblemSpec::zeros(1, 1, grid);
        spec.b = CoefficientFn::Constant(Matrix::from_element(1, 1, 1.0));
        let law = InitialLaw::deterministic(&[0.0]);
        let values: Vec<f64> = (0..2).flat_map(|p| vec![p as f64; 5]).collect();
        let ctl = OpenLoopControl::PerPath(PathControl {
            values,
            mean_half: None,
        });
        let ens = simulate_open_loop(&spec, &ctl, &law, 2, 0).unwrap();
        assert!(ens.mean_from_ensemble);
        assert_eq!(ens.mean_u[2][0], 0.5);
        // path 1 drifts at rate 1
        assert!((ens.x(1, 4)[0] - 1.0).abs() < 1e-15);
        assert_eq!(ens.x(0, 4)[0], 0.0);
    }
}
