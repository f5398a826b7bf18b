//! Closed-loop strategies `u = ΘX + Θ̄ E[X] + v` built from a Riccati solution.
//!
//! Gains and bias are stored on the half-grid (nodes and interval midpoints)
//! so that RK4 integrations downstream see exact midpoint values.

use crate::error::{Error, Result};
use crate::matcore::{pinv, spd_solve, Matrix, Vector};
use crate::problem::{ProblemSpec, TimeGrid};
use crate::riccati::{check_regularity, numerators, CoeffSource, RiccatiSolution};

const REGULARITY_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct FeedbackStrategy {
    pub grid: TimeGrid,
    /// Zero for unperturbed or extracted limit strategies.
    pub epsilon: f64,
    theta: Vec<Matrix>,
    theta_tilde: Vec<Matrix>,
    theta_bar: Vec<Matrix>,
    v: Vec<Vector>,
}

impl FeedbackStrategy {
    /// Strategy from half-grid samples of `Θ`, `Θ̃` and `v`; `Θ̄` is set to `Θ̃ − Θ`.
    pub fn from_half_samples(
        grid: TimeGrid,
        epsilon: f64,
        theta: Vec<Matrix>,
        theta_tilde: Vec<Matrix>,
        v: Vec<Vector>,
    ) -> Result<Self> {
        let len = 2 * grid.n_steps + 1;
        if theta.len() != len || theta_tilde.len() != len || v.len() != len {
            return Err(Error::GridMismatch(format!(
                "strategy samples must have {len} half-grid entries"
            )));
        }
        let shape = theta[0].shape();
        for (k, (a, b)) in theta.iter().zip(&theta_tilde).enumerate() {
            if a.shape() != shape || b.shape() != shape || v[k].len() != shape.0 {
                return Err(Error::Dimension(format!(
                    "strategy sample {k} has inconsistent shape"
                )));
            }
            if a.iter()
                .chain(b.iter())
                .chain(v[k].iter())
                .any(|x| !x.is_finite())
            {
                return Err(Error::NonFinite(format!(
                    "strategy sample at s = {}",
                    grid.half_time(k)
                )));
            }
        }
        let theta_bar = theta_tilde
            .iter()
            .zip(&theta)
            .map(|(t, th)| t - th)
            .collect();
        Ok(Self {
            grid,
            epsilon,
            theta,
            theta_tilde,
            theta_bar,
            v,
        })
    }

    /// `Θ = Θ̄ = 0` with `v` given at every half-node.
    pub fn open_loop(grid: TimeGrid, n: usize, v: Vec<Vector>) -> Result<Self> {
        let m = v.first().map(|x| x.len()).unwrap_or(0);
        let len = v.len();
        Self::from_half_samples(
            grid,
            0.0,
            vec![Matrix::zeros(m, n); len],
            vec![Matrix::zeros(m, n); len],
            v,
        )
    }

    pub fn zero(grid: TimeGrid, n: usize, m: usize) -> Self {
        let len = 2 * grid.n_steps + 1;
        Self::open_loop(grid, n, vec![Vector::zeros(m); len]).expect("zero strategy is valid")
    }

    pub fn control_dim(&self) -> usize {
        self.theta[0].nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.theta[0].ncols()
    }

    pub fn theta(&self, i: usize) -> &Matrix {
        &self.theta[2 * i]
    }

    pub fn theta_tilde(&self, i: usize) -> &Matrix {
        &self.theta_tilde[2 * i]
    }

    pub fn theta_bar(&self, i: usize) -> &Matrix {
        &self.theta_bar[2 * i]
    }

    pub fn v(&self, i: usize) -> &Vector {
        &self.v[2 * i]
    }

    pub fn theta_half(&self, k: usize) -> &Matrix {
        &self.theta[k]
    }

    pub fn theta_tilde_half(&self, k: usize) -> &Matrix {
        &self.theta_tilde[k]
    }

    pub fn theta_bar_half(&self, k: usize) -> &Matrix {
        &self.theta_bar[k]
    }

    pub fn v_half(&self, k: usize) -> &Vector {
        &self.v[k]
    }

    /// The same strategy restricted to a sub-grid with the same step.
    pub fn restrict(&self, sub: &TimeGrid) -> Result<Self> {
        let i0 = self.grid.offset_of(sub)?;
        let range = 2 * i0..=2 * (i0 + sub.n_steps);
        Ok(Self {
            grid: *sub,
            epsilon: self.epsilon,
            theta: self.theta[range.clone()].to_vec(),
            theta_tilde: self.theta_tilde[range.clone()].to_vec(),
            theta_bar: self.theta_bar[range.clone()].to_vec(),
            v: self.v[range].to_vec(),
        })
    }

    /// Linear interpolation of `(Θ, Θ̄, v)` at time `s`.
    pub fn at(&self, s: f64) -> Result<(Matrix, Matrix, Vector)> {
        if !self.grid.contains(s) {
            return Err(Error::OutOfHorizon {
                s,
                t0: self.grid.t0,
                t1: self.grid.t1,
            });
        }
        let hh = 0.5 * self.grid.step();
        let x = ((s - self.grid.t0) / hh).clamp(0.0, (self.theta.len() - 1) as f64);
        let k = (x.floor() as usize).min(self.theta.len() - 2);
        let w = x - k as f64;
        let lerp = |a: &Matrix, b: &Matrix| a * (1.0 - w) + b * w;
        Ok((
            lerp(&self.theta[k], &self.theta[k + 1]),
            lerp(&self.theta_bar[k], &self.theta_bar[k + 1]),
            &self.v[k] * (1.0 - w) + &self.v[k + 1] * w,
        ))
    }
}

/// Adjoint trajectories on the half-grid. The martingale part of `η`
/// vanishes for deterministic data and is not stored.
#[derive(Debug, Clone)]
pub struct AdjointSolution {
    pub grid: TimeGrid,
    eta: Vec<Vector>,
    eta_bar: Vec<Vector>,
}

impl AdjointSolution {
    pub fn eta(&self, i: usize) -> &Vector {
        &self.eta[2 * i]
    }

    pub fn eta_bar(&self, i: usize) -> &Vector {
        &self.eta_bar[2 * i]
    }

    pub fn eta_half(&self, k: usize) -> &Vector {
        &self.eta[k]
    }

    pub fn eta_bar_half(&self, k: usize) -> &Vector {
        &self.eta_bar[k]
    }
}

enum Inverse {
    Exact,
    Pseudo,
}

fn solve_with(
    inv: &Inverse,
    sigma: &Matrix,
    rhs: &Matrix,
    s: f64,
    which: &'static str,
) -> Result<Matrix> {
    match inv {
        Inverse::Exact => spd_solve(sigma, rhs).ok_or(Error::Singular { which, time: s }),
        Inverse::Pseudo => Ok(pinv(sigma, 0.0)? * rhs),
    }
}

fn inverse_kind(sol: &RiccatiSolution, spec: &ProblemSpec) -> Result<Inverse> {
    if sol.epsilon > 0.0 {
        return Ok(Inverse::Exact);
    }
    let verdict = check_regularity(sol, spec, REGULARITY_TOL)?;
    if !verdict.is_regular {
        return Err(Error::NotRegular {
            failures: verdict.failures.len(),
        });
    }
    Ok(Inverse::Pseudo)
}

fn check_grid(spec: &ProblemSpec, sol: &RiccatiSolution) -> Result<()> {
    if sol.grid != spec.grid {
        return Err(Error::GridMismatch(
            "Riccati solution and problem use different grids".into(),
        ));
    }
    Ok(())
}

/// `Θ = −Σ⁻¹N`, `Θ̃ = −Σ̄⁻¹Ñ`, `Θ̄ = Θ̃ − Θ`; `v` is left at zero.
///
/// An unperturbed solution must be regular; its gains use pseudoinverses.
pub fn gains_from_riccati(sol: &RiccatiSolution, spec: &ProblemSpec) -> Result<FeedbackStrategy> {
    check_grid(spec, sol)?;
    let inv = inverse_kind(sol, spec)?;
    let coeffs = CoeffSource::new(spec)?;
    let len = sol.half_len();
    let mut theta = Vec::with_capacity(len);
    let mut theta_tilde = Vec::with_capacity(len);
    for k in 0..len {
        let s = sol.grid.half_time(k);
        let c = coeffs.at(s)?;
        let (n, n_bar) = numerators(&c, sol.p_half(k), sol.pi_half(k));
        theta.push(-solve_with(&inv, sol.sigma_half(k), &n, s, "Sigma")?);
        theta_tilde.push(-solve_with(
            &inv,
            sol.sigma_bar_half(k),
            &n_bar,
            s,
            "SigmaBar",
        )?);
    }
    FeedbackStrategy::from_half_samples(
        sol.grid,
        sol.epsilon,
        theta,
        theta_tilde,
        vec![Vector::zeros(spec.m); len],
    )
}

/// Adjoints `η`, `η̄` for the strategy induced by `sol`.
///
/// They are integrated together with the Riccati pair (see the `riccati`
/// module), using the gains evaluated at the RK4 stage values; this call
/// checks that `gains` belong to `sol` and returns them.
pub fn solve_adjoints(
    spec: &ProblemSpec,
    sol: &RiccatiSolution,
    gains: &FeedbackStrategy,
) -> Result<AdjointSolution> {
    check_grid(spec, sol)?;
    if gains.grid != sol.grid || gains.epsilon != sol.epsilon {
        return Err(Error::GridMismatch(
            "gains were not derived from this Riccati solution".into(),
        ));
    }
    let to_vec = |m: &Matrix| Vector::from_column_slice(m.as_slice());
    let len = sol.half_len();
    Ok(AdjointSolution {
        grid: sol.grid,
        eta: (0..len).map(|k| to_vec(sol.eta_half(k))).collect(),
        eta_bar: (0..len).map(|k| to_vec(sol.eta_bar_half(k))).collect(),
    })
}

/// Bias `v = −Σ̄⁻¹(B̂ᵀη̄ + D̂ᵀPσ + ρ + ρ̄)`.
///
/// The fluctuating part of the general bias vanishes for deterministic data,
/// so `v` is deterministic.
pub fn assemble_v(
    spec: &ProblemSpec,
    sol: &RiccatiSolution,
    gains: &FeedbackStrategy,
    adj: &AdjointSolution,
) -> Result<FeedbackStrategy> {
    check_grid(spec, sol)?;
    if adj.grid != sol.grid || gains.grid != sol.grid {
        return Err(Error::GridMismatch(
            "adjoints, gains and Riccati solution use different grids".into(),
        ));
    }
    let inv = if sol.epsilon > 0.0 {
        Inverse::Exact
    } else {
        Inverse::Pseudo
    };
    let coeffs = CoeffSource::new(spec)?;
    let mut out = gains.clone();
    for k in 0..sol.half_len() {
        let s = sol.grid.half_time(k);
        let c = coeffs.at(s)?;
        let bh = &c.b + &c.b_bar;
        let dh = &c.d + &c.d_bar;
        let eta_bar = Matrix::from_column_slice(spec.n, 1, adj.eta_bar_half(k).as_slice());
        let rhs = bh.transpose() * eta_bar
            + dh.transpose() * sol.p_half(k) * &c.sigma
            + &c.rho
            + &c.rho_bar;
        let v = -solve_with(&inv, sol.sigma_bar_half(k), &rhs, s, "SigmaBar")?;
        out.v[k] = Vector::from_column_slice(v.as_slice());
    }
    Ok(out)
}

/// Gains, adjoints and bias in one call.
pub fn closed_loop_strategy(spec: &ProblemSpec, sol: &RiccatiSolution) -> Result<FeedbackStrategy> {
    let gains = gains_from_riccati(sol, spec)?;
    let adj = solve_adjoints(spec, sol, &gains)?;
    assemble_v(spec, sol, &gains, &adj)
}
