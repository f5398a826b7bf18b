//! Backward integration of the coupled Riccati pair `(P, Π)`.
//!
//! ```text
//! P' + PA + AᵀP + CᵀPC + Q − Nᵀ Σ⁻¹ N = 0,            P(T) = G
//! Π' + ΠÂ + ÂᵀΠ + Q̂ + ĈᵀPĈ − Ñᵀ Σ̄⁻¹ Ñ = 0,           Π(T) = G + Ḡ
//!
//! N = BᵀP + DᵀPC + S,          Σ = R + εI + DᵀPD
//! Ñ = B̂ᵀΠ + D̂ᵀPĈ + Ŝ,          Σ̄ = R̂ + εI + D̂ᵀPD̂
//! ```
//!
//! where a hat denotes the sum of a coefficient and its mean-field partner
//! (`Â = A + Ā`, ...). With `ε = 0` the inverses become pseudoinverses.
//!
//! The pair is integrated jointly with classical RK4: `P` does not depend on
//! `Π`, so the joint sweep computes exactly the same `P` as a separate pass.
//! The two linear adjoint equations of the closed-loop synthesis (driven by
//! the nonhomogeneous terms) ride along in the same sweep:
//!
//! ```text
//! η' + (A+BΘ)ᵀη + (C+DΘ)ᵀPσ + Θᵀρ + Pb + q = 0,                      η(T) = g
//! η̄' + (Â+B̂Θ̃)ᵀη̄ + Θ̃ᵀ(D̂ᵀPσ + ρ + ρ̄) + ĈᵀPσ + q + q̄ + Πb = 0,        η̄(T) = g + ḡ
//! ```
//!
//! with `Θ = −Σ⁻¹N`, `Θ̃ = −Σ̄⁻¹Ñ`. Their stiffness is that of the gains, so
//! they need the same substeps as the Riccati pair.
//!
//! Each grid interval is split into an even number of equal substeps sized
//! from a local stiffness estimate, and the solution is stored at grid nodes
//! and interval midpoints.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::matcore::{min_eigenvalue, pinv, range_condition, spd_solve, symmetrize, Matrix};
use crate::problem::{CoefficientFn, Coefficients, ProblemSpec, TimeGrid};

/// How many RK4 substeps to take per grid interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Substeps {
    /// `2j` substeps with `j = ceil(h·L / (2 theta))`, clamped to `[1, max]`,
    /// where `L` bounds the Lipschitz constant of the right-hand side at the
    /// start of the interval. Each substep then satisfies `h_sub·L ≤ theta`.
    Auto { theta: f64, max: usize },
    /// Exactly `2j` substeps per interval.
    Fixed(usize),
}

#[derive(Debug, Clone, Copy)]
pub struct RiccatiOptions {
    pub substeps: Substeps,
    /// Largest admissible Frobenius norm of `P` or `Π`.
    pub blowup_cap: f64,
    /// `Σ` and `Σ̄` must keep their smallest eigenvalue above `margin_fraction · ε`.
    pub margin_fraction: f64,
}

impl Default for RiccatiOptions {
    fn default() -> Self {
        Self {
            substeps: Substeps::Auto {
                theta: 0.02,
                max: 1 << 14,
            },
            blowup_cap: 1e8,
            margin_fraction: 0.5,
        }
    }
}

/// `(P, Π)` with `Σ`, `Σ̄` on the grid nodes and interval midpoints.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub grid: TimeGrid,
    /// Zero for the unperturbed equation.
    pub epsilon: f64,
    p: Vec<Matrix>,
    pi: Vec<Matrix>,
    sigma: Vec<Matrix>,
    sigma_bar: Vec<Matrix>,
    eta: Vec<Matrix>,
    eta_bar: Vec<Matrix>,
}

impl RiccatiSolution {
    pub fn p(&self, i: usize) -> &Matrix {
        &self.p[2 * i]
    }

    pub fn pi(&self, i: usize) -> &Matrix {
        &self.pi[2 * i]
    }

    pub fn sigma(&self, i: usize) -> &Matrix {
        &self.sigma[2 * i]
    }

    pub fn sigma_bar(&self, i: usize) -> &Matrix {
        &self.sigma_bar[2 * i]
    }

    /// Values at half-node `k` (even `k` are grid nodes, odd `k` midpoints).
    pub fn p_half(&self, k: usize) -> &Matrix {
        &self.p[k]
    }

    pub fn pi_half(&self, k: usize) -> &Matrix {
        &self.pi[k]
    }

    pub fn sigma_half(&self, k: usize) -> &Matrix {
        &self.sigma[k]
    }

    pub fn sigma_bar_half(&self, k: usize) -> &Matrix {
        &self.sigma_bar[k]
    }

    /// Adjoint `η` at half-node `k`, as an `n x 1` matrix.
    pub fn eta_half(&self, k: usize) -> &Matrix {
        &self.eta[k]
    }

    pub fn eta_bar_half(&self, k: usize) -> &Matrix {
        &self.eta_bar[k]
    }

    pub fn half_len(&self) -> usize {
        self.p.len()
    }

    pub fn is_perturbed(&self) -> bool {
        self.epsilon > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    P,
    Pi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureReason {
    RangeCondition,
    NotPsd,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularityFailure {
    pub time: f64,
    pub block: Block,
    pub reason: FailureReason,
}

#[derive(Debug, Clone)]
pub struct RegularityVerdict {
    pub is_regular: bool,
    pub failures: Vec<RegularityFailure>,
}

impl RegularityVerdict {
    pub fn count(&self, block: Block, reason: FailureReason) -> usize {
        self.failures
            .iter()
            .filter(|f| f.block == block && f.reason == reason)
            .count()
    }
}

/// Perturbed pair for `epsilon > 0`, using true inverses of `Σ`, `Σ̄`.
pub fn solve_perturbed(spec: &ProblemSpec, epsilon: f64) -> Result<RiccatiSolution> {
    solve_perturbed_with(spec, epsilon, &RiccatiOptions::default())
}

pub fn solve_perturbed_with(
    spec: &ProblemSpec,
    epsilon: f64,
    opts: &RiccatiOptions,
) -> Result<RiccatiSolution> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "perturbed Riccati solve needs epsilon > 0, got {epsilon}"
        )));
    }
    integrate(spec, epsilon, opts)
}

/// Unperturbed pair with pseudoinverses of `Σ`, `Σ̄`.
pub fn solve_gre(spec: &ProblemSpec) -> Result<RiccatiSolution> {
    solve_gre_with(spec, &RiccatiOptions::default())
}

pub fn solve_gre_with(spec: &ProblemSpec, opts: &RiccatiOptions) -> Result<RiccatiSolution> {
    integrate(spec, 0.0, opts)
}

/// Range and definiteness test of both blocks at every grid node.
pub fn check_regularity(
    sol: &RiccatiSolution,
    spec: &ProblemSpec,
    tol: f64,
) -> Result<RegularityVerdict> {
    if sol.epsilon != 0.0 {
        return Err(Error::InvalidArgument(
            "regularity is defined for the unperturbed solution (epsilon = 0)".into(),
        ));
    }
    if sol.grid != spec.grid {
        return Err(Error::GridMismatch(
            "Riccati solution and problem use different grids".into(),
        ));
    }
    let mut failures = Vec::new();
    for i in 0..sol.grid.len() {
        let s = sol.grid.time(i);
        let k = spec.at(s)?;
        let (n, n_bar) = numerators(&k, sol.p(i), sol.pi(i));
        for (block, sigma, num) in [
            (Block::P, sol.sigma(i), &n),
            (Block::Pi, sol.sigma_bar(i), &n_bar),
        ] {
            if !range_condition(sigma, num, tol)? {
                failures.push(RegularityFailure {
                    time: s,
                    block,
                    reason: FailureReason::RangeCondition,
                });
            }
            if min_eigenvalue(sigma)? < -tol * (1.0 + sigma.norm()) {
                failures.push(RegularityFailure {
                    time: s,
                    block,
                    reason: FailureReason::NotPsd,
                });
            }
        }
    }
    Ok(RegularityVerdict {
        is_regular: failures.is_empty(),
        failures,
    })
}

/// `N = BᵀP + DᵀPC + S` and `Ñ = B̂ᵀΠ + D̂ᵀPĈ + Ŝ`.
pub(crate) fn numerators(k: &Coefficients, p: &Matrix, pi: &Matrix) -> (Matrix, Matrix) {
    let bh = &k.b + &k.b_bar;
    let ch = &k.c + &k.c_bar;
    let dh = &k.d + &k.d_bar;
    let n = k.b.transpose() * p + k.d.transpose() * p * &k.c + &k.s;
    let n_bar = bh.transpose() * pi + dh.transpose() * p * ch + &k.s + &k.s_bar;
    (n, n_bar)
}

/// `Σ = R + εI + DᵀPD` and `Σ̄ = R + R̄ + εI + D̂ᵀPD̂`.
pub(crate) fn weights(k: &Coefficients, p: &Matrix, epsilon: f64) -> (Matrix, Matrix) {
    let m = k.r.nrows();
    let dh = &k.d + &k.d_bar;
    let eye = Matrix::identity(m, m) * epsilon;
    let sigma = symmetrize(&(&k.r + &eye + k.d.transpose() * p * &k.d));
    let sigma_bar = symmetrize(&(&k.r + &k.r_bar + &eye + dh.transpose() * p * dh));
    (sigma, sigma_bar)
}

/// Coefficient lookup that evaluates once when every coefficient is constant.
pub(crate) struct CoeffSource<'a> {
    spec: &'a ProblemSpec,
    frozen: Option<Coefficients>,
}

impl<'a> CoeffSource<'a> {
    pub(crate) fn new(spec: &'a ProblemSpec) -> Result<Self> {
        let all_constant = [
            &spec.a,
            &spec.a_bar,
            &spec.b,
            &spec.b_bar,
            &spec.c,
            &spec.c_bar,
            &spec.d,
            &spec.d_bar,
            &spec.drift,
            &spec.sigma,
            &spec.q,
            &spec.q_bar,
            &spec.s,
            &spec.s_bar,
            &spec.r,
            &spec.r_bar,
            &spec.q_lin,
            &spec.q_lin_bar,
            &spec.rho,
            &spec.rho_bar,
        ]
        .iter()
        .all(|f: &&CoefficientFn| f.is_constant());
        let frozen = if all_constant {
            Some(spec.at(spec.grid.t0)?)
        } else {
            None
        };
        Ok(Self { spec, frozen })
    }

    pub(crate) fn at(&self, s: f64) -> Result<Cow<'_, Coefficients>> {
        match &self.frozen {
            Some(k) => Ok(Cow::Borrowed(k)),
            None => Ok(Cow::Owned(self.spec.at(s)?)),
        }
    }
}

struct Rhs<'a> {
    coeffs: CoeffSource<'a>,
    epsilon: f64,
    margin: f64,
}

#[derive(Clone)]
struct State {
    p: Matrix,
    pi: Matrix,
    eta: Matrix,
    eta_bar: Matrix,
}

impl State {
    /// `self + h * slope`.
    fn advanced(&self, slope: &Slope, h: f64) -> State {
        State {
            p: &self.p + &slope.dp * h,
            pi: &self.pi + &slope.dpi * h,
            eta: &self.eta + &slope.deta * h,
            eta_bar: &self.eta_bar + &slope.deta_bar * h,
        }
    }
}

struct Slope {
    dp: Matrix,
    dpi: Matrix,
    deta: Matrix,
    deta_bar: Matrix,
    /// Bound on the Lipschitz constant of the right-hand side.
    lip: f64,
}

impl Rhs<'_> {
    /// Solve `Σ X = N`, with the convexity margin check when perturbed.
    fn gain_factor(
        &self,
        sigma: &Matrix,
        num: &Matrix,
        s: f64,
        which: &'static str,
    ) -> Result<Matrix> {
        if self.epsilon == 0.0 {
            return Ok(pinv(sigma, 0.0)? * num);
        }
        let min_eig = min_eigenvalue(sigma)?;
        if min_eig < self.margin {
            return Err(Error::ConvexityLoss {
                epsilon: self.epsilon,
                time: s,
                which,
                min_eig,
            });
        }
        spd_solve(sigma, num).ok_or(Error::ConvexityLoss {
            epsilon: self.epsilon,
            time: s,
            which,
            min_eig,
        })
    }

    /// Time derivatives of the whole backward system at `s`.
    fn eval(&self, s: f64, x: &State) -> Result<Slope> {
        let (p, pi) = (&x.p, &x.pi);
        let k = self.coeffs.at(s)?;
        let (n, n_bar) = numerators(&k, p, pi);
        let (sigma, sigma_bar) = weights(&k, p, self.epsilon);
        let kp = self.gain_factor(&sigma, &n, s, "Sigma")?;
        let kpi = self.gain_factor(&sigma_bar, &n_bar, s, "SigmaBar")?;

        let ah = &k.a + &k.a_bar;
        let ch = &k.c + &k.c_bar;
        let qh = &k.q + &k.q_bar;

        let fp = p * &k.a + k.a.transpose() * p + k.c.transpose() * p * &k.c + &k.q
            - n.transpose() * &kp;
        let fpi = pi * &ah + ah.transpose() * pi + qh + ch.transpose() * p * &ch
            - n_bar.transpose() * &kpi;

        // Linearization: δP ↦ (A+BΘ)ᵀδP + δP(A+BΘ) + (C+DΘ)ᵀδP(C+DΘ), Θ = −Σ⁻¹N,
        // and similarly for Π with the hatted closed-loop drift.
        let bh = &k.b + &k.b_bar;
        let cl_a = &k.a - &k.b * &kp;
        let cl_c = &k.c - &k.d * &kp;
        let cl_ah = &ah - bh * &kpi;
        let lip = 2.0 * cl_a.norm() + cl_c.norm_squared() + 2.0 * cl_ah.norm();

        // adjoints, with Θ = −kp and Θ̃ = −kpi
        let dh = &k.d + &k.d_bar;
        let p_sigma = p * &k.sigma;
        let feta = cl_a.transpose() * &x.eta + cl_c.transpose() * &p_sigma
            - kp.transpose() * &k.rho
            + p * &k.drift
            + &k.q_lin;
        let feta_bar = cl_ah.transpose() * &x.eta_bar
            - kpi.transpose() * (dh.transpose() * &p_sigma + &k.rho + &k.rho_bar)
            + ch.transpose() * &p_sigma
            + &k.q_lin
            + &k.q_lin_bar
            + pi * &k.drift;

        Ok(Slope {
            dp: -fp,
            dpi: -fpi,
            deta: -feta,
            deta_bar: -feta_bar,
            lip,
        })
    }
}

fn integrate(spec: &ProblemSpec, epsilon: f64, opts: &RiccatiOptions) -> Result<RiccatiSolution> {
    let grid = spec.grid;
    let rhs = Rhs {
        coeffs: CoeffSource::new(spec)?,
        epsilon,
        margin: opts.margin_fraction * epsilon,
    };
    let n_half = 2 * grid.n_steps + 1;
    let mut store: Vec<Option<State>> = (0..n_half).map(|_| None).collect();

    let g_lin = Matrix::from_column_slice(spec.n, 1, spec.g_lin.as_slice());
    let g_lin_bar = Matrix::from_column_slice(spec.n, 1, spec.g_lin_bar.as_slice());
    let mut x = State {
        p: spec.g.clone(),
        pi: &spec.g + &spec.g_bar,
        eta: g_lin.clone(),
        eta_bar: g_lin + g_lin_bar,
    };
    store[n_half - 1] = Some(x.clone());

    let h = grid.step();
    for i in (0..grid.n_steps).rev() {
        let s_hi = grid.time(i + 1);
        let s_lo = grid.time(i);
        let j = match opts.substeps {
            Substeps::Fixed(j) => j.max(1),
            Substeps::Auto { theta, max } => {
                let lip = rhs.eval(s_hi, &x)?.lip;
                let j = (h * lip / (2.0 * theta)).ceil();
                if j.is_finite() {
                    (j as usize).clamp(1, max.max(1))
                } else {
                    max.max(1)
                }
            }
        };
        let hs = h / (2 * j) as f64;
        for sub in 0..2 * j {
            // one step from s to s - hs
            let s = if sub == 0 {
                s_hi
            } else {
                s_hi - sub as f64 * hs
            };
            let s_mid = s - 0.5 * hs;
            let s_end = if sub + 1 == 2 * j { s_lo } else { s - hs };
            let k1 = rhs.eval(s, &x)?;
            let k2 = rhs.eval(s_mid, &x.advanced(&k1, -0.5 * hs))?;
            let k3 = rhs.eval(s_mid, &x.advanced(&k2, -0.5 * hs))?;
            let k4 = rhs.eval(s_end, &x.advanced(&k3, -hs))?;
            let w = -hs / 6.0;
            x = State {
                p: symmetrize(&(&x.p + (k1.dp + k2.dp * 2.0 + k3.dp * 2.0 + k4.dp) * w)),
                pi: symmetrize(&(&x.pi + (k1.dpi + k2.dpi * 2.0 + k3.dpi * 2.0 + k4.dpi) * w)),
                eta: &x.eta + (k1.deta + k2.deta * 2.0 + k3.deta * 2.0 + k4.deta) * w,
                eta_bar: &x.eta_bar
                    + (k1.deta_bar + k2.deta_bar * 2.0 + k3.deta_bar * 2.0 + k4.deta_bar) * w,
            };

            let norm = x.p.norm().max(x.pi.norm());
            if !norm.is_finite() || norm > opts.blowup_cap {
                return Err(Error::BlowUp {
                    epsilon,
                    time: s_end,
                    norm,
                });
            }
            if !(x.eta.norm() + x.eta_bar.norm()).is_finite() {
                return Err(Error::NonFinite(format!("adjoint at s = {s_end}")));
            }
            if sub + 1 == j {
                store[2 * i + 1] = Some(x.clone());
            }
        }
        store[2 * i] = Some(x.clone());
    }

    let mut out = RiccatiSolution {
        grid,
        epsilon,
        p: Vec::with_capacity(n_half),
        pi: Vec::with_capacity(n_half),
        sigma: Vec::with_capacity(n_half),
        sigma_bar: Vec::with_capacity(n_half),
        eta: Vec::with_capacity(n_half),
        eta_bar: Vec::with_capacity(n_half),
    };
    for (k, st) in store.into_iter().enumerate() {
        let st = st.expect("every half-node is visited");
        let c = rhs.coeffs.at(grid.half_time(k))?;
        let (sg, sgb) = weights(&c, &st.p, epsilon);
        out.sigma.push(sg);
        out.sigma_bar.push(sgb);
        out.p.push(st.p);
        out.pi.push(st.pi);
        out.eta.push(st.eta);
        out.eta_bar.push(st.eta_bar);
    }
    Ok(out)
}
