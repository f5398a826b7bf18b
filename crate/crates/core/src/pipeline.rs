//! End-to-end procedures: the ε-sweep of open-loop controls, extraction of
//! weak closed-loop gains on truncated intervals, the feedback representation
//! check and the partial-integral divergence table.

use std::fmt;

use rayon::prelude::*;

use crate::cost::{CostAccumulator, CostEstimate, CostWeights, Moments};
use crate::error::{Error, Result};
use crate::feedback::{closed_loop_strategy, FeedbackStrategy};
use crate::matcore::{Matrix, Vector};
use crate::problem::{InitialLaw, ProblemSpec, TimeGrid};
use crate::riccati::{solve_perturbed_with, CoeffSource, RiccatiOptions};
use crate::simulate::{brownian_increments, initial_state, Engine, PathEnsemble, BLOCK};

/// Strictly decreasing positive perturbation levels.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonSchedule {
    values: Vec<f64>,
}

impl EpsilonSchedule {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("epsilon schedule is empty".into()));
        }
        if values.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(Error::InvalidArgument(
                "epsilon schedule values must be positive and finite".into(),
            ));
        }
        if values
            .windows(2)
            .any(|w| w[1].partial_cmp(&w[0]) != Some(std::cmp::Ordering::Less))
        {
            return Err(Error::InvalidArgument(
                "epsilon schedule must be strictly decreasing".into(),
            ));
        }
        Ok(Self { values })
    }

    /// `eps_max · 2^{-k}` for `k = 0..count`.
    pub fn geometric(eps_max: f64, count: usize) -> Result<Self> {
        Self::new(
            (0..count)
                .map(|k| eps_max * 0.5f64.powi(k as i32))
                .collect(),
        )
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn smallest(&self) -> f64 {
        *self.values.last().expect("schedule is nonempty")
    }
}

impl Default for EpsilonSchedule {
    /// `2^{-k}`, `k = 0..=12`.
    fn default() -> Self {
        Self::geometric(1.0, 13).expect("valid default schedule")
    }
}

/// How the limit of a converging family of gains is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LimitRule {
    /// First-order extrapolation from the two smallest levels,
    /// `(ε₁Θ₂ − ε₂Θ₁)/(ε₁ − ε₂)`.
    Richardson,
    /// The member at the smallest level.
    SmallestMember,
}

impl fmt::Display for LimitRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LimitRule::Richardson => write!(f, "richardson"),
            LimitRule::SmallestMember => write!(f, "smallest-member"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SweepOptions {
    pub n_paths: usize,
    pub seed: u64,
    /// Defaults to `1e-3 · (‖u_{ε₀}‖ + 1)`.
    pub tol_cauchy: Option<f64>,
    /// Cap on `E∫|u_ε|²`; defaults to `1e6 · E|ξ|²`.
    pub bound_cap: Option<f64>,
    /// Interval for the weak gains; defaults to [`default_truncation`].
    pub truncation: Option<(f64, f64)>,
    /// Tolerance of the Cauchy test for the weak gains.
    pub weak_tol: f64,
    pub limit_rule: LimitRule,
    pub riccati: RiccatiOptions,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            n_paths: 10_000,
            seed: 0,
            tol_cauchy: None,
            bound_cap: None,
            truncation: None,
            weak_tol: 1e-3,
            limit_rule: LimitRule::Richardson,
            riccati: RiccatiOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SweepRecord {
    pub epsilon: f64,
    /// `(E∫|u_ε|²)^{1/2}`
    pub norm: f64,
    /// `J(u_ε)`
    pub cost: CostEstimate,
    /// `J_ε(u_ε)`, the perturbed value.
    pub value: CostEstimate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Diagnosis {
    OpenLoopSolvable,
    NotOpenLoopSolvable,
    Inconclusive,
}

impl fmt::Display for Diagnosis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnosis::OpenLoopSolvable => write!(f, "open-loop solvable at (t, xi)"),
            Diagnosis::NotOpenLoopSolvable => write!(f, "not open-loop solvable at (t, xi)"),
            Diagnosis::Inconclusive => write!(f, "inconclusive: bounded but not yet Cauchy"),
        }
    }
}

/// Limit gains on a truncated interval, with the evidence behind them.
#[derive(Debug, Clone)]
pub struct WeakGains {
    /// `epsilon = 0`, grid = the truncated interval.
    pub strategy: FeedbackStrategy,
    pub rule: LimitRule,
    /// L² distances between consecutive levels, for `Θ`, `Θ̄` and `v`.
    pub theta_distances: Vec<f64>,
    pub theta_bar_distances: Vec<f64>,
    pub v_distances: Vec<f64>,
    /// Final distance of the sequence the limit was taken from, per object.
    pub final_distances: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub schedule: EpsilonSchedule,
    pub records: Vec<SweepRecord>,
    /// `‖u_{ε_k} − u_{ε_{k+1}}‖` for consecutive levels.
    pub cauchy_diffs: Vec<f64>,
    pub bounded: bool,
    pub converged: bool,
    pub tol_cauchy: f64,
    pub bound_cap: f64,
    pub diagnosis: Diagnosis,
    /// Closed-loop strategy of every level, on the full grid.
    pub strategies: Vec<FeedbackStrategy>,
    pub law: InitialLaw,
    pub n_paths: usize,
    pub seed: u64,
    pub weak_gains: Option<WeakGains>,
    /// Why the weak gains are missing, if they are.
    pub weak_error: Option<String>,
    pub representation_error: Option<f64>,
}

impl SweepReport {
    /// Strategy whose outcome serves as the limit control `u*`, when converged.
    pub fn u_star_strategy(&self) -> Option<&FeedbackStrategy> {
        if self.converged {
            self.strategies.last()
        } else {
            None
        }
    }

    /// The limit control `u*` on the sweep's shared noise.
    pub fn u_star_ensemble(&self, spec: &ProblemSpec) -> Result<PathEnsemble> {
        let strat = self
            .u_star_strategy()
            .ok_or_else(|| Error::Precondition("sweep did not converge".into()))?;
        crate::simulate::simulate_closed_loop(spec, strat, &self.law, self.n_paths, self.seed)
    }
}

/// Default truncation `[t + 0.05(T−t), T − 0.1(T−t)]`, snapped to grid nodes.
pub fn default_truncation(grid: &TimeGrid) -> (f64, f64) {
    let span = grid.t1 - grid.t0;
    (
        snap(grid, grid.t0 + 0.05 * span),
        snap(grid, grid.t1 - 0.1 * span),
    )
}

fn snap(grid: &TimeGrid, s: f64) -> f64 {
    let i = ((s - grid.t0) / grid.step()).round() as usize;
    grid.time(i.min(grid.n_steps))
}

/// Closed-loop strategies for every level, solved in parallel.
pub fn solve_strategies(
    spec: &ProblemSpec,
    schedule: &EpsilonSchedule,
    opts: &RiccatiOptions,
) -> Result<Vec<FeedbackStrategy>> {
    schedule
        .values()
        .par_iter()
        .map(|&eps| {
            let sol = solve_perturbed_with(spec, eps, opts)?;
            closed_loop_strategy(spec, &sol)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

/// Sweep the schedule on a shared noise ensemble.
///
/// For each level the closed-loop strategy is simulated from `law`; every
/// path reuses the same Brownian increments and initial draw for all levels.
pub fn run_sweep(
    spec: &ProblemSpec,
    law: &InitialLaw,
    schedule: &EpsilonSchedule,
    opts: &SweepOptions,
) -> Result<SweepReport> {
    if opts.n_paths == 0 {
        return Err(Error::InvalidArgument("n_paths must be at least 1".into()));
    }
    if law.dim() != spec.n {
        return Err(Error::Dimension(format!(
            "initial law has dimension {}, expected {}",
            law.dim(),
            spec.n
        )));
    }
    law.validate()?;
    let strategies = solve_strategies(spec, schedule, &opts.riccati)?;
    let engines = strategies
        .iter()
        .map(|s| Engine::closed_loop(spec, s, law.mean()))
        .collect::<Result<Vec<_>>>()?;
    let weights = CostWeights::new(spec, spec.grid)?;
    let eps = schedule.values();
    let grid = spec.grid;
    let (n, m) = (spec.n, spec.m);
    let (steps, len) = (grid.n_steps, grid.len());
    let h = grid.step();
    let levels = eps.len();

    let n_blocks = opts.n_paths.div_ceil(BLOCK);
    let blocks: Vec<Result<(Vec<CostAccumulator>, Vec<Moments>)>> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut acc: Vec<CostAccumulator> =
                eps.iter().map(|&e| CostAccumulator::new(e)).collect();
            let mut diffs = vec![Moments::default(); levels.saturating_sub(1)];
            let mut x = vec![0.0; len * n];
            let mut u = vec![0.0; len * m];
            let mut u_prev = vec![0.0; len * m];
            for p in b * BLOCK..((b + 1) * BLOCK).min(opts.n_paths) {
                let dw = brownian_increments(opts.seed, p, steps, h);
                let x0 = initial_state(law, opts.seed, p);
                for (k, engine) in engines.iter().enumerate() {
                    engine
                        .run_path(x0.as_slice(), &dw, None, &mut x, &mut u)
                        .map_err(|i| Error::NonFiniteState {
                            time: grid.time(i),
                            path: p,
                        })?;
                    acc[k].push(&weights.path_terms(&x, &u));
                    if k > 0 {
                        let d: f64 = u[..steps * m]
                            .iter()
                            .zip(&u_prev[..steps * m])
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum();
                        diffs[k - 1].push(d * h);
                    }
                    std::mem::swap(&mut u, &mut u_prev);
                }
            }
            Ok((acc, diffs))
        })
        .collect();

    let mut acc: Vec<CostAccumulator> = eps.iter().map(|&e| CostAccumulator::new(e)).collect();
    let mut diffs = vec![Moments::default(); levels.saturating_sub(1)];
    for block in blocks {
        let (a, d) = block?;
        for (x, y) in acc.iter_mut().zip(&a) {
            x.merge(y);
        }
        for (x, y) in diffs.iter_mut().zip(&d) {
            x.merge(y);
        }
    }

    let records: Vec<SweepRecord> = acc
        .iter()
        .zip(&engines)
        .map(|(a, e)| {
            let mean_terms = weights.mean_terms(&e.mean_x, &e.mean_u);
            SweepRecord {
                epsilon: a.epsilon,
                norm: a.control_sq.mean.max(0.0).sqrt(),
                cost: a.estimate(mean_terms, false),
                value: a.estimate(mean_terms, true),
            }
        })
        .collect();
    let cauchy_diffs: Vec<f64> = diffs.iter().map(|d| d.mean.max(0.0).sqrt()).collect();

    let tol_cauchy = opts.tol_cauchy.unwrap_or(1e-3 * (records[0].norm + 1.0));
    let bound_cap = opts.bound_cap.unwrap_or(1e6 * law.second_moment());
    let bounded = records.iter().all(|r| r.norm * r.norm <= bound_cap);
    let converged = bounded && cauchy_tail_ok(&cauchy_diffs, tol_cauchy);
    let diagnosis = if converged {
        Diagnosis::OpenLoopSolvable
    } else if !bounded {
        Diagnosis::NotOpenLoopSolvable
    } else {
        Diagnosis::Inconclusive
    };

    let interval = opts.truncation.unwrap_or_else(|| default_truncation(&grid));
    let (weak_gains, weak_error) = match extract_weak_gains_from(
        &strategies,
        schedule,
        interval,
        opts.weak_tol,
        opts.limit_rule,
    ) {
        Ok(w) => (Some(w), None),
        Err(e) => (None, Some(e.to_string())),
    };

    Ok(SweepReport {
        schedule: schedule.clone(),
        records,
        cauchy_diffs,
        bounded,
        converged,
        tol_cauchy,
        bound_cap,
        diagnosis,
        strategies,
        law: law.clone(),
        n_paths: opts.n_paths,
        seed: opts.seed,
        weak_gains,
        weak_error,
        representation_error: None,
    })
}

/// Final diff within `tol` and nonincreasing over the last three pairs.
fn cauchy_tail_ok(diffs: &[f64], tol: f64) -> bool {
    let Some(&last) = diffs.last() else {
        return false;
    };
    let tail = &diffs[diffs.len().saturating_sub(3)..];
    last <= tol && tail.windows(2).all(|w| w[1] <= w[0])
}

fn sci(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3e}")).collect();
    format!("[{}]", parts.join(", "))
}

/// Nonincreasing over the final three pairs, with rounding slack.
fn nonincreasing_tail(d: &[f64]) -> bool {
    d[d.len().saturating_sub(3)..]
        .windows(2)
        .all(|w| w[1] <= w[0] * (1.0 + 1e-9) + 1e-14)
}

/// Simpson rule on the half-grid of `‖f_k‖²`.
fn half_grid_l2(grid: &TimeGrid, f: impl Fn(usize) -> f64) -> f64 {
    let h = grid.step();
    let mut total = 0.0;
    for i in 0..grid.n_steps {
        total += h / 6.0 * (f(2 * i) + 4.0 * f(2 * i + 1) + f(2 * i + 2));
    }
    total.max(0.0).sqrt()
}

/// Weak gains from strategies already solved on the full grid.
pub fn extract_weak_gains_from(
    strategies: &[FeedbackStrategy],
    schedule: &EpsilonSchedule,
    interval: (f64, f64),
    tol: f64,
    rule: LimitRule,
) -> Result<WeakGains> {
    let (t_lo, t_hi) = interval;
    let full = strategies
        .first()
        .ok_or_else(|| Error::InvalidArgument("no strategies".into()))?
        .grid;
    if strategies.len() != schedule.len() {
        return Err(Error::InvalidArgument(
            "one strategy per schedule level is required".into(),
        ));
    }
    if !(full.t0 < t_lo && t_lo < t_hi && t_hi < full.t1) {
        return Err(Error::InvalidArgument(format!(
            "truncated interval [{t_lo}, {t_hi}] must lie strictly inside ({}, {})",
            full.t0, full.t1
        )));
    }
    let i0 = full.index_of(t_lo)?;
    let i1 = full.index_of(t_hi)?;
    let sub = full.subgrid(i0, i1)?;
    let restricted = strategies
        .iter()
        .map(|s| s.restrict(&sub))
        .collect::<Result<Vec<_>>>()?;

    let half = 2 * sub.n_steps + 1;
    let eps = schedule.values();
    let dist = |a: &FeedbackStrategy, b: &FeedbackStrategy| -> [f64; 3] {
        [
            half_grid_l2(&sub, |k| (a.theta_half(k) - b.theta_half(k)).norm_squared()),
            half_grid_l2(&sub, |k| {
                (a.theta_bar_half(k) - b.theta_bar_half(k)).norm_squared()
            }),
            half_grid_l2(&sub, |k| (a.v_half(k) - b.v_half(k)).norm_squared()),
        ]
    };
    let raw: Vec<[f64; 3]> = restricted.windows(2).map(|w| dist(&w[0], &w[1])).collect();
    let col = |j: usize| raw.iter().map(|d| d[j]).collect::<Vec<_>>();
    let (dth, dthb, dv) = (col(0), col(1), col(2));

    let extrapolate = |k: usize| -> Result<FeedbackStrategy> {
        // combine levels k-1 and k
        let (a, b) = (&restricted[k - 1], &restricted[k]);
        let (ea, eb) = (eps[k - 1], eps[k]);
        let wa = -eb / (ea - eb);
        let wb = ea / (ea - eb);
        FeedbackStrategy::from_half_samples(
            sub,
            0.0,
            (0..half)
                .map(|j| a.theta_half(j) * wa + b.theta_half(j) * wb)
                .collect(),
            (0..half)
                .map(|j| a.theta_tilde_half(j) * wa + b.theta_tilde_half(j) * wb)
                .collect(),
            (0..half)
                .map(|j| a.v_half(j) * wa + b.v_half(j) * wb)
                .collect(),
        )
    };

    let levels = restricted.len();
    let (limit, final_distances) = match rule {
        LimitRule::Richardson if levels >= 3 => {
            let last = extrapolate(levels - 1)?;
            let prev = extrapolate(levels - 2)?;
            (last.clone(), dist(&prev, &last))
        }
        LimitRule::Richardson if levels == 2 => (extrapolate(1)?, raw[0]),
        _ => {
            let last = restricted[levels - 1].clone();
            let fin = raw.last().copied().unwrap_or([f64::INFINITY; 3]);
            (last, fin)
        }
    };
    let mut limit = limit;
    limit.epsilon = 0.0;
    let limit_norms = [
        half_grid_l2(&sub, |k| limit.theta_half(k).norm_squared()),
        half_grid_l2(&sub, |k| limit.theta_bar_half(k).norm_squared()),
        half_grid_l2(&sub, |k| limit.v_half(k).norm_squared()),
    ];

    let monotone = nonincreasing_tail(&dth) && nonincreasing_tail(&dthb) && nonincreasing_tail(&dv);
    let small = (0..3).all(|j| final_distances[j] <= tol * limit_norms[j].max(1.0));
    if !(monotone && small) {
        return Err(Error::NotCauchy {
            t_lo,
            t_hi,
            detail: format!(
                "theta distances {}, theta_bar distances {}, v distances {}, \
                 final {} against tol {tol:e} relative to limit norms {}",
                sci(&dth),
                sci(&dthb),
                sci(&dv),
                sci(&final_distances),
                sci(&limit_norms)
            ),
        });
    }
    Ok(WeakGains {
        strategy: limit,
        rule,
        theta_distances: dth,
        theta_bar_distances: dthb,
        v_distances: dv,
        final_distances,
    })
}

/// Solve every level and extract the weak gains on `interval`.
pub fn extract_weak_gains(
    spec: &ProblemSpec,
    schedule: &EpsilonSchedule,
    interval: (f64, f64),
    tol: f64,
) -> Result<WeakGains> {
    extract_weak_gains_with(
        spec,
        schedule,
        interval,
        tol,
        LimitRule::Richardson,
        &RiccatiOptions::default(),
    )
}

pub fn extract_weak_gains_with(
    spec: &ProblemSpec,
    schedule: &EpsilonSchedule,
    interval: (f64, f64),
    tol: f64,
    rule: LimitRule,
    opts: &RiccatiOptions,
) -> Result<WeakGains> {
    let strategies = solve_strategies(spec, schedule, opts)?;
    extract_weak_gains_from(&strategies, schedule, interval, tol, rule)
}

/// `E[u]` of a closed-loop strategy on the half-grid, given `E[X]` on the
/// nodes. Midpoint means come from cubic Hermite interpolation with the
/// slopes of the mean equation.
fn mean_control_half(
    spec: &ProblemSpec,
    strat: &FeedbackStrategy,
    mean_x: &[Vector],
) -> Result<Vec<Vector>> {
    let grid = strat.grid;
    let coeffs = CoeffSource::new(spec)?;
    let h = grid.step();
    let slope = |k: usize, x: &Vector| -> Result<Vector> {
        let c = coeffs.at(grid.half_time(k))?;
        let bh = &c.b + &c.b_bar;
        let mm: Matrix = &c.a + &c.a_bar + &bh * strat.theta_tilde_half(k);
        Ok(mm * x + bh * strat.v_half(k) + Vector::from_column_slice(c.drift.as_slice()))
    };
    let mut out = Vec::with_capacity(2 * grid.n_steps + 1);
    for i in 0..=grid.n_steps {
        let k = 2 * i;
        out.push(strat.theta_tilde_half(k) * &mean_x[i] + strat.v_half(k));
        if i < grid.n_steps {
            let (x0, x1) = (&mean_x[i], &mean_x[i + 1]);
            let d0 = slope(k, x0)?;
            let d1 = slope(k + 2, x1)?;
            let mid = (x0 + x1) * 0.5 + (d0 - d1) * (h / 8.0);
            out.push(strat.theta_tilde_half(k + 1) * mid + strat.v_half(k + 1));
        }
    }
    Ok(out)
}

/// Relative L² error of the feedback representation of `u*`.
///
/// `X*` is simulated open-loop under `u*` on shared noise; the weak gains
/// then give `û = Θ*X* + Θ̄*E[X*] + v*`, and the result is
/// `‖u* − û‖ / ‖u*‖` over the weak gains' interval, which must end at
/// `T − delta_end`.
pub fn verify_representation(
    spec: &ProblemSpec,
    law: &InitialLaw,
    report: &SweepReport,
    delta_end: f64,
    n_paths: usize,
    seed: u64,
) -> Result<f64> {
    if !report.converged {
        return Err(Error::Precondition(
            "representation check needs a converged sweep".into(),
        ));
    }
    let weak = report.weak_gains.as_ref().ok_or_else(|| {
        Error::Precondition(format!(
            "weak gains unavailable: {}",
            report.weak_error.as_deref().unwrap_or("not extracted")
        ))
    })?;
    let grid = spec.grid;
    let sub = weak.strategy.grid;
    if (sub.t1 - (grid.t1 - delta_end)).abs() > 0.5 * grid.step() {
        return Err(Error::GridMismatch(format!(
            "weak gains end at {}, expected T - delta_end = {}",
            sub.t1,
            grid.t1 - delta_end
        )));
    }
    if n_paths == 0 {
        return Err(Error::InvalidArgument("n_paths must be at least 1".into()));
    }
    let i0 = grid.offset_of(&sub)?;
    let i1 = i0 + sub.n_steps;
    let strat = report
        .u_star_strategy()
        .expect("converged sweep has strategies");

    let closed = Engine::closed_loop(spec, strat, law.mean())?;
    let mean_half = mean_control_half(spec, strat, &closed.mean_x)?;
    let open_strat = FeedbackStrategy::open_loop(grid, spec.n, mean_half.clone())?;
    let open = Engine::closed_loop(spec, &open_strat, law.mean())?;
    let ws = &weak.strategy;

    let (n, m) = (spec.n, spec.m);
    let (steps, len) = (grid.n_steps, grid.len());
    let h = grid.step();
    let n_blocks = n_paths.div_ceil(BLOCK);
    let parts: Vec<Result<(f64, f64)>> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut x = vec![0.0; len * n];
            let mut u = vec![0.0; len * m];
            let mut w = vec![0.0; len * m];
            let mut xs = vec![0.0; len * n];
            let mut us = vec![0.0; len * m];
            let (mut num, mut den) = (0.0, 0.0);
            for p in b * BLOCK..((b + 1) * BLOCK).min(n_paths) {
                let dw = brownian_increments(seed, p, steps, h);
                let x0 = initial_state(law, seed, p);
                let fail = |i: usize| Error::NonFiniteState {
                    time: grid.time(i),
                    path: p,
                };
                closed
                    .run_path(x0.as_slice(), &dw, None, &mut x, &mut u)
                    .map_err(fail)?;
                for i in 0..len {
                    for j in 0..m {
                        w[i * m + j] = u[i * m + j] - mean_half[2 * i][j];
                    }
                }
                open.run_path(x0.as_slice(), &dw, Some(&w), &mut xs, &mut us)
                    .map_err(fail)?;
                for i in i0..i1 {
                    let xi = Vector::from_column_slice(&xs[i * n..(i + 1) * n]);
                    let k = i - i0;
                    let uh = ws.theta(k) * xi + ws.theta_bar(k) * &open.mean_x[i] + ws.v(k);
                    for j in 0..m {
                        let ui = us[i * m + j];
                        num += (ui - uh[j]).powi(2);
                        den += ui * ui;
                    }
                }
            }
            Ok((num * h, den * h))
        })
        .collect();
    let (mut num, mut den) = (0.0, 0.0);
    for part in parts {
        let (a, b) = part?;
        num += a;
        den += b;
    }
    if den == 0.0 {
        return Ok(if num == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok((num / den).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceRow {
    pub delta: f64,
    /// `∫ |Θ*|² ds` from the start of the strategy's interval to `T − δ`.
    pub theta: f64,
    pub theta_bar: f64,
}

/// Trapezoidal partial integrals of `|Θ*|²` and `|Θ̄*|²` up to `t_end − δ`.
pub fn check_divergence(
    strat: &FeedbackStrategy,
    t_end: f64,
    deltas: &[f64],
) -> Result<Vec<DivergenceRow>> {
    let grid = strat.grid;
    let hh = 0.5 * grid.step();
    deltas
        .iter()
        .map(|&delta| {
            let upper = t_end - delta;
            if delta.is_nan() || delta <= 0.0 || upper > grid.t1 + 1e-12 || upper <= grid.t0 {
                return Err(Error::InvalidArgument(format!(
                    "T - delta = {upper} is outside the strategy interval [{}, {}]",
                    grid.t0, grid.t1
                )));
            }
            let x = (upper - grid.t0) / hh;
            let kmax = x.round();
            if (x - kmax).abs() > 1e-6 {
                return Err(Error::GridMismatch(format!(
                    "T - delta = {upper} is not on the strategy's half-grid"
                )));
            }
            let kmax = kmax as usize;
            let trap = |f: &dyn Fn(usize) -> f64| {
                let mut s = 0.5 * (f(0) + f(kmax));
                for k in 1..kmax {
                    s += f(k);
                }
                s * hh
            };
            Ok(DivergenceRow {
                delta,
                theta: trap(&|k| strat.theta_half(k).norm_squared()),
                theta_bar: trap(&|k| strat.theta_bar_half(k).norm_squared()),
            })
        })
        .collect()
}

/// `I(δ_{k+1}) / I(δ_k)` for consecutive rows, for `Θ*` and `Θ̄*`.
pub fn doubling_ratios(rows: &[DivergenceRow]) -> Vec<(f64, f64)> {
    rows.windows(2)
        .map(|w| (w[1].theta / w[0].theta, w[1].theta_bar / w[0].theta_bar))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules() {
        let s = EpsilonSchedule::default();
        assert_eq!(s.len(), 13);
        assert_eq!(s.smallest(), 1.0 / 4096.0);
        assert!(EpsilonSchedule::new(vec![]).is_err());
        assert!(EpsilonSchedule::new(vec![1.0, 1.0]).is_err());
        assert!(EpsilonSchedule::new(vec![1.0, -0.5]).is_err());
    }

    #[test]
    fn cauchy_tail() {
        assert!(cauchy_tail_ok(&[1.0, 0.5, 0.2, 0.1], 0.1));
        assert!(!cauchy_tail_ok(&[1.0, 0.5, 0.2, 0.3], 1.0));
        assert!(!cauchy_tail_ok(&[1.0, 0.5, 0.2], 0.1));
        assert!(!cauchy_tail_ok(&[], 1.0));
    }

    #[test]
    fn default_truncation_snaps() {
        let g = TimeGrid::new(0.0, 1.0, 2000).unwrap();
        let (a, b) = default_truncation(&g);
        assert_eq!(g.index_of(a).unwrap(), 100);
        assert_eq!(g.index_of(b).unwrap(), 1800);
    }

    #[test]
    fn divergence_of_constant_gain() {
        let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let half = 201;
        let strat = FeedbackStrategy::from_half_samples(
            grid,
            0.0,
            vec![Matrix::from_element(1, 1, 2.0); half],
            vec![Matrix::from_element(1, 1, 3.0); half],
            vec![Vector::zeros(1); half],
        )
        .unwrap();
        let rows = check_divergence(&strat, 1.0, &[0.5, 0.25]).unwrap();
        assert!((rows[0].theta - 2.0).abs() < 1e-12);
        assert!((rows[1].theta_bar - 0.75).abs() < 1e-12);
        assert!(check_divergence(&strat, 1.0, &[0.0]).is_err());
        assert!(check_divergence(&strat, 1.0, &[0.1234]).is_err());
    }
}
