//! Golden checks against the closed-form solutions of the two presets.

use std::f64::consts::E;

use mfslq::cost::evaluate_cost;
use mfslq::feedback::{closed_loop_strategy, FeedbackStrategy};
use mfslq::pipeline::{extract_weak_gains, EpsilonSchedule};
use mfslq::riccati::{check_regularity, solve_gre, solve_perturbed, Block};
use mfslq::simulate::{propagate_mean_closed_loop, simulate_open_loop, OpenLoopControl};
use mfslq::{ProblemSpec, TimeGrid, Vector};

pub struct Check {
    pub preset: &'static str,
    pub name: &'static str,
    pub pass: bool,
    /// Measured error or count, compared against `tol`.
    pub measured: f64,
    pub tol: f64,
    pub detail: String,
}

fn check(
    preset: &'static str,
    name: &'static str,
    measured: f64,
    tol: f64,
    detail: String,
) -> Check {
    Check {
        preset,
        name,
        pass: measured <= tol,
        measured,
        tol,
        detail,
    }
}

fn max_over(grid: &TimeGrid, f: impl Fn(usize, f64) -> f64) -> f64 {
    (0..grid.len())
        .map(|i| f(i, grid.time(i)))
        .fold(0.0, f64::max)
}

/// Composite Simpson on the half-grid.
fn l2_half(grid: &TimeGrid, f: impl Fn(usize) -> f64) -> f64 {
    let h = grid.step();
    (0..grid.n_steps)
        .map(|i| h / 6.0 * (f(2 * i) + 4.0 * f(2 * i + 1) + f(2 * i + 2)))
        .sum::<f64>()
        .sqrt()
}

pub fn example_51(steps: Option<usize>) -> mfslq::Result<Vec<Check>> {
    const NAME: &str = "example-5.1";
    let mut spec = ProblemSpec::preset(NAME)?;
    if let Some(n) = steps {
        spec = spec.with_steps(n)?;
    }
    let g = spec.grid;
    let xi = spec.initial.mean()[0];
    let mut out = Vec::new();

    let mut worst: f64 = 0.0;
    let mut worst_mean: f64 = 0.0;
    for eps in [1.0, 0.1, 0.01] {
        let sol = solve_perturbed(&spec, eps)?;
        worst = worst.max(max_over(&g, |i, s| {
            let p = (sol.p(i)[(0, 0)] - eps / (eps + 1.0 - s)).abs();
            let pi = (sol.pi(i)[(0, 0)] - 2.0 * eps / (eps + 8.0 - 8.0 * s)).abs();
            p.max(pi)
        }));
        let strat = closed_loop_strategy(&spec, &sol)?;
        let mean = propagate_mean_closed_loop(&spec, &strat, spec.initial.mean())?;
        worst_mean = worst_mean.max(max_over(&g, |i, s| {
            (mean[i][0] - (eps + 8.0 - 8.0 * s) / (eps + 8.0) * xi).abs()
        }));
    }
    out.push(check(
        NAME,
        "riccati closed forms",
        worst,
        1e-6,
        format!("max error {worst:.2e} over eps in {{1, 0.1, 0.01}}"),
    ));
    out.push(check(
        NAME,
        "closed-loop mean",
        worst_mean,
        1e-6,
        format!("max error {worst_mean:.2e}"),
    ));

    let gre = solve_gre(&spec)?;
    let dev = max_over(&g, |i, _| {
        (gre.p(i)[(0, 0)] - 1.0)
            .abs()
            .max((gre.pi(i)[(0, 0)] - 2.0).abs())
    });
    out.push(check(
        NAME,
        "unperturbed Riccati constants",
        dev,
        1e-10,
        format!("max |P - 1|, |Pi - 2| {dev:.2e}"),
    ));
    let verdict = check_regularity(&gre, &spec, 1e-8)?;
    let fp = verdict
        .failures
        .iter()
        .filter(|f| f.block == Block::P)
        .count();
    let fpi = verdict
        .failures
        .iter()
        .filter(|f| f.block == Block::Pi)
        .count();
    let irregular = !verdict.is_regular && fp > 0 && fpi > 0;
    out.push(check(
        NAME,
        "regularity fails in both blocks",
        if irregular { 0.0 } else { 1.0 },
        0.0,
        format!("failures P {fp}, Pi {fpi}"),
    ));

    let weak = extract_weak_gains(&spec, &EpsilonSchedule::default(), (0.05, 0.9), 1e-3)?;
    let w = &weak.strategy;
    let sub = w.grid;
    let d_theta = l2_half(&sub, |k| {
        (w.theta_half(k)[(0, 0)] + 1.0 / (1.0 - sub.half_time(k))).powi(2)
    });
    let d_bar = l2_half(&sub, |k| {
        (w.theta_bar_half(k)[(0, 0)] - 1.0 / (2.0 - 2.0 * sub.half_time(k))).powi(2)
    });
    let v_max = (0..2 * sub.n_steps + 1)
        .map(|k| w.v_half(k)[0].abs())
        .fold(0.0, f64::max);
    out.push(check(
        NAME,
        "limit gains",
        d_theta.max(d_bar),
        1e-3,
        format!("L2 distance theta {d_theta:.2e}, theta_bar {d_bar:.2e} on [0.05, 0.9]"),
    ));
    out.push(check(
        NAME,
        "limit bias",
        v_max,
        1e-10,
        format!("max |v| {v_max:.1e}"),
    ));
    Ok(out)
}

pub fn example_11(steps: Option<usize>) -> mfslq::Result<Vec<Check>> {
    const NAME: &str = "example-1.1";
    let mut spec = ProblemSpec::preset(NAME)?;
    if let Some(n) = steps {
        spec = spec.with_steps(n)?;
    }
    let g = spec.grid;
    let xi = spec.initial.mean()[0];
    let mut out = Vec::new();

    let gre = solve_gre(&spec)?;
    let p_max = max_over(&g, |i, _| gre.p(i)[(0, 0)].abs());
    let pi_max = max_over(&g, |i, s| (gre.pi(i)[(0, 0)] - (4.0 - 4.0 * s).exp()).abs());
    out.push(check(
        NAME,
        "unperturbed Riccati closed form",
        p_max.max(pi_max),
        1e-6,
        format!("max |P| {p_max:.2e}, max |Pi - e^(4-4s)| {pi_max:.2e}"),
    ));
    let verdict = check_regularity(&gre, &spec, 1e-8)?;
    let fp = verdict
        .failures
        .iter()
        .filter(|f| f.block == Block::P)
        .count();
    let fpi = verdict
        .failures
        .iter()
        .filter(|f| f.block == Block::Pi)
        .count();
    let irregular = !verdict.is_regular && fp == 0 && fpi > 0;
    out.push(check(
        NAME,
        "regularity fails in the mean block only",
        if irregular { 0.0 } else { 1.0 },
        0.0,
        format!("failures P {fp}, Pi {fpi}"),
    ));

    let half = 2 * g.n_steps + 1;
    let zero = vec![Vector::zeros(1); half];
    let u_bar: Vec<Vector> = (0..half)
        .map(|k| Vector::from_element(1, -0.5 * (2.0 * g.half_time(k)).exp() * xi))
        .collect();
    let m0 = propagate_mean_closed_loop(
        &spec,
        &FeedbackStrategy::open_loop(g, 1, zero.clone())?,
        spec.initial.mean(),
    )?;
    let m1 = propagate_mean_closed_loop(
        &spec,
        &FeedbackStrategy::open_loop(g, 1, u_bar.clone())?,
        spec.initial.mean(),
    )?;
    let e0 = (m0[g.n_steps][0] - E * E * xi).abs();
    let e1 = m1[g.n_steps][0].abs();
    out.push(check(
        NAME,
        "terminal means",
        e0.max(e1),
        1e-6,
        format!("|EX(1) - e^2 E xi| {e0:.2e} without control, |EX(1)| {e1:.2e} under u_bar"),
    ));

    let cost = |u: Vec<Vector>| -> mfslq::Result<f64> {
        let ens = simulate_open_loop(
            &spec,
            &OpenLoopControl::Deterministic(u),
            &spec.initial,
            16,
            0,
        )?;
        Ok(evaluate_cost(&spec, &ens, 0.0)?.value)
    };
    let j0 = cost(zero)?;
    let j1 = cost(u_bar)?;
    let target = E.powi(4) * xi * xi;
    out.push(check(
        NAME,
        "cost without control",
        (j0 - target).abs(),
        1e-6,
        format!("|J(0) - e^4| {:.2e}", (j0 - target).abs()),
    ));
    out.push(check(
        NAME,
        "cost under u_bar",
        j1.abs(),
        1e-8,
        format!("J(u_bar) {j1:.2e}"),
    ));
    Ok(out)
}
