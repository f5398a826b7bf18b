use mfslq::feedback::closed_loop_strategy;
use mfslq::pipeline::{
    check_divergence, default_truncation, extract_weak_gains, extract_weak_gains_with, run_sweep,
    verify_representation, Diagnosis, EpsilonSchedule, LimitRule, SweepOptions,
};
use mfslq::riccati::{solve_gre, RiccatiOptions};
use mfslq::{Error, ProblemSpec};

/// `dX = u ds + dW`, cost `E|X(1)|²`, no control weight. The infimum 0 is
/// approached by bridge-like controls whose energy grows without bound.
const BRIDGE: &str = r#"
[dims]
n = 1
m = 1
[horizon]
n_steps = 400
[coefficients]
B = { constant = [[1.0]] }
sigma = { constant = [1.0] }
[weights]
G = [[1.0]]
[initial]
mean = [1.0]
"#;

/// Uniformly convex: `R = 1` and every other weight nonnegative.
const REGULAR: &str = r#"
[dims]
n = 1
m = 1
[horizon]
n_steps = 400
[coefficients]
A = { constant = [[0.5]] }
Abar = { constant = [[-0.2]] }
B = { constant = [[1.0]] }
Bbar = { constant = [[0.3]] }
C = { constant = [[0.2]] }
D = { constant = [[0.3]] }
sigma = { constant = [0.2] }
b = { constant = [0.1] }
[weights]
Q = { constant = [[1.0]] }
R = { constant = [[1.0]] }
G = [[1.0]]
Gbar = [[0.5]]
q = { constant = [0.2] }
[initial]
kind = "two-point-centered"
mean = [1.0]
offset = [1.0]
"#;

fn quick(n_paths: usize) -> SweepOptions {
    SweepOptions {
        n_paths,
        seed: 3,
        ..SweepOptions::default()
    }
}

#[test]
fn bridge_problem_has_growing_norms() {
    let spec = ProblemSpec::from_toml(BRIDGE).unwrap();
    let schedule = EpsilonSchedule::geometric(1.0, 9).unwrap();
    let report = run_sweep(&spec, &spec.initial, &schedule, &quick(2000)).unwrap();
    let norms: Vec<f64> = report.records.iter().map(|r| r.norm).collect();
    assert!(norms.windows(2).all(|w| w[1] > w[0]), "norms {norms:?}");
    // consecutive differences do not shrink the way a convergent family's do
    assert!(!report.converged);
    assert_eq!(report.diagnosis, Diagnosis::Inconclusive);
    assert!(report.u_star_strategy().is_none());
    assert!(matches!(
        verify_representation(&spec, &spec.initial, &report, 0.1, 100, 0),
        Err(Error::Precondition(_))
    ));

    let capped = SweepOptions {
        bound_cap: Some(4.0),
        ..quick(2000)
    };
    let report = run_sweep(&spec, &spec.initial, &schedule, &capped).unwrap();
    assert!(!report.bounded);
    assert_eq!(report.diagnosis, Diagnosis::NotOpenLoopSolvable);
}

#[test]
fn regular_problem_limit_matches_unperturbed_gains() {
    let spec = ProblemSpec::from_toml(REGULAR).unwrap();
    let gre = solve_gre(&spec).unwrap();
    let exact = closed_loop_strategy(&spec, &gre).unwrap();
    let interval = default_truncation(&spec.grid);
    let weak = extract_weak_gains(&spec, &EpsilonSchedule::default(), interval, 1e-3).unwrap();
    let sub = weak.strategy.grid;
    let exact = exact.restrict(&sub).unwrap();
    for k in 0..2 * sub.n_steps + 1 {
        let s = sub.half_time(k);
        assert!(
            (weak.strategy.theta_half(k) - exact.theta_half(k)).norm() < 1e-6,
            "theta at {s}"
        );
        assert!(
            (weak.strategy.theta_bar_half(k) - exact.theta_bar_half(k)).norm() < 1e-6,
            "theta bar at {s}"
        );
        assert!(
            (weak.strategy.v_half(k) - exact.v_half(k)).norm() < 1e-6,
            "v at {s}"
        );
    }
}

#[test]
fn regular_problem_sweep_converges_and_represents() {
    let spec = ProblemSpec::from_toml(REGULAR).unwrap();
    let report = run_sweep(
        &spec,
        &spec.initial,
        &EpsilonSchedule::default(),
        &quick(2000),
    )
    .unwrap();
    assert!(report.converged, "diffs {:?}", report.cauchy_diffs);
    assert_eq!(report.diagnosis, Diagnosis::OpenLoopSolvable);
    let (_, t_hi) = default_truncation(&spec.grid);
    let err = verify_representation(&spec, &spec.initial, &report, 1.0 - t_hi, 2000, 8).unwrap();
    assert!(err < 1e-3, "representation error {err:.3e}");
    assert!(matches!(
        verify_representation(&spec, &spec.initial, &report, 0.25, 100, 0),
        Err(Error::GridMismatch(_))
    ));
}

#[test]
fn weak_gain_errors() {
    let spec = ProblemSpec::preset("example-5.1").unwrap();
    let schedule = EpsilonSchedule::default();
    let opts = RiccatiOptions::default();
    for interval in [(0.5, 0.2), (0.0, 0.5), (0.5, 1.0), (-0.1, 0.5), (0.3, 0.3)] {
        let res = extract_weak_gains(&spec, &schedule, interval, 1e-3);
        assert!(res.is_err(), "interval {interval:?} accepted");
    }
    // far too strict a tolerance
    assert!(matches!(
        extract_weak_gains(&spec, &schedule, (0.05, 0.9), 1e-9),
        Err(Error::NotCauchy { .. })
    ));
    // the smallest member sits a first-order distance away from the limit
    let res = extract_weak_gains_with(
        &spec,
        &schedule,
        (0.05, 0.9),
        2e-3,
        LimitRule::SmallestMember,
        &opts,
    );
    assert!(matches!(res, Err(Error::NotCauchy { .. })));
    let loose = extract_weak_gains_with(
        &spec,
        &schedule,
        (0.05, 0.9),
        1e-2,
        LimitRule::SmallestMember,
        &opts,
    )
    .unwrap();
    let d = loose.final_distances[0];
    assert!(d > 3e-3 && d < 6e-3, "smallest-member distance {d:.3e}");
    assert_eq!(loose.rule, LimitRule::SmallestMember);
}

#[test]
fn divergence_rejects_bad_deltas() {
    let spec = ProblemSpec::preset("example-5.1").unwrap();
    let weak = extract_weak_gains(&spec, &EpsilonSchedule::default(), (0.05, 0.9), 1e-3).unwrap();
    let strat = &weak.strategy;
    assert!(check_divergence(strat, 0.9, &[0.0]).is_err());
    assert!(check_divergence(strat, 0.9, &[0.9]).is_err());
    assert!(matches!(
        check_divergence(strat, 0.9, &[0.1234567]),
        Err(Error::GridMismatch(_))
    ));
    let rows = check_divergence(strat, 0.9, &[0.4, 0.2]).unwrap();
    assert!(rows[1].theta > rows[0].theta);
}
