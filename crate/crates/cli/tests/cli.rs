use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mfslq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfslq"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Header and rows of a CSV file; every row must match the header width.
fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    let rows: Vec<Vec<String>> = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    for row in &rows {
        assert_eq!(row.len(), header.len(), "{}: ragged row", path.display());
    }
    (header, rows)
}

fn column(header: &[String], rows: &[Vec<String>], name: &str) -> Vec<f64> {
    let j = header.iter().position(|h| h == name).unwrap();
    rows.iter().map(|r| r[j].parse().unwrap()).collect()
}

#[test]
fn zero_epsilon_is_a_usage_error_for_riccati() {
    let dir = tempfile::tempdir().unwrap();
    let out = mfslq(&[
        "riccati",
        "--preset",
        "example-5.1",
        "--eps",
        "0",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("gre"));
}

#[test]
fn argument_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    for args in [
        vec!["riccati", "--eps", "0.1", "--out", d],
        vec![
            "riccati",
            "--preset",
            "example-5.1",
            "--config",
            "x.toml",
            "--eps",
            "0.1",
        ],
        vec![
            "riccati",
            "--preset",
            "example-5.1",
            "--eps",
            "0.1",
            "--steps",
            "5",
        ],
        vec![
            "simulate",
            "--preset",
            "example-5.1",
            "--eps",
            "0.1",
            "--paths",
            "0",
        ],
        vec![
            "riccati",
            "--preset",
            "example-9.9",
            "--eps",
            "0.1",
            "--out",
            d,
        ],
        vec![
            "riccati",
            "--config",
            "/nonexistent/problem.toml",
            "--eps",
            "0.1",
            "--out",
            d,
        ],
        vec![
            "sweep",
            "--preset",
            "example-5.1",
            "--eps-count",
            "1",
            "--out",
            d,
        ],
        vec![
            "sweep",
            "--preset",
            "example-5.1",
            "--t-hi",
            "0.8",
            "--delta-end",
            "0.1",
            "--out",
            d,
        ],
        vec!["no-such-command"],
    ] {
        let out = mfslq(&args);
        assert_eq!(code(&out), 1, "{args:?}: {}", stderr(&out));
    }
    assert_eq!(code(&mfslq(&["--help"])), 0);
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("p.toml");
    fs::write(
        &cfg,
        "[dims]\nn = 1\nm = 1\n[coefficients]\nA = { constant = [[1.0, 2.0]] }\n",
    )
    .unwrap();
    let out = mfslq(&[
        "gre",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("coefficients.A"), "{}", stderr(&out));
}

#[test]
fn convexity_loss_exits_with_two_and_names_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("p.toml");
    fs::write(
        &cfg,
        "[dims]\nn = 1\nm = 1\n[weights]\nR = { constant = [[-1.0]] }\nG = [[1.0]]\n",
    )
    .unwrap();
    let out = mfslq(&[
        "riccati",
        "--config",
        cfg.to_str().unwrap(),
        "--eps",
        "0.1",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    let msg = stderr(&out);
    assert!(
        msg.contains("riccati") && msg.contains("eps = 0.1") && msg.contains("s = "),
        "{msg}"
    );
}

#[test]
fn unperturbed_simulation_of_irregular_problem_is_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = mfslq(&[
        "simulate",
        "--preset",
        "example-5.1",
        "--eps",
        "0",
        "--paths",
        "10",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("regular"));
}

#[test]
fn verify_passes_on_presets_and_fails_on_coarse_grid() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = mfslq(&["verify", "--preset", "example-5.1", "--out", d]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary = fs::read_to_string(dir.path().join("summary.txt")).unwrap();
    let line = summary
        .lines()
        .find(|l| l.contains("riccati closed forms"))
        .expect("closed-form line");
    assert!(line.starts_with("[PASS]"), "{line}");
    let (header, rows) = read_csv(&dir.path().join("verify.csv"));
    assert_eq!(header, ["preset", "check", "pass", "measured", "tolerance"]);
    assert!(rows.iter().all(|r| r[0] == "example-5.1" && r[2] == "true"));

    let out = mfslq(&[
        "verify",
        "--preset",
        "example-1.1",
        "--steps",
        "10",
        "--out",
        d,
    ]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stdout).contains("[FAIL]"));
}

#[test]
fn riccati_csv_round_trips_and_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let out = mfslq(&[
        "riccati",
        "--preset",
        "example-5.1",
        "--eps",
        "0.1",
        "--steps",
        "200",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (header, rows) = read_csv(&dir.path().join("riccati.csv"));
    assert_eq!(
        header,
        ["s", "P_11", "Pi_11", "min_eig_sigma", "min_eig_sigma_bar"]
    );
    assert_eq!(rows.len(), 201);
    let s = column(&header, &rows, "s");
    let p = column(&header, &rows, "P_11");
    let sig = column(&header, &rows, "min_eig_sigma");
    for i in 0..rows.len() {
        assert!((p[i] - 0.1 / (1.1 - s[i])).abs() < 1e-6);
        // R = 0, D = 0, so Σ = ε
        assert!((sig[i] - 0.1).abs() < 1e-12);
    }
    let (header, rows) = read_csv(&dir.path().join("strategy.csv"));
    assert_eq!(
        header,
        ["s", "theta_11", "theta_tilde_11", "theta_bar_11", "v_1"]
    );
    for r in &rows {
        let x: Vec<f64> = r.iter().map(|v| v.parse().unwrap()).collect();
        assert_eq!(x[3], x[2] - x[1]);
    }
}

#[test]
fn sweep_outputs_are_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = |d: &str| {
        vec![
            "sweep",
            "--preset",
            "example-5.1",
            "--steps",
            "200",
            "--paths",
            "300",
            "--seed",
            "4",
            "--eps-count",
            "8",
            "--tol-cauchy",
            "1",
            "--weak-tol",
            "1",
            "--out",
        ]
        .into_iter()
        .map(String::from)
        .chain([d.to_string()])
        .collect::<Vec<_>>()
    };
    for d in [&a, &b] {
        let argv = args(d.path().to_str().unwrap());
        let argv: Vec<&str> = argv.iter().map(|s| s.as_str()).collect();
        let out = mfslq(&argv);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    for name in [
        "sweep.csv",
        "gains.csv",
        "representation.csv",
        "divergence.csv",
        "summary.txt",
    ] {
        let x = fs::read(a.path().join(name)).unwrap();
        let y = fs::read(b.path().join(name)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, y, "{name} differs between runs");
    }
    let (header, rows) = read_csv(&a.path().join("sweep.csv"));
    assert_eq!(
        header,
        [
            "epsilon",
            "norm",
            "cost",
            "cost_stderr",
            "value",
            "value_stderr",
            "cauchy_diff"
        ]
    );
    assert_eq!(rows.len(), 8);
    assert_eq!(rows[0][6], "");
    let (header, _) = read_csv(&a.path().join("gains.csv"));
    assert_eq!(header, ["s", "theta_11", "theta_bar_11", "v_1"]);
    let (header, rows) = read_csv(&a.path().join("representation.csv"));
    assert_eq!(header, ["t_lo", "t_hi", "relative_error"]);
    assert_eq!(rows.len(), 1);
    let (header, _) = read_csv(&a.path().join("divergence.csv"));
    assert_eq!(
        header,
        [
            "delta",
            "theta_integral",
            "theta_bar_integral",
            "theta_ratio",
            "theta_bar_ratio"
        ]
    );
}

#[test]
fn full_sweep_of_first_preset_has_decreasing_differences() {
    let dir = tempfile::tempdir().unwrap();
    let out = mfslq(&[
        "sweep",
        "--preset",
        "example-1.1",
        "--paths",
        "10000",
        "--seed",
        "7",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (header, rows) = read_csv(&dir.path().join("sweep.csv"));
    let diffs = column(&header, &rows[1..], "cauchy_diff");
    assert!(diffs.windows(2).all(|w| w[1] <= w[0]), "{diffs:?}");
    let summary = fs::read_to_string(dir.path().join("summary.txt")).unwrap();
    assert!(
        summary.contains("diagnosis: open-loop solvable"),
        "{summary}"
    );
}

#[test]
fn simulate_writes_moments_costs_and_paths() {
    let dir = tempfile::tempdir().unwrap();
    let out = mfslq(&[
        "simulate",
        "--preset",
        "example-5.1",
        "--eps",
        "0.25",
        "--steps",
        "100",
        "--paths",
        "500",
        "--dump-paths",
        "3",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (header, rows) = read_csv(&dir.path().join("simulate.csv"));
    assert_eq!(header, ["s", "mean_x_1", "ens_mean_x_1", "ens_std_x_1"]);
    assert_eq!(rows.len(), 101);
    let (header, rows) = read_csv(&dir.path().join("cost.csv"));
    assert_eq!(header.len(), 9);
    assert_eq!(rows.len(), 2);
    let value = column(&header, &rows, "value");
    let penalty = column(&header, &rows, "epsilon_penalty");
    assert_eq!(penalty[0], 0.0);
    assert!((value[1] - value[0] - penalty[1]).abs() < 1e-12);
    let (_, rows) = read_csv(&dir.path().join("paths.csv"));
    assert_eq!(rows.len(), 3 * 101);
}

#[test]
fn divergence_ratios_approach_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = mfslq(&[
        "divergence",
        "--preset",
        "example-5.1",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (header, rows) = read_csv(&dir.path().join("divergence.csv"));
    let ratios = column(&header, &rows[1..], "theta_ratio");
    assert!(ratios.iter().all(|r| (1.8..=2.2).contains(r)), "{ratios:?}");
}
