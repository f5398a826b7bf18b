use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mfslq::feedback::FeedbackStrategy;
use mfslq::matcore::min_eigenvalue;
use mfslq::pipeline::{doubling_ratios, DivergenceRow, SweepReport};
use mfslq::riccati::RiccatiSolution;
use mfslq::simulate::PathEnsemble;
use mfslq::{Matrix, Vector};

use crate::CliError;

/// Shortest round-trip form, so reruns give the same bytes.
pub fn num(x: f64) -> String {
    format!("{x:e}")
}

/// Column names `{prefix}_{i}{j}` in column-major order, 1-based.
fn matrix_cols(prefix: &str, rows: usize, cols: usize) -> Vec<String> {
    let mut out = Vec::with_capacity(rows * cols);
    for j in 1..=cols {
        for i in 1..=rows {
            out.push(format!("{prefix}_{i}{j}"));
        }
    }
    out
}

fn vector_cols(prefix: &str, len: usize) -> Vec<String> {
    (1..=len).map(|i| format!("{prefix}_{i}")).collect()
}

fn push_matrix(row: &mut Vec<String>, m: &Matrix) {
    row.extend(m.iter().map(|&x| num(x)));
}

fn push_vector(row: &mut Vec<String>, v: &Vector) {
    row.extend(v.iter().map(|&x| num(x)));
}

pub struct OutDir {
    dir: PathBuf,
}

impl OutDir {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| {
            CliError::Usage(format!(
                "cannot create output directory {}: {e}",
                dir.display()
            ))
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn csv(&self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
        let path = self.path(name);
        let io = |e: csv::Error| CliError::Usage(format!("cannot write {}: {e}", path.display()));
        let mut w = csv::Writer::from_path(&path).map_err(io)?;
        w.write_record(header).map_err(io)?;
        for r in rows {
            w.write_record(r).map_err(io)?;
        }
        w.flush()
            .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
    }

    /// Write `summary.txt` and echo it to stdout.
    pub fn summary(&self, text: &str) -> Result<(), CliError> {
        print!("{text}");
        let path = self.path("summary.txt");
        fs::write(&path, text)
            .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
    }
}

/// `riccati.csv`: `s`, `P`, `Π`, smallest eigenvalues of `Σ` and `Σ̄`.
pub fn riccati_table(sol: &RiccatiSolution, n: usize) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec!["s".to_string()];
    header.extend(matrix_cols("P", n, n));
    header.extend(matrix_cols("Pi", n, n));
    header.push("min_eig_sigma".into());
    header.push("min_eig_sigma_bar".into());
    let rows = (0..sol.grid.len())
        .map(|i| {
            let mut row = vec![num(sol.grid.time(i))];
            push_matrix(&mut row, sol.p(i));
            push_matrix(&mut row, sol.pi(i));
            for m in [sol.sigma(i), sol.sigma_bar(i)] {
                row.push(min_eigenvalue(m).map(num).unwrap_or_else(|_| "NaN".into()));
            }
            row
        })
        .collect();
    (header, rows)
}

/// `strategy.csv`: `s`, `Θ`, `Θ̃`, `Θ̄`, `v` on the grid nodes.
pub fn strategy_table(strat: &FeedbackStrategy) -> (Vec<String>, Vec<Vec<String>>) {
    let (m, n) = (strat.control_dim(), strat.state_dim());
    let mut header = vec!["s".to_string()];
    header.extend(matrix_cols("theta", m, n));
    header.extend(matrix_cols("theta_tilde", m, n));
    header.extend(matrix_cols("theta_bar", m, n));
    header.extend(vector_cols("v", m));
    let rows = (0..strat.grid.len())
        .map(|i| {
            let mut row = vec![num(strat.grid.time(i))];
            push_matrix(&mut row, strat.theta(i));
            push_matrix(&mut row, strat.theta_tilde(i));
            push_matrix(&mut row, strat.theta_bar(i));
            push_vector(&mut row, strat.v(i));
            row
        })
        .collect();
    (header, rows)
}

/// `gains.csv`: `s`, `Θ*`, `Θ̄*`, `v*` on the nodes of the truncated interval.
pub fn gains_table(strat: &FeedbackStrategy) -> (Vec<String>, Vec<Vec<String>>) {
    let (m, n) = (strat.control_dim(), strat.state_dim());
    let mut header = vec!["s".to_string()];
    header.extend(matrix_cols("theta", m, n));
    header.extend(matrix_cols("theta_bar", m, n));
    header.extend(vector_cols("v", m));
    let rows = (0..strat.grid.len())
        .map(|i| {
            let mut row = vec![num(strat.grid.time(i))];
            push_matrix(&mut row, strat.theta(i));
            push_matrix(&mut row, strat.theta_bar(i));
            push_vector(&mut row, strat.v(i));
            row
        })
        .collect();
    (header, rows)
}

/// `sweep.csv`; `cauchy_diff` on row `k` is the distance to level `k − 1`.
pub fn sweep_table(report: &SweepReport) -> (Vec<String>, Vec<Vec<String>>) {
    let header = [
        "epsilon",
        "norm",
        "cost",
        "cost_stderr",
        "value",
        "value_stderr",
        "cauchy_diff",
    ]
    .map(String::from)
    .to_vec();
    let rows = report
        .records
        .iter()
        .enumerate()
        .map(|(k, r)| {
            vec![
                num(r.epsilon),
                num(r.norm),
                num(r.cost.value),
                num(r.cost.stderr),
                num(r.value.value),
                num(r.value.stderr),
                if k == 0 {
                    String::new()
                } else {
                    num(report.cauchy_diffs[k - 1])
                },
            ]
        })
        .collect();
    (header, rows)
}

/// `divergence.csv`; a ratio is left empty on the first row and where it is undefined.
pub fn divergence_table(rows: &[DivergenceRow]) -> (Vec<String>, Vec<Vec<String>>) {
    let header = [
        "delta",
        "theta_integral",
        "theta_bar_integral",
        "theta_ratio",
        "theta_bar_ratio",
    ]
    .map(String::from)
    .to_vec();
    let ratios = doubling_ratios(rows);
    let body = rows
        .iter()
        .enumerate()
        .map(|(k, r)| {
            let (a, b) = if k == 0 {
                (String::new(), String::new())
            } else {
                let show = |x: f64| if x.is_finite() { num(x) } else { String::new() };
                (show(ratios[k - 1].0), show(ratios[k - 1].1))
            };
            vec![num(r.delta), num(r.theta), num(r.theta_bar), a, b]
        })
        .collect();
    (header, body)
}

/// `simulate.csv`: propagated mean, ensemble mean and standard deviation of `X`.
pub fn simulate_table(ens: &PathEnsemble) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec!["s".to_string()];
    header.extend(vector_cols("mean_x", ens.n));
    header.extend(vector_cols("ens_mean_x", ens.n));
    header.extend(vector_cols("ens_std_x", ens.n));
    let rows = (0..ens.grid.len())
        .map(|i| {
            let (avg, sd) = ens.state_stats(i);
            let mut row = vec![num(ens.grid.time(i))];
            push_vector(&mut row, &ens.mean_x[i]);
            push_vector(&mut row, &avg);
            push_vector(&mut row, &sd);
            row
        })
        .collect();
    (header, rows)
}

/// `paths.csv` with the first `count` paths, one row per path and node.
pub fn paths_table(ens: &PathEnsemble, count: usize) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec!["path".to_string(), "s".to_string()];
    header.extend(vector_cols("x", ens.n));
    header.extend(vector_cols("u", ens.m));
    let mut rows = Vec::new();
    for p in 0..count.min(ens.n_paths) {
        for i in 0..ens.grid.len() {
            let mut row = vec![p.to_string(), num(ens.grid.time(i))];
            row.extend(ens.x(p, i).iter().map(|&x| num(x)));
            row.extend(ens.u(p, i).iter().map(|&x| num(x)));
            rows.push(row);
        }
    }
    (header, rows)
}

pub fn sweep_summary(report: &SweepReport, source: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "problem: {source}");
    let _ = writeln!(s, "paths: {}, seed: {}", report.n_paths, report.seed);
    let _ = writeln!(s, "levels:");
    for (k, r) in report.records.iter().enumerate() {
        let diff = if k == 0 {
            String::new()
        } else {
            format!(", diff to previous {:.3e}", report.cauchy_diffs[k - 1])
        };
        let _ = writeln!(
            s,
            "  eps {:.6e}: norm {:.6}, J {:.6} ± {:.1e}, J_eps {:.6} ± {:.1e}{diff}",
            r.epsilon, r.norm, r.cost.value, r.cost.stderr, r.value.value, r.value.stderr
        );
    }
    let _ = writeln!(
        s,
        "bounded: {} (squared norms against cap {:.3e})",
        report.bounded, report.bound_cap
    );
    let _ = writeln!(
        s,
        "cauchy: final diff {:.3e} against tolerance {:.3e}",
        report.cauchy_diffs.last().copied().unwrap_or(f64::NAN),
        report.tol_cauchy
    );
    let _ = writeln!(s, "diagnosis: {}", report.diagnosis);
    let _ = writeln!(
        s,
        "note: the cap and tolerance are heuristic thresholds; a finite schedule gives evidence, not proof"
    );
    match (&report.weak_gains, &report.weak_error) {
        (Some(w), _) => {
            let g = w.strategy.grid;
            let _ = writeln!(
                s,
                "weak gains on [{}, {}] ({}): final distances theta {:.3e}, theta_bar {:.3e}, v {:.3e}",
                g.t0, g.t1, w.rule, w.final_distances[0], w.final_distances[1], w.final_distances[2]
            );
        }
        (None, Some(e)) => {
            let _ = writeln!(s, "weak gains: unavailable ({e})");
        }
        (None, None) => {
            let _ = writeln!(s, "weak gains: not extracted");
        }
    }
    match report.representation_error {
        Some(e) => {
            let _ = writeln!(s, "representation: relative L2 error {e:.3e}");
        }
        None => {
            let _ = writeln!(s, "representation: not checked");
        }
    }
    s
}
