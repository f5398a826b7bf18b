//! `mfslq`: command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numerical
//! failure, 3 a `verify` check failed.

mod output;
mod verify;

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mfslq::cost::evaluate_cost;
use mfslq::feedback::closed_loop_strategy;
use mfslq::pipeline::{
    check_divergence, default_truncation, extract_weak_gains_from, run_sweep, solve_strategies,
    verify_representation, EpsilonSchedule, LimitRule, SweepOptions,
};
use mfslq::riccati::{check_regularity, solve_gre, solve_perturbed, Block};
use mfslq::simulate::simulate_closed_loop;
use mfslq::{Error, ProblemSpec};

use output::{num, OutDir};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Numerical(String),
    VerifyFailed,
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::VerifyFailed => 3,
        }
    }
}

/// Tag a library error with the stage that raised it.
fn stage<T>(name: &str, r: mfslq::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| {
        // numerical errors already name their module
        let text = e.to_string();
        let msg = if ["riccati:", "feedback:", "simulate:", "pipeline:"]
            .iter()
            .any(|p| text.starts_with(p))
        {
            text
        } else {
            format!("{name}: {text}")
        };
        match e {
            Error::ConvexityLoss { .. }
            | Error::BlowUp { .. }
            | Error::Singular { .. }
            | Error::NotRegular { .. }
            | Error::NonFiniteState { .. }
            | Error::NonFinite(_)
            | Error::NotCauchy { .. } => CliError::Numerical(msg),
            _ => CliError::Usage(msg),
        }
    })
}

#[derive(Parser)]
#[command(
    name = "mfslq",
    version,
    about = "Mean-field stochastic LQ control by epsilon-perturbation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the perturbed Riccati system at one epsilon.
    Riccati {
        #[command(flatten)]
        source: Source,
        /// Perturbation level, > 0. Use `gre` for the unperturbed equations.
        #[arg(long)]
        eps: f64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Solve the unperturbed Riccati system and test regularity.
    Gre {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Simulate the closed loop at one epsilon (0 uses the unperturbed gains).
    Simulate {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        eps: f64,
        #[command(flatten)]
        mc: MonteCarlo,
        /// Also write the first N paths to paths.csv.
        #[arg(long, default_value_t = 0)]
        dump_paths: usize,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run the epsilon sweep, extract limit gains and check the representation.
    Sweep {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        schedule: Schedule,
        #[command(flatten)]
        mc: MonteCarlo,
        #[command(flatten)]
        window: Window,
        /// Cauchy tolerance for the control sequence.
        #[arg(long)]
        tol_cauchy: Option<f64>,
        /// Relative tolerance for the limit gains.
        #[arg(long, default_value_t = 1e-3)]
        weak_tol: f64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Check the presets against their closed-form solutions.
    Verify {
        /// Restrict to one preset; both run by default.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, value_parser = clap::value_parser!(u64).range(10..))]
        steps: Option<u64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Partial integrals of the squared limit gains toward the horizon end.
    Divergence {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        schedule: Schedule,
        #[arg(long)]
        t_lo: Option<f64>,
        /// Smallest distance to the horizon end; the gains are extracted up
        /// to `T - delta_end` and integrated for 4, 2 and 1 times it.
        #[arg(long)]
        delta_end: Option<f64>,
        #[arg(long, default_value_t = 1e-2)]
        weak_tol: f64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct SourceChoice {
    /// Built-in problem: example-1.1 or example-5.1.
    #[arg(long)]
    preset: Option<String>,
    /// TOML problem file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct Source {
    #[command(flatten)]
    choice: SourceChoice,
    /// Number of grid steps, at least 10.
    #[arg(long, value_parser = clap::value_parser!(u64).range(10..))]
    steps: Option<u64>,
}

impl Source {
    fn load(&self) -> Result<(ProblemSpec, String), CliError> {
        let (spec, label) = match (&self.choice.preset, &self.choice.config) {
            (Some(name), _) => (stage("preset", ProblemSpec::preset(name))?, name.clone()),
            (None, Some(path)) => {
                let text = fs::read_to_string(path).map_err(|e| {
                    CliError::Usage(format!("cannot read config {}: {e}", path.display()))
                })?;
                let spec = stage(
                    &format!("config {}", path.display()),
                    ProblemSpec::from_toml(&text),
                )?;
                (spec, path.display().to_string())
            }
            (None, None) => return Err(CliError::Usage("give --preset or --config".into())),
        };
        let spec = match self.steps {
            Some(n) => stage("--steps", spec.with_steps(n as usize))?,
            None => spec,
        };
        Ok((spec, label))
    }
}

#[derive(Args)]
struct Schedule {
    /// Largest level of the geometric schedule eps_max * 2^-k.
    #[arg(long, default_value_t = 1.0)]
    eps_max: f64,
    /// Number of levels.
    #[arg(long, default_value_t = 13)]
    eps_count: usize,
}

impl Schedule {
    fn build(&self) -> Result<EpsilonSchedule, CliError> {
        if self.eps_count < 2 {
            return Err(CliError::Usage("--eps-count must be at least 2".into()));
        }
        stage(
            "--eps-max",
            EpsilonSchedule::geometric(self.eps_max, self.eps_count),
        )
    }
}

#[derive(Args)]
struct MonteCarlo {
    /// Number of paths, at least 1.
    #[arg(long, default_value_t = 10_000, value_parser = clap::value_parser!(u64).range(1..))]
    paths: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Window {
    /// Start of the interval for the limit gains.
    #[arg(long)]
    t_lo: Option<f64>,
    /// End of the interval for the limit gains.
    #[arg(long)]
    t_hi: Option<f64>,
    /// Distance from the horizon end to `t_hi`; an alternative to `--t-hi`.
    #[arg(long)]
    delta_end: Option<f64>,
}

impl Window {
    fn resolve(&self, spec: &ProblemSpec) -> Result<(f64, f64), CliError> {
        let (lo0, hi0) = default_truncation(&spec.grid);
        let t1 = spec.grid.t1;
        let hi = match (self.t_hi, self.delta_end) {
            (Some(h), Some(d)) if (h - (t1 - d)).abs() > 1e-12 => {
                return Err(CliError::Usage(format!(
                    "--t-hi {h} and --delta-end {d} disagree (T = {t1})"
                )))
            }
            (Some(h), _) => h,
            (None, Some(d)) => t1 - d,
            (None, None) => hi0,
        };
        Ok((self.t_lo.unwrap_or(lo0), hi))
    }
}

fn positive(name: &str, x: f64) -> Result<f64, CliError> {
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(CliError::Usage(format!(
            "{name} must be a positive number, got {x}"
        )))
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Riccati { source, eps, out } => {
            if eps == 0.0 {
                return Err(CliError::Usage(
                    "--eps must be > 0; the unperturbed system is solved by `gre`".into(),
                ));
            }
            let eps = positive("--eps", eps)?;
            let (spec, label) = source.load()?;
            let dir = OutDir::create(&out)?;
            let sol = stage("riccati", solve_perturbed(&spec, eps))?;
            let strat = stage("feedback", closed_loop_strategy(&spec, &sol))?;
            let (h, r) = output::riccati_table(&sol, spec.n);
            dir.csv("riccati.csv", &h, &r)?;
            let (h, r) = output::strategy_table(&strat);
            dir.csv("strategy.csv", &h, &r)?;
            let mut s = String::new();
            let _ = writeln!(s, "problem: {label}");
            let _ = writeln!(
                s,
                "perturbed Riccati system solved at eps = {eps} on {} steps",
                spec.grid.n_steps
            );
            let _ = writeln!(s, "P(t0) = {}", fmt_matrix(sol.p(0)));
            let _ = writeln!(s, "Pi(t0) = {}", fmt_matrix(sol.pi(0)));
            dir.summary(&s)
        }
        Command::Gre { source, out } => {
            let (spec, label) = source.load()?;
            let dir = OutDir::create(&out)?;
            let sol = stage("riccati", solve_gre(&spec))?;
            let verdict = stage("regularity", check_regularity(&sol, &spec, 1e-8))?;
            let (h, r) = output::riccati_table(&sol, spec.n);
            dir.csv("riccati.csv", &h, &r)?;
            let mut s = String::new();
            let _ = writeln!(s, "problem: {label}");
            let _ = writeln!(s, "P(t0) = {}", fmt_matrix(sol.p(0)));
            let _ = writeln!(s, "Pi(t0) = {}", fmt_matrix(sol.pi(0)));
            let count = |b: Block| verdict.failures.iter().filter(|f| f.block == b).count();
            let _ = writeln!(
                s,
                "regular: {} (failing nodes: P block {}, Pi block {}, of {})",
                verdict.is_regular,
                count(Block::P),
                count(Block::Pi),
                spec.grid.len()
            );
            if let Some(f) = verdict.failures.first() {
                let _ = writeln!(
                    s,
                    "first failure at s = {}: {:?} in block {:?}",
                    f.time, f.reason, f.block
                );
            }
            if verdict.is_regular {
                let strat = stage("feedback", closed_loop_strategy(&spec, &sol))?;
                let (h, r) = output::strategy_table(&strat);
                dir.csv("strategy.csv", &h, &r)?;
            }
            dir.summary(&s)
        }
        Command::Simulate {
            source,
            eps,
            mc,
            dump_paths,
            out,
        } => {
            if !(eps >= 0.0 && eps.is_finite()) {
                return Err(CliError::Usage(format!("--eps must be >= 0, got {eps}")));
            }
            let (spec, label) = source.load()?;
            let dir = OutDir::create(&out)?;
            let sol = if eps > 0.0 {
                stage("riccati", solve_perturbed(&spec, eps))?
            } else {
                stage("riccati", solve_gre(&spec))?
            };
            let strat = stage("feedback", closed_loop_strategy(&spec, &sol))?;
            let ens = stage(
                "simulate",
                simulate_closed_loop(&spec, &strat, &spec.initial, mc.paths as usize, mc.seed),
            )?;
            let j = stage("cost", evaluate_cost(&spec, &ens, 0.0))?;
            let j_eps = stage("cost", evaluate_cost(&spec, &ens, eps))?;
            let (h, r) = output::simulate_table(&ens);
            dir.csv("simulate.csv", &h, &r)?;
            let header = [
                "label",
                "value",
                "stderr",
                "n_paths",
                "terminal_stochastic",
                "terminal_mean",
                "running_stochastic",
                "running_mean",
                "epsilon_penalty",
            ]
            .map(String::from)
            .to_vec();
            let rows: Vec<Vec<String>> = [("J", &j), ("J_eps", &j_eps)]
                .iter()
                .map(|(name, c)| {
                    let k = &c.components;
                    vec![
                        name.to_string(),
                        num(c.value),
                        num(c.stderr),
                        c.n_paths.to_string(),
                        num(k.terminal_stochastic),
                        num(k.terminal_mean),
                        num(k.running_stochastic),
                        num(k.running_mean),
                        num(k.epsilon_penalty),
                    ]
                })
                .collect();
            dir.csv("cost.csv", &header, &rows)?;
            if dump_paths > 0 {
                let (h, r) = output::paths_table(&ens, dump_paths);
                dir.csv("paths.csv", &h, &r)?;
            }
            let mut s = String::new();
            let _ = writeln!(s, "problem: {label}");
            let _ = writeln!(s, "eps = {eps}, paths = {}, seed = {}", mc.paths, mc.seed);
            let _ = writeln!(s, "J = {:.6} ± {:.1e}", j.value, j.stderr);
            let _ = writeln!(s, "J_eps = {:.6} ± {:.1e}", j_eps.value, j_eps.stderr);
            let _ = writeln!(
                s,
                "E[X(T)] = {}",
                fmt_vector(ens.mean_x.last().expect("nonempty grid"))
            );
            dir.summary(&s)
        }
        Command::Sweep {
            source,
            schedule,
            mc,
            window,
            tol_cauchy,
            weak_tol,
            out,
        } => {
            let (spec, label) = source.load()?;
            let schedule = schedule.build()?;
            let interval = window.resolve(&spec)?;
            if let Some(t) = tol_cauchy {
                positive("--tol-cauchy", t)?;
            }
            positive("--weak-tol", weak_tol)?;
            let dir = OutDir::create(&out)?;
            let opts = SweepOptions {
                n_paths: mc.paths as usize,
                seed: mc.seed,
                tol_cauchy,
                truncation: Some(interval),
                weak_tol,
                ..SweepOptions::default()
            };
            let mut report = stage(
                "pipeline",
                run_sweep(&spec, &spec.initial, &schedule, &opts),
            )?;
            let (h, r) = output::sweep_table(&report);
            dir.csv("sweep.csv", &h, &r)?;

            let mut rep_row = vec![num(interval.0), num(interval.1), String::new()];
            if report.converged && report.weak_gains.is_some() {
                let err = stage(
                    "representation",
                    verify_representation(
                        &spec,
                        &spec.initial,
                        &report,
                        spec.grid.t1 - interval.1,
                        mc.paths as usize,
                        mc.seed,
                    ),
                )?;
                report.representation_error = Some(err);
                rep_row[2] = num(err);
            }
            let header = ["t_lo", "t_hi", "relative_error"]
                .map(String::from)
                .to_vec();
            dir.csv("representation.csv", &header, &[rep_row])?;

            if let Some(w) = &report.weak_gains {
                let (h, r) = output::gains_table(&w.strategy);
                dir.csv("gains.csv", &h, &r)?;
                // distances from the horizon end, doubling back toward the interval start
                let t1 = spec.grid.t1;
                let h = spec.grid.step();
                let base = ((t1 - interval.1) / h).round() * h;
                let deltas: Vec<f64> = [4.0, 2.0, 1.0]
                    .iter()
                    .map(|k| k * base)
                    .filter(|d| t1 - d > interval.0)
                    .collect();
                if base > 0.0 && !deltas.is_empty() {
                    let rows = stage("divergence", check_divergence(&w.strategy, t1, &deltas))?;
                    let (h, r) = output::divergence_table(&rows);
                    dir.csv("divergence.csv", &h, &r)?;
                }
            }
            dir.summary(&output::sweep_summary(&report, &label))
        }
        Command::Verify { preset, steps, out } => {
            let steps = steps.map(|n| n as usize);
            let mut checks = Vec::new();
            let wanted = |name: &str| preset.as_deref().is_none_or(|p| p == name);
            if let Some(p) = &preset {
                if !mfslq::problem::PRESETS.contains(&p.as_str()) {
                    return Err(CliError::Usage(format!(
                        "unknown preset `{p}` (known: {})",
                        mfslq::problem::PRESETS.join(", ")
                    )));
                }
            }
            if wanted("example-1.1") {
                checks.extend(stage("verify example-1.1", verify::example_11(steps))?);
            }
            if wanted("example-5.1") {
                checks.extend(stage("verify example-5.1", verify::example_51(steps))?);
            }
            let dir = OutDir::create(&out)?;
            let header = ["preset", "check", "pass", "measured", "tolerance"]
                .map(String::from)
                .to_vec();
            let rows: Vec<Vec<String>> = checks
                .iter()
                .map(|c| {
                    vec![
                        c.preset.to_string(),
                        c.name.to_string(),
                        c.pass.to_string(),
                        num(c.measured),
                        num(c.tol),
                    ]
                })
                .collect();
            dir.csv("verify.csv", &header, &rows)?;
            let mut s = String::new();
            for c in &checks {
                let tol = if c.tol > 0.0 {
                    format!(" (tol {:.0e})", c.tol)
                } else {
                    String::new()
                };
                let _ = writeln!(
                    s,
                    "[{}] {} {}: {}{tol}",
                    if c.pass { "PASS" } else { "FAIL" },
                    c.preset,
                    c.name,
                    c.detail,
                );
            }
            let failed = checks.iter().filter(|c| !c.pass).count();
            let _ = writeln!(
                s,
                "{} of {} checks passed",
                checks.len() - failed,
                checks.len()
            );
            dir.summary(&s)?;
            if failed > 0 {
                Err(CliError::VerifyFailed)
            } else {
                Ok(())
            }
        }
        Command::Divergence {
            source,
            schedule,
            t_lo,
            delta_end,
            weak_tol,
            out,
        } => {
            let (spec, label) = source.load()?;
            let schedule = schedule.build()?;
            let g = spec.grid;
            let span = g.t1 - g.t0;
            let delta = positive("--delta-end", delta_end.unwrap_or(0.0125 * span))?;
            let lo = t_lo.unwrap_or(default_truncation(&g).0);
            positive("--weak-tol", weak_tol)?;
            let dir = OutDir::create(&out)?;
            let strategies = stage(
                "riccati",
                solve_strategies(&spec, &schedule, &Default::default()),
            )?;
            let weak = stage(
                "pipeline",
                extract_weak_gains_from(
                    &strategies,
                    &schedule,
                    (lo, g.t1 - delta),
                    weak_tol,
                    LimitRule::Richardson,
                ),
            )?;
            let deltas = [4.0 * delta, 2.0 * delta, delta];
            let rows = stage(
                "divergence",
                check_divergence(&weak.strategy, g.t1, &deltas),
            )?;
            let (h, r) = output::divergence_table(&rows);
            dir.csv("divergence.csv", &h, &r)?;
            let (h, r) = output::gains_table(&weak.strategy);
            dir.csv("gains.csv", &h, &r)?;
            let mut s = String::new();
            let _ = writeln!(s, "problem: {label}");
            let _ = writeln!(s, "limit gains on [{lo}, {}]", g.t1 - delta);
            for (k, r) in rows.iter().enumerate() {
                let _ = write!(
                    s,
                    "delta {:.4e}: int |theta|^2 = {:.6e}, int |theta_bar|^2 = {:.6e}",
                    r.delta, r.theta, r.theta_bar
                );
                if k > 0 {
                    let _ = write!(
                        s,
                        ", ratios {:.4}, {:.4}",
                        r.theta / rows[k - 1].theta,
                        r.theta_bar / rows[k - 1].theta_bar
                    );
                }
                s.push('\n');
            }
            let _ = writeln!(
                s,
                "ratios near 2 under halving indicate a 1/(T - s) singularity"
            );
            dir.summary(&s)
        }
    }
}

fn fmt_matrix(m: &mfslq::Matrix) -> String {
    let rows: Vec<String> = m
        .row_iter()
        .map(|r| {
            let xs: Vec<String> = r.iter().map(|x| format!("{x:.6e}")).collect();
            format!("[{}]", xs.join(", "))
        })
        .collect();
    format!("[{}]", rows.join(", "))
}

fn fmt_vector(v: &mfslq::Vector) -> String {
    let xs: Vec<String> = v.iter().map(|x| format!("{x:.6e}")).collect();
    format!("[{}]", xs.join(", "))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Usage(m) => eprintln!("error: {m}"),
                CliError::Numerical(m) => eprintln!("numerical failure: {m}"),
                CliError::VerifyFailed => eprintln!("verify: at least one check failed"),
            }
            ExitCode::from(e.code())
        }
    }
}
