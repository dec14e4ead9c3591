//! Command-line front end. Exit codes: 0 success, 1 model validation
//! failure, 2 a check or verdict failed, 3 I/O, parse or parameter error.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bellman::{solve_discounted, solve_untruncated, SolveError, Truncation};
use crate::diagnostics::{condition_b_from_sweep, example1_report, ClosedFormBound, ConditionBVerdict, DiagnosticsError};
use crate::game::{
    discounted_game_cost, entropy_bound_check, opponent_tilt, random_admissible_opponent, GameError,
};
use crate::model::{classify_regime, load_model, validate_model, FiniteMDP, ModelError, Regime, StationaryPolicy};
use crate::par::Exec;
use crate::vanishing::{
    average_solution, beta_grid, discount_sweep_with, estimate_growth_rate, VanishingError, DEFAULT_BETA_COUNT,
    DEFAULT_BETA_START, DEFAULT_TAIL,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID_MODEL: i32 = 1;
pub const EXIT_CHECK_FAILED: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// Grid count used by `example1` in regime I, where the optimality
/// inequality is only resolved to 1e-8 once `1 − β` is about 1e-9.
pub const EXAMPLE1_FINE_COUNT: usize = 28;

#[derive(Debug, Parser)]
#[command(name = "risk-mdp", version, about = "Risk-sensitive average-cost MDP solver and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy)]
struct Grid {
    start: f64,
    count: usize,
}

fn parse_grid(s: &str) -> Result<Grid, String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected start:count, got {s:?}"))?;
    let start: f64 = a.trim().parse().map_err(|e| format!("bad start {a:?}: {e}"))?;
    let count: usize = b.trim().parse().map_err(|e| format!("bad count {b:?}: {e}"))?;
    beta_grid(start, count).map_err(|e| e.to_string())?;
    Ok(Grid { start, count })
}

impl Grid {
    fn betas(self) -> Vec<f64> {
        beta_grid(self.start, self.count).expect("validated when parsed")
    }
}

impl Default for Grid {
    fn default() -> Self {
        Grid { start: DEFAULT_BETA_START, count: DEFAULT_BETA_COUNT }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a model file against every structural invariant.
    Validate {
        model: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Solve the discounted equation for one discount factor.
    SolveDiscounted {
        model: PathBuf,
        #[arg(long)]
        beta: f64,
        #[arg(long)]
        gamma: f64,
        /// Truncate costs at level N.
        #[arg(long)]
        truncate: Option<u32>,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Vanishing-discount average-cost solution and optimality inequality.
    SolveAverage {
        model: PathBuf,
        #[arg(long)]
        gamma: f64,
        /// Discount grid `start:count`, `β_k = 1 − 2^{−k}(1 − start)`.
        #[arg(long, value_parser = parse_grid)]
        beta_grid: Option<Grid>,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        /// Tolerance for the inequality and growth-rate checks.
        #[arg(long, default_value_t = 1e-8)]
        check_tol: f64,
        #[arg(long, default_value_t = DEFAULT_TAIL)]
        tail: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Boundedness scan of the relative value functions.
    CheckB {
        model: PathBuf,
        #[arg(long)]
        gamma: f64,
        #[arg(long, default_value_t = 0.0)]
        eta: f64,
        #[arg(long, value_parser = parse_grid)]
        beta_grid: Option<Grid>,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Saddle-point checks of the entropy game at one discount factor.
    VerifyGame {
        model: PathBuf,
        #[arg(long)]
        gamma: f64,
        #[arg(long)]
        beta: f64,
        /// Random opponents and random controllers to test.
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Regression report for the two-state example.
    Example1 {
        #[arg(long)]
        rho: f64,
        #[arg(long)]
        gamma: f64,
        /// Defaults to 0.9:28 in regime I and 0.9:13 otherwise.
        #[arg(long, value_parser = parse_grid)]
        beta_grid: Option<Grid>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Model(ModelError),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Model(ModelError::Invalid(_)) => EXIT_INVALID_MODEL,
            CliError::Failed(_) => EXIT_CHECK_FAILED,
            _ => EXIT_IO,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Model(e)
    }
}

impl From<SolveError> for CliError {
    fn from(e: SolveError) -> Self {
        match e {
            SolveError::Model(m) => CliError::Model(m),
            SolveError::InvalidParameter(s) => CliError::Input(s),
            other => CliError::Failed(other.to_string()),
        }
    }
}

impl From<VanishingError> for CliError {
    fn from(e: VanishingError) -> Self {
        match e {
            VanishingError::Model(m) => CliError::Model(m),
            VanishingError::Solve(s) => s.into(),
            VanishingError::InvalidParameter(s) => CliError::Input(s),
            other => CliError::Failed(other.to_string()),
        }
    }
}

impl From<DiagnosticsError> for CliError {
    fn from(e: DiagnosticsError) -> Self {
        match e {
            DiagnosticsError::Model(m) => CliError::Model(m),
            DiagnosticsError::Solve(s) => s.into(),
            DiagnosticsError::Vanishing(v) => v.into(),
            DiagnosticsError::InvalidParameter(s) => CliError::Input(s),
        }
    }
}

impl From<GameError> for CliError {
    fn from(e: GameError) -> Self {
        match e {
            GameError::Model(m) => CliError::Model(m),
            GameError::InvalidParameter(s) => CliError::Input(s),
            other => CliError::Failed(other.to_string()),
        }
    }
}

/// 17 significant digits.
fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v > 0.0 {
        "inf".into()
    } else if v < 0.0 {
        "-inf".into()
    } else {
        "nan".into()
    }
}

fn short(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.10}")
    } else {
        num(v)
    }
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Table { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    fn write_csv(&self, path: &Path) -> Result<(), CliError> {
        let io_err = |e: csv::Error| CliError::Io { path: path.to_path_buf(), source: e.into() };
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)
            .map_err(io_err)?;
        w.write_record(&self.header).map_err(io_err)?;
        for row in &self.rows {
            w.write_record(row).map_err(io_err)?;
        }
        w.flush().map_err(|e| CliError::Io { path: path.to_path_buf(), source: e })
    }
}

fn read_model(path: &Path) -> Result<FiniteMDP, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
    Ok(load_model(&text)?)
}

fn policy_label(p: &StationaryPolicy, x: usize) -> String {
    p.choice[x].to_string()
}

fn emit(out: &mut dyn Write, csv: &Option<PathBuf>, csv_table: &Table) -> Result<(), CliError> {
    if let Some(path) = csv {
        csv_table.write_csv(path)?;
        writeln!(out, "csv written to {}", path.display()).ok();
    }
    Ok(())
}

fn validate(out: &mut dyn Write, model: &Path, csv: &Option<PathBuf>) -> Result<bool, CliError> {
    let text = fs::read_to_string(model).map_err(|source| CliError::Io { path: model.to_path_buf(), source })?;
    let parsed: FiniteMDP = serde_json::from_str(&text).map_err(|e| CliError::Model(ModelError::Parse(e)))?;
    let report = validate_model(&parsed);
    let mut table = Table::new(&["index", "violation"]);
    for (i, v) in report.violations.iter().enumerate() {
        table.push(vec![i.to_string(), v.to_string()]);
    }
    if report.is_valid() {
        let pairs: usize = parsed.actions.iter().map(Vec::len).sum();
        writeln!(out, "valid: {} states, {} state-action pairs", parsed.n_states, pairs).ok();
    } else {
        writeln!(out, "invalid: {} violation(s)", report.violations.len()).ok();
        write!(out, "{report}").ok();
    }
    emit(out, csv, &table)?;
    if report.is_valid() {
        Ok(true)
    } else {
        Err(CliError::Model(ModelError::Invalid(report)))
    }
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<bool, CliError> {
    match cli.command {
        Command::Validate { model, csv } => validate(out, &model, &csv),
        Command::SolveDiscounted { model, beta, gamma, truncate, tol, csv } => {
            let m = read_model(&model)?;
            let truncation = truncate.map_or(Truncation::Untruncated, Truncation::Level);
            let sol = solve_discounted(&m, beta, gamma, truncation, tol)?;
            writeln!(out, "beta {beta}  gamma {gamma}  truncation {truncation}").ok();
            writeln!(
                out,
                "iterations {}  error bound {:e}{}",
                sol.iterations,
                sol.residual,
                if sol.precision_limited { "  (precision limited)" } else { "" }
            )
            .ok();
            if sol.near_unit_discount {
                writeln!(out, "warning: 1 - beta < 1e-6, values are ill-conditioned").ok();
            }
            writeln!(out, "{:>6}  {:>22}  {:>22}  action", "state", "V_beta", "h_beta").ok();
            let mut table = Table::new(&["state", "beta", "V_beta", "h_beta", "action"]);
            for x in 0..m.n_states {
                let v = sol.value.values[x];
                let h = sol.relative[x];
                writeln!(out, "{x:>6}  {:>22}  {:>22}  {}", short(v), short(h), policy_label(&sol.policy, x)).ok();
                table.push(vec![x.to_string(), num(beta), num(v), num(h), policy_label(&sol.policy, x)]);
            }
            emit(out, &csv, &table)?;
            Ok(true)
        }
        Command::SolveAverage { model, gamma, beta_grid, tol, check_tol, tail, csv } => {
            let m = read_model(&model)?;
            let betas = beta_grid.unwrap_or_default().betas();
            let sweep = discount_sweep_with(&m, gamma, &betas, tol, Exec::default())?;
            for (beta, e) in sweep.failures() {
                writeln!(out, "beta {beta}: solve failed: {e}").ok();
            }
            let (constant, avg) = average_solution(&m, &sweep, tail)?;
            let growth = estimate_growth_rate(&m, &avg.policy, gamma, check_tol * 1e-2)?;
            let target = constant.l_hat / gamma;
            let inequality_ok = avg.inequality_residual.iter().all(|&r| r >= -check_tol);
            let growth_ok = growth.rates().iter().all(|g| (g - target).abs() <= check_tol);
            writeln!(
                out,
                "l_hat {}  (l_hat/gamma {})  spread over last 3 grid points {:e}  largest beta {}",
                short(constant.l_hat),
                short(target),
                constant.spread,
                constant.beta
            )
            .ok();
            writeln!(
                out,
                "{:>6}  {:>16}  action  {:>18}  {:>18}  {:>16}",
                "state", "h", "ineq_residual", "eq_residual", "growth_rate"
            )
            .ok();
            let mut table = Table::new(&[
                "state",
                "l_hat",
                "h",
                "action",
                "inequality_residual",
                "equation_residual",
                "growth_rate",
            ]);
            for x in 0..m.n_states {
                writeln!(
                    out,
                    "{x:>6}  {:>16}  {:>6}  {:>18.3e}  {:>18.3e}  {:>16}",
                    short(avg.h[x]),
                    policy_label(&avg.policy, x),
                    avg.inequality_residual[x],
                    avg.equation_residual[x],
                    short(growth.rates()[x])
                )
                .ok();
                table.push(vec![
                    x.to_string(),
                    num(constant.l_hat),
                    num(avg.h[x]),
                    policy_label(&avg.policy, x),
                    num(avg.inequality_residual[x]),
                    num(avg.equation_residual[x]),
                    num(growth.rates()[x]),
                ]);
            }
            writeln!(
                out,
                "optimality inequality (tol {check_tol:e}): {}",
                if inequality_ok { "holds" } else { "VIOLATED" }
            )
            .ok();
            writeln!(
                out,
                "growth rate of extracted policy = l_hat/gamma: {}",
                if growth_ok { "yes" } else { "NO" }
            )
            .ok();
            emit(out, &csv, &table)?;
            Ok(inequality_ok && growth_ok)
        }
        Command::CheckB { model, gamma, eta, beta_grid, tol, csv } => {
            let m = read_model(&model)?;
            let betas = beta_grid.unwrap_or_default().betas();
            let sweep = discount_sweep_with(&m, gamma, &betas, tol, Exec::default())?;
            let report = condition_b_from_sweep(&m, &sweep, eta, Exec::default())?;
            let mut table = Table::new(&["beta", "state", "V_beta", "h_beta", "scaled_m", "bound", "verdict"]);
            writeln!(out, "{:>18}  {:>6}  {:>18}  {:>18}", "beta", "state", "h_beta", "bound").ok();
            for ((beta, rec), bound) in sweep.successful().zip(&report.bounds) {
                for x in 0..m.n_states {
                    writeln!(out, "{beta:>18}  {x:>6}  {:>18}  {:>18}", short(rec.h_beta[x]), short(bound.bound[x])).ok();
                    table.push(vec![
                        num(beta),
                        x.to_string(),
                        num(rec.values()[x]),
                        num(rec.h_beta[x]),
                        num(rec.scaled),
                        num(bound.bound[x]),
                        report.verdict.to_string(),
                    ]);
                }
            }
            writeln!(out, "verdict: {} (grid-level evidence)", report.grid_note()).ok();
            emit(out, &csv, &table)?;
            Ok(report.verdict == ConditionBVerdict::HoldsOnGrid)
        }
        Command::VerifyGame { model, gamma, beta, samples, seed, tol, csv } => {
            let m = read_model(&model)?;
            verify_game(out, &m, gamma, beta, samples, seed, tol, &csv)
        }
        Command::Example1 { rho, gamma, beta_grid, csv } => {
            let regime = classify_regime(rho, gamma)?;
            let grid = beta_grid.unwrap_or(match regime {
                Regime::I => Grid { start: DEFAULT_BETA_START, count: EXAMPLE1_FINE_COUNT },
                _ => Grid::default(),
            });
            let report = example1_report(rho, gamma, &grid.betas())?;
            writeln!(out, "rho {rho}  gamma {gamma}  regime {}", report.regime).ok();
            writeln!(out, "{:>22}  {:>22}  {:>22}  {:>12}  pass", "beta", "V_beta(1)", "bound", "margin").ok();
            let mut table = Table::new(&["beta", "V_beta", "bound_kind", "bound", "margin", "pass"]);
            for row in &report.rows {
                let (kind, b) = match row.bound {
                    Some(ClosedFormBound::Upper(b)) => ("upper", b),
                    Some(ClosedFormBound::Lower(b)) => ("lower", b),
                    None => ("none", f64::NAN),
                };
                let margin = row.margin.unwrap_or(f64::NAN);
                writeln!(
                    out,
                    "{:>22}  {:>22}  {:>22}  {:>12}  {}",
                    row.beta,
                    short(row.v1),
                    if b.is_nan() { "-".to_string() } else { format!("{kind} {}", short(b)) },
                    if margin.is_nan() { "-".to_string() } else { format!("{margin:.3e}") },
                    row.pass
                )
                .ok();
                table.push(vec![num(row.beta), num(row.v1), kind.into(), num(b), num(margin), row.pass.to_string()]);
            }
            writeln!(
                out,
                "condition B: {} (expected {})",
                report.condition_b.grid_note(),
                report.expected_verdict
            )
            .ok();
            for x in 0..2 {
                writeln!(
                    out,
                    "J({x}) growth {}  theory {}  (tol {:e})",
                    short(report.growth[x]),
                    short(report.theoretical[x]),
                    report.growth_tol
                )
                .ok();
            }
            writeln!(
                out,
                "optimality inequality residuals {:?}: {}",
                report.average.inequality_residual,
                if report.inequality_holds { "hold" } else { "no solution on grid" }
            )
            .ok();
            writeln!(out, "overall: {}", if report.passed() { "PASS" } else { "FAIL" }).ok();
            emit(out, &csv, &table)?;
            Ok(report.passed())
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn verify_game(
    out: &mut dyn Write,
    m: &FiniteMDP,
    gamma: f64,
    beta: f64,
    samples: usize,
    seed: u64,
    tol: f64,
    csv: &Option<PathBuf>,
) -> Result<bool, CliError> {
    let sol = solve_untruncated(m, beta, gamma, (tol * 1e-2).max(1e-12))?;
    let w = &sol.value.values;
    let p0 = opponent_tilt(m, w, beta)?;
    let series_tol = tol * 1e-2;
    let saddle = discounted_game_cost(m, &sol.policy, &p0, beta, gamma, series_tol)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opp_max = vec![f64::NEG_INFINITY; m.n_states];
    let mut ctl_min = vec![f64::INFINITY; m.n_states];
    for _ in 0..samples {
        let p = random_admissible_opponent(m, &mut rng);
        let v = discounted_game_cost(m, &sol.policy, &p, beta, gamma, series_tol)?;
        let f = StationaryPolicy::random(m, &mut rng);
        let c = discounted_game_cost(m, &f, &p0, beta, gamma, series_tol)?;
        for x in 0..m.n_states {
            opp_max[x] = opp_max[x].max(v[x]);
            ctl_min[x] = ctl_min[x].min(c[x]);
        }
    }
    let level = m.max_cost().ceil().max(1.0) as u32;
    let entropy = entropy_bound_check(m, w, beta, gamma, level)?;

    writeln!(out, "beta {beta}  gamma {gamma}  samples {samples}  tol {tol:e}").ok();
    writeln!(
        out,
        "{:>6}  {:>18}  {:>18}  {:>18}  {:>18}",
        "state", "w_beta", "V(f, p0)", "max V(f, p)", "min V(pi, p0)"
    )
    .ok();
    let mut table = Table::new(&["state", "w_beta", "saddle_value", "max_opponent_value", "min_controller_value"]);
    let mut ok = entropy.holds;
    for x in 0..m.n_states {
        ok &= (saddle[x] - w[x]).abs() <= tol && opp_max[x] <= w[x] + tol && ctl_min[x] >= w[x] - tol;
        writeln!(
            out,
            "{x:>6}  {:>18}  {:>18}  {:>18}  {:>18}",
            short(w[x]),
            short(saddle[x]),
            short(opp_max[x]),
            short(ctl_min[x])
        )
        .ok();
        table.push(vec![x.to_string(), num(w[x]), num(saddle[x]), num(opp_max[x]), num(ctl_min[x])]);
    }
    writeln!(
        out,
        "entropy bound (N = {level}): max R {:e} <= {:e}: {}",
        entropy.max_entropy, entropy.bound, entropy.holds
    )
    .ok();
    writeln!(out, "saddle checks: {}", if ok { "pass" } else { "FAIL" }).ok();
    emit(out, csv, &table)?;
    Ok(ok)
}

/// Runs the CLI with explicit output streams and returns the exit code.
pub fn run_cli_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_IO } else { EXIT_OK };
            let rendered = e.render().to_string();
            if e.use_stderr() {
                write!(err, "{rendered}").ok();
            } else {
                write!(out, "{rendered}").ok();
            }
            return code;
        }
    };
    match execute(cli, out) {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_CHECK_FAILED,
        Err(e) => {
            writeln!(err, "error: {e}").ok();
            e.code()
        }
    }
}

/// Runs the CLI on the process streams.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = io::stdout();
    let stderr = io::stderr();
    run_cli_with(args, &mut stdout.lock(), &mut stderr.lock())
}
