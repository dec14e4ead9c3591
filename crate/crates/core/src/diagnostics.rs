//! Boundedness diagnostics for the relative values `h_β` and the Example 1
//! regression report.
//!
//! With `D = {x : V_β(x) ≤ m_β + η}` and `τ` the first entry time into `D`,
//!
//! ```text
//! h_β(x) ≤ η + inf_π log E^π_x exp(γ Σ_{k<τ} c(x_k, a_k))
//! ```
//!
//! The right-hand side is computed exactly for each deterministic stationary
//! policy from the linear system `z = M z + b` on the complement of `D`,
//! after the Perron root of `M` has been checked to lie below one.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::bellman::{solve_untruncated, LogValueFunction, SolveError};
use crate::model::{classify_regime, make_example1, FiniteMDP, ModelError, Regime, StationaryPolicy};
use crate::par::{self, Exec};
use crate::vanishing::{
    average_solution, candidate_policies, discount_sweep_with, estimate_growth_rate, AverageSolution,
    DiscountSweepResult, VanishingError, DEFAULT_TAIL,
};

/// Slack added to `m_β + η` when forming the stopping set.
pub const STOPPING_SLACK: f64 = 1e-12;
/// Hitting costs count as divergent when the Perron root is within this of one.
pub const SPECTRAL_MARGIN: f64 = 1e-10;
/// Allowed excess of `h_β` over a finite bound before domination fails.
pub const DOMINATION_TOL: f64 = 1e-8;
/// Number of trailing grid points used by the trend test.
pub const TREND_WINDOW: usize = 4;
const POWER_MAX_ITER: usize = 100_000;
const POWER_GAP: f64 = 1e-12;
const SOLVER_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Vanishing(#[from] VanishingError),
}

/// `D = {x : V_β(x) ≤ m_β + η + 1e−12}`.
pub fn stopping_set(value: &LogValueFunction, m_beta: f64, eta: f64) -> Result<BTreeSet<usize>, DiagnosticsError> {
    stopping_set_of(&value.values, m_beta, eta)
}

fn stopping_set_of(values: &[f64], m_beta: f64, eta: f64) -> Result<BTreeSet<usize>, DiagnosticsError> {
    if !(eta >= 0.0) {
        return Err(DiagnosticsError::InvalidParameter(format!("eta must be nonnegative, got {eta}")));
    }
    Ok(values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v <= m_beta + eta + STOPPING_SLACK)
        .map(|(x, _)| x)
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct HittingCostSolution {
    /// `log E_x exp(γ Σ_{k<τ_D} c)`: zero on `D`, `+∞` everywhere off `D`
    /// when the expectation diverges.
    pub u: Vec<f64>,
    pub finite: bool,
    /// Collatz–Wielandt upper estimate of the Perron root of `M`.
    pub spectral_estimate: f64,
}

/// Perron root of a nonnegative matrix by power iteration on `(A + I)/2`,
/// which is aperiodic and keeps iterates strictly positive. Returns the
/// upper Collatz–Wielandt bound.
pub fn perron_root(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut v = DVector::from_element(n, 1.0);
    let mut upper = f64::INFINITY;
    for _ in 0..POWER_MAX_ITER {
        let av = a * &v;
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for i in 0..n {
            let r = av[i] / v[i];
            lo = lo.min(r);
            hi = hi.max(r);
        }
        upper = hi;
        if hi - lo <= POWER_GAP * hi.max(1.0) {
            break;
        }
        let next = (av + &v) * 0.5;
        let scale = next.max();
        v = next / scale;
    }
    upper
}

pub fn hitting_exp_cost(
    model: &FiniteMDP,
    policy: &StationaryPolicy,
    gamma: f64,
    target: &BTreeSet<usize>,
) -> Result<HittingCostSolution, DiagnosticsError> {
    if target.is_empty() || target.iter().any(|&x| x >= model.n_states) {
        return Err(DiagnosticsError::InvalidParameter("stopping set must be a nonempty set of states".into()));
    }
    let slots = policy.slots(model)?;
    let outside: Vec<usize> = (0..model.n_states).filter(|x| !target.contains(x)).collect();
    let mut u = vec![0.0; model.n_states];
    if outside.is_empty() {
        return Ok(HittingCostSolution { u, finite: true, spectral_estimate: 0.0 });
    }
    let k = outside.len();
    let weight: Vec<f64> = outside.iter().map(|&x| (gamma * model.cost[x][slots[x]]).exp()).collect();
    let m = DMatrix::from_fn(k, k, |i, j| weight[i] * model.kernel[outside[i]][slots[outside[i]]][outside[j]]);
    let b = DVector::from_fn(k, |i, _| {
        let row = &model.kernel[outside[i]][slots[outside[i]]];
        weight[i] * target.iter().map(|&y| row[y]).sum::<f64>()
    });
    let spectral_estimate = perron_root(&m);
    let diverged = |u: &mut Vec<f64>| {
        for &x in &outside {
            u[x] = f64::INFINITY;
        }
    };
    if !(spectral_estimate < 1.0 - SPECTRAL_MARGIN) {
        diverged(&mut u);
        return Ok(HittingCostSolution { u, finite: false, spectral_estimate });
    }
    let system = DMatrix::identity(k, k) - m;
    match system.lu().solve(&b) {
        Some(z) if z.iter().all(|v| v.is_finite() && *v > 0.0) => {
            for (i, &x) in outside.iter().enumerate() {
                u[x] = z[i].ln().max(0.0);
            }
            Ok(HittingCostSolution { u, finite: true, spectral_estimate })
        }
        _ => {
            diverged(&mut u);
            Ok(HittingCostSolution { u, finite: false, spectral_estimate })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LemmaBound {
    pub beta: f64,
    pub stopping_set: BTreeSet<usize>,
    /// `η + min` over candidate policies of the hitting log-cost; `+∞` where
    /// every candidate diverges.
    pub bound: Vec<f64>,
    /// All deterministic stationary policies were tried. Otherwise the
    /// minimum is over a sample and is only an upper proxy for the infimum.
    pub exhaustive: bool,
}

fn lemma_bound(
    model: &FiniteMDP,
    beta: f64,
    values: &[f64],
    m_beta: f64,
    policy: &StationaryPolicy,
    gamma: f64,
    eta: f64,
) -> Result<LemmaBound, DiagnosticsError> {
    let stopping = stopping_set_of(values, m_beta, eta)?;
    let (candidates, exhaustive) = candidate_policies(model, Some(policy), 0);
    let mut best = vec![f64::INFINITY; model.n_states];
    for f in &candidates {
        let hit = hitting_exp_cost(model, f, gamma, &stopping)?;
        for (b, u) in best.iter_mut().zip(&hit.u) {
            *b = b.min(*u);
        }
    }
    let bound = best.into_iter().map(|b| eta + b).collect();
    Ok(LemmaBound { beta, stopping_set: stopping, bound, exhaustive })
}

pub fn condition_b_bound(model: &FiniteMDP, beta: f64, gamma: f64, eta: f64) -> Result<LemmaBound, DiagnosticsError> {
    let sol = solve_untruncated(model, beta, gamma, SOLVER_TOL)?;
    let m_beta = sol.value.values.iter().copied().fold(f64::INFINITY, f64::min);
    lemma_bound(model, beta, &sol.value.values, m_beta, &sol.policy, gamma, eta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionBVerdict {
    HoldsOnGrid,
    Diverging,
    Inconclusive,
}

impl fmt::Display for ConditionBVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConditionBVerdict::HoldsOnGrid => "holds-on-grid",
            ConditionBVerdict::Diverging => "diverging",
            ConditionBVerdict::Inconclusive => "inconclusive",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBReport {
    pub verdict: ConditionBVerdict,
    pub eta: f64,
    pub betas: Vec<f64>,
    /// `h_β` per successful grid point.
    pub h_columns: Vec<Vec<f64>>,
    pub sup_h: Vec<f64>,
    /// Last three increments of `h_β(x)` all positive.
    pub growing: Vec<bool>,
    /// ... and strictly increasing.
    pub accelerating: Vec<bool>,
    pub bounds: Vec<LemmaBound>,
    /// Largest per-β bound for each state.
    pub lemma4_bound: Vec<f64>,
    /// Every finite bound dominates its `h_β` column within `1e−8`.
    pub dominated: bool,
}

impl ConditionBReport {
    /// The verdict is evidence from a finite grid of discount factors, not a proof.
    pub fn grid_note(&self) -> String {
        match (self.betas.first(), self.betas.last()) {
            (Some(a), Some(b)) => format!("{} on {} discount factors in [{a}, {b}]", self.verdict, self.betas.len()),
            _ => format!("{} on an empty grid", self.verdict),
        }
    }
}

pub fn condition_b_scan(model: &FiniteMDP, gamma: f64, betas: &[f64], eta: f64) -> Result<ConditionBReport, DiagnosticsError> {
    let sweep = discount_sweep_with(model, gamma, betas, SOLVER_TOL, Exec::default())?;
    Ok(condition_b_from_sweep(model, &sweep, eta, Exec::default())?)
}

pub fn condition_b_from_sweep(
    model: &FiniteMDP,
    sweep: &DiscountSweepResult,
    eta: f64,
    exec: Exec,
) -> Result<ConditionBReport, VanishingError> {
    let records: Vec<_> = sweep.successful().collect();
    let bounds = par::map(exec, &records, |(beta, rec)| {
        lemma_bound(model, *beta, rec.values(), rec.m_beta, rec.policy(), sweep.gamma, eta)
    });
    let bounds: Vec<LemmaBound> = bounds
        .into_iter()
        .collect::<Result<_, _>>()
        .map_err(|e| VanishingError::InvalidParameter(e.to_string()))?;
    let n = model.n_states;
    let betas: Vec<f64> = records.iter().map(|(b, _)| *b).collect();
    let h_columns: Vec<Vec<f64>> = records.iter().map(|(_, r)| r.h_beta.clone()).collect();

    let sup_h = (0..n).map(|x| h_columns.iter().map(|h| h[x]).fold(0.0, f64::max)).collect();
    let lemma4_bound: Vec<f64> = (0..n)
        .map(|x| bounds.iter().map(|b| b.bound[x]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let dominated = bounds
        .iter()
        .zip(&h_columns)
        .all(|(b, h)| b.bound.iter().zip(h).all(|(&bx, &hx)| !bx.is_finite() || hx <= bx + DOMINATION_TOL));

    let mut growing = vec![false; n];
    let mut accelerating = vec![false; n];
    if h_columns.len() >= TREND_WINDOW {
        let tail = &h_columns[h_columns.len() - TREND_WINDOW..];
        for x in 0..n {
            let d: Vec<f64> = tail.windows(2).map(|w| w[1][x] - w[0][x]).collect();
            growing[x] = d.iter().all(|&v| v > 0.0);
            accelerating[x] = growing[x] && d.windows(2).all(|w| w[1] > w[0]);
        }
    }

    let largest_finite = bounds
        .iter()
        .flat_map(|b| b.bound.iter().copied())
        .filter(|b| b.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    let last_h = h_columns.last();
    let last_bound = bounds.last();
    let diverging = (0..n).any(|x| {
        growing[x]
            && match (last_h, last_bound) {
                (Some(h), Some(b)) => !b.bound[x].is_finite() || h[x] > 10.0 * largest_finite,
                _ => false,
            }
    });
    let verdict = if diverging {
        ConditionBVerdict::Diverging
    } else if h_columns.len() >= TREND_WINDOW && dominated && !accelerating.iter().any(|&a| a) {
        ConditionBVerdict::HoldsOnGrid
    } else {
        ConditionBVerdict::Inconclusive
    };
    Ok(ConditionBReport {
        verdict,
        eta,
        betas,
        h_columns,
        sup_h,
        growing,
        accelerating,
        bounds,
        lemma4_bound,
        dominated,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClosedFormBound {
    /// `V_β(1) < log(e^γ(1−ρ)/(1−e^γ(1−ρ)))` for every `β`.
    Upper(f64),
    /// `V_β(1) > (γ + log(1−ρ))/(1−β)`.
    Lower(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example1Row {
    pub beta: f64,
    pub v1: f64,
    pub bound: Option<ClosedFormBound>,
    /// `bound − V` for an upper bound, `V − bound` for a lower bound.
    pub margin: Option<f64>,
    /// Certified error of `V`.
    pub error_bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example1Report {
    pub rho: f64,
    pub gamma: f64,
    pub regime: Regime,
    pub rows: Vec<Example1Row>,
    pub condition_b: ConditionBReport,
    pub expected_verdict: ConditionBVerdict,
    /// Growth rate of the unique policy at states 0 and 1.
    pub growth: Vec<f64>,
    pub theoretical: Vec<f64>,
    pub growth_tol: f64,
    pub growth_pass: bool,
    pub average: AverageSolution,
    /// The optimality inequality holds within `1e−8` at both states.
    pub inequality_holds: bool,
}

impl Example1Report {
    pub fn passed(&self) -> bool {
        let inequality_expected = self.regime == Regime::I;
        self.rows.iter().all(|r| r.pass)
            && self.condition_b.verdict == self.expected_verdict
            && self.growth_pass
            && self.inequality_holds == inequality_expected
    }
}

/// Tolerance for closed-form comparisons in the report.
pub const REPORT_TOL: f64 = 1e-6;
/// Case II converges like `1/n`, so its growth rate is only checked loosely.
pub const CASE_TWO_GROWTH_TOL: f64 = 1e-3;
const INEQUALITY_TOL: f64 = 1e-8;

pub fn example1_report(rho: f64, gamma: f64, betas: &[f64]) -> Result<Example1Report, DiagnosticsError> {
    let regime = classify_regime(rho, gamma)?;
    let model = make_example1(rho)?;
    let sweep = discount_sweep_with(&model, gamma, betas, SOLVER_TOL, Exec::default())?;
    let e = gamma.exp() * (1.0 - rho);
    let rows = sweep
        .successful()
        .map(|(beta, rec)| {
            let v1 = rec.values()[1];
            let error_bound = rec.solution.residual;
            let (bound, margin, pass) = match regime {
                Regime::I => {
                    let b = (e / (1.0 - e)).ln();
                    (Some(ClosedFormBound::Upper(b)), Some(b - v1), v1 < b)
                }
                Regime::III => {
                    let b = (gamma + (1.0 - rho).ln()) / (1.0 - beta);
                    (Some(ClosedFormBound::Lower(b)), Some(v1 - b), v1 + error_bound > b)
                }
                Regime::II => (None, None, true),
            };
            Example1Row { beta, v1, bound, margin, error_bound, pass }
        })
        .collect::<Vec<_>>();
    let condition_b = condition_b_from_sweep(&model, &sweep, 0.0, Exec::default())?;
    let expected_verdict = if regime == Regime::I {
        ConditionBVerdict::HoldsOnGrid
    } else {
        ConditionBVerdict::Diverging
    };

    let f = StationaryPolicy { choice: vec![0, 0] };
    let growth = estimate_growth_rate(&model, &f, gamma, REPORT_TOL * 1e-2)?.evaluation.growth;
    let theoretical = match regime {
        Regime::III => vec![0.0, 1.0 + (1.0 - rho).ln() / gamma],
        _ => vec![0.0, 0.0],
    };
    let growth_tol = if regime == Regime::II { CASE_TWO_GROWTH_TOL } else { REPORT_TOL };
    let growth_pass = growth.iter().zip(&theoretical).all(|(g, t)| (g - t).abs() <= growth_tol);

    let (_, average) = average_solution(&model, &sweep, DEFAULT_TAIL)?;
    let inequality_holds = average.inequality_residual.iter().all(|&r| r >= -INEQUALITY_TOL);
    Ok(Example1Report {
        rho,
        gamma,
        regime,
        rows,
        condition_b,
        expected_verdict,
        growth,
        theoretical,
        growth_tol,
        growth_pass,
        average,
        inequality_holds,
    })
}
