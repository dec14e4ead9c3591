//! Vanishing-discount procedure: solve the discounted equation along `β ↑ 1`,
//! read off `l̂ = lim (1−β) m_β` and `h = liminf (V_β − m_β)`, check the
//! average-cost optimality inequality
//!
//! ```text
//! h(x) + l̂ ≥ min_a [ γ c(x,a) + log Σ_y q(y|x,a) e^{h(y)} ]
//! ```
//!
//! and compare `l̂/γ` with the growth rate of `log E exp(γ Σ c)` under the
//! extracted policy and under every other deterministic stationary policy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bellman::{solve_untruncated, Backup, DiscountedSolution, SolveError};
use crate::diagnostics::{condition_b_from_sweep, ConditionBVerdict};
use crate::entropy::scaled_log_mgf;
use crate::model::{DecisionRule, FiniteMDP, ModelError, StationaryPolicy};
use crate::par::{self, Exec};

pub const DEFAULT_BETA_START: f64 = 0.9;
pub const DEFAULT_BETA_COUNT: usize = 13;
pub const DEFAULT_TAIL: usize = 4;
/// Largest horizon tried by the growth-rate estimator.
pub const MAX_GROWTH_HORIZON: usize = 1 << 16;
/// Number of trailing difference quotients compared by the Cauchy check.
pub const CAUCHY_WINDOW: usize = 10;
/// Exhaustive policy enumeration up to this many policies.
pub const ENUMERATION_LIMIT: u128 = 4096;
pub const SAMPLED_POLICIES: usize = 256;

#[derive(Debug, Error)]
pub enum VanishingError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("need at least {needed} successful sweep entries, have {have}")]
    InsufficientEntries { needed: usize, have: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Solve(#[from] SolveError),
}

/// `β_k = 1 − 2^{−k}(1 − β₀)` for `k = 0..count`.
pub fn beta_grid(start: f64, count: usize) -> Result<Vec<f64>, VanishingError> {
    if !(start > 0.0 && start < 1.0) || count == 0 {
        return Err(VanishingError::InvalidParameter(format!(
            "beta grid needs start in (0, 1) and count ≥ 1, got {start}:{count}"
        )));
    }
    Ok((0..count).map(|k| 1.0 - 0.5f64.powi(k as i32) * (1.0 - start)).collect())
}

pub fn default_beta_grid() -> Vec<f64> {
    beta_grid(DEFAULT_BETA_START, DEFAULT_BETA_COUNT).expect("default grid is valid")
}

/// Quantities derived from one discounted solve.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaRecord {
    pub solution: DiscountedSolution,
    /// `min_x V_β(x)`.
    pub m_beta: f64,
    /// `V_β − m_β`.
    pub h_beta: Vec<f64>,
    /// `(1 − β) m_β`.
    pub scaled: f64,
}

impl BetaRecord {
    fn from_solution(solution: DiscountedSolution) -> Self {
        let m_beta = solution.value.values.iter().copied().fold(f64::INFINITY, f64::min);
        let h_beta = if m_beta == solution.offset {
            solution.relative.clone()
        } else {
            solution.value.values.iter().map(|v| v - m_beta).collect()
        };
        let scaled = (1.0 - solution.value.beta) * m_beta;
        BetaRecord { solution, m_beta, h_beta, scaled }
    }

    pub fn values(&self) -> &[f64] {
        &self.solution.value.values
    }

    pub fn policy(&self) -> &StationaryPolicy {
        &self.solution.policy
    }
}

#[derive(Debug)]
pub struct SweepEntry {
    pub beta: f64,
    pub outcome: Result<BetaRecord, SolveError>,
}

#[derive(Debug)]
pub struct DiscountSweepResult {
    pub gamma: f64,
    pub entries: Vec<SweepEntry>,
}

impl DiscountSweepResult {
    pub fn successful(&self) -> impl Iterator<Item = (f64, &BetaRecord)> {
        self.entries
            .iter()
            .filter_map(|e| e.outcome.as_ref().ok().map(|r| (e.beta, r)))
    }

    pub fn successful_count(&self) -> usize {
        self.successful().count()
    }

    pub fn failures(&self) -> impl Iterator<Item = (f64, &SolveError)> {
        self.entries
            .iter()
            .filter_map(|e| e.outcome.as_ref().err().map(|err| (e.beta, err)))
    }
}

pub fn discount_sweep(model: &FiniteMDP, gamma: f64, betas: &[f64], tol: f64) -> Result<DiscountSweepResult, VanishingError> {
    discount_sweep_with(model, gamma, betas, tol, Exec::default())
}

/// Solves every `β` independently; failed solves are kept as marked entries.
pub fn discount_sweep_with(
    model: &FiniteMDP,
    gamma: f64,
    betas: &[f64],
    tol: f64,
    exec: Exec,
) -> Result<DiscountSweepResult, VanishingError> {
    if betas.is_empty() {
        return Err(VanishingError::InvalidParameter("empty beta grid".into()));
    }
    if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) || betas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(VanishingError::InvalidParameter(
            "betas must be strictly increasing inside (0, 1)".into(),
        ));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(VanishingError::InvalidParameter(format!("gamma must be positive, got {gamma}")));
    }
    let entries = par::map(exec, betas, |&beta| SweepEntry {
        beta,
        outcome: solve_untruncated(model, beta, gamma, tol).map(BetaRecord::from_solution),
    });
    Ok(DiscountSweepResult { gamma, entries })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AverageConstant {
    /// `(1 − β) m_β` at the largest successful `β`.
    pub l_hat: f64,
    pub beta: f64,
    /// Largest pairwise difference of `(1 − β) m_β` over the last three entries.
    pub spread: f64,
}

impl AverageConstant {
    pub fn is_certified(&self, tol: f64) -> bool {
        self.spread <= tol
    }
}

pub fn estimate_average_constant(sweep: &DiscountSweepResult) -> Result<AverageConstant, VanishingError> {
    let ok: Vec<(f64, &BetaRecord)> = sweep.successful().collect();
    if ok.len() < 3 {
        return Err(VanishingError::InsufficientEntries { needed: 3, have: ok.len() });
    }
    let last = &ok[ok.len() - 3..];
    let mut spread = 0.0f64;
    for i in 0..3 {
        for j in i + 1..3 {
            spread = spread.max((last[i].1.scaled - last[j].1.scaled).abs());
        }
    }
    let (beta, rec) = ok[ok.len() - 1];
    Ok(AverageConstant { l_hat: rec.scaled, beta, spread })
}

/// Elementwise minimum of `h_β` over the last `tail` successful entries,
/// shifted so that its minimum is zero.
pub fn relative_value(sweep: &DiscountSweepResult, tail: usize) -> Result<Vec<f64>, VanishingError> {
    let ok: Vec<&BetaRecord> = sweep.successful().map(|(_, r)| r).collect();
    if tail == 0 {
        return Err(VanishingError::InvalidParameter("tail must be at least 1".into()));
    }
    if tail > ok.len() {
        return Err(VanishingError::InsufficientEntries { needed: tail, have: ok.len() });
    }
    let window = &ok[ok.len() - tail..];
    let mut h = window[0].h_beta.clone();
    for rec in &window[1..] {
        for (a, &b) in h.iter_mut().zip(&rec.h_beta) {
            *a = a.min(b);
        }
    }
    let floor = h.iter().copied().fold(f64::INFINITY, f64::min);
    for v in &mut h {
        *v -= floor;
    }
    Ok(h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimalityResidual {
    /// `h(x) + l̂ − min_a[γc + log Σ q e^h]`; nonnegative when the inequality holds.
    pub inequality: Vec<f64>,
    /// Absolute value of the above, the defect in the optimality equation.
    pub equation: Vec<f64>,
    /// Argmin selector, lowest action label on ties.
    pub policy: StationaryPolicy,
}

impl OptimalityResidual {
    pub fn min_inequality(&self) -> f64 {
        self.inequality.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

pub fn optimality_residual(
    model: &FiniteMDP,
    gamma: f64,
    h: &[f64],
    l_hat: f64,
) -> Result<OptimalityResidual, VanishingError> {
    if h.len() != model.n_states || h.iter().any(|v| !v.is_finite()) {
        return Err(VanishingError::InvalidParameter("h must be finite with one entry per state".into()));
    }
    let n = model.n_states;
    let mut rhs = vec![0.0; n];
    let mut slots = vec![0; n];
    Backup::new(model).apply(h, 1.0, gamma, f64::INFINITY, &mut rhs, &mut slots);
    let inequality: Vec<f64> = (0..n).map(|x| h[x] + l_hat - rhs[x]).collect();
    let equation = inequality.iter().map(|v| v.abs()).collect();
    Ok(OptimalityResidual { inequality, equation, policy: StationaryPolicy::from_slots(model, &slots) })
}

/// One stage of the multiplicative recursion:
/// `out(x) = log Σ_a π(a|x) exp(γc(x,a) + log Σ_y q(y|x,a) e^{next(y)})`.
pub(crate) fn risk_stage(model: &FiniteMDP, rule: &DecisionRule, stage: usize, gamma: f64, next: &[f64], out: &mut [f64]) {
    for x in 0..model.n_states {
        let choices = rule.at(stage, x);
        if let [(slot, _)] = choices {
            out[x] = gamma * model.cost[x][*slot] + scaled_log_mgf(1.0, next, &model.kernel[x][*slot]);
            continue;
        }
        let mut terms = Vec::with_capacity(choices.len());
        let mut top = f64::NEG_INFINITY;
        for &(slot, _) in choices {
            let t = gamma * model.cost[x][slot] + scaled_log_mgf(1.0, next, &model.kernel[x][slot]);
            top = top.max(t);
            terms.push(t);
        }
        let acc: f64 = choices.iter().zip(&terms).map(|(&(_, p), &t)| p * (t - top).exp()).sum();
        out[x] = top + acc.ln();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskEvaluation {
    pub horizon: usize,
    /// `J_n(x) = log E_x exp(γ Σ_{k<n} c)`.
    pub j_n: Vec<f64>,
    /// `(J_n − J_{n−1})/γ`.
    pub growth: Vec<f64>,
    /// Largest change of the growth estimate over the last ten steps.
    pub cauchy_deviation: f64,
}

/// Incremental evaluation of `J_n` for a stationary policy. `J_n` is kept as
/// a relative vector plus an accumulated scalar so that difference quotients
/// do not lose precision as `J_n` grows.
struct GrowthTracker<'m> {
    model: &'m FiniteMDP,
    rule: DecisionRule,
    gamma: f64,
    relative: Vec<f64>,
    shift: f64,
    scratch: Vec<f64>,
    history: std::collections::VecDeque<Vec<f64>>,
    steps: usize,
}

impl<'m> GrowthTracker<'m> {
    fn new(model: &'m FiniteMDP, policy: &StationaryPolicy, gamma: f64) -> Result<Self, VanishingError> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(VanishingError::InvalidParameter(format!("gamma must be positive, got {gamma}")));
        }
        let rule = DecisionRule::resolve(model, policy.into(), 1)?;
        let n = model.n_states;
        Ok(GrowthTracker {
            model,
            rule,
            gamma,
            relative: vec![0.0; n],
            shift: 0.0,
            scratch: vec![0.0; n],
            history: std::collections::VecDeque::with_capacity(CAUCHY_WINDOW + 1),
            steps: 0,
        })
    }

    fn step(&mut self) {
        risk_stage(self.model, &self.rule, 0, self.gamma, &self.relative, &mut self.scratch);
        let growth: Vec<f64> = self
            .scratch
            .iter()
            .zip(&self.relative)
            .map(|(t, u)| (t - u) / self.gamma)
            .collect();
        let low = self.scratch.iter().copied().fold(f64::INFINITY, f64::min);
        for (u, &t) in self.relative.iter_mut().zip(&self.scratch) {
            *u = t - low;
        }
        self.shift += low;
        if self.history.len() == CAUCHY_WINDOW {
            self.history.pop_front();
        }
        self.history.push_back(growth);
        self.steps += 1;
    }

    fn snapshot(&self) -> RiskEvaluation {
        let last = self.history.back().cloned().unwrap_or_default();
        let cauchy_deviation = self
            .history
            .iter()
            .flat_map(|g| g.iter().zip(&last).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        RiskEvaluation {
            horizon: self.steps,
            j_n: self.relative.iter().map(|u| u + self.shift).collect(),
            growth: last,
            cauchy_deviation,
        }
    }
}

/// Exact `J_n` by backward recursion `u_{k+1} = γc_f + log_mgf(u_k, q_f)`,
/// `u_0 = 0`, with the growth estimate `(u_n − u_{n−1})/γ`.
pub fn evaluate_policy_risk(
    model: &FiniteMDP,
    policy: &StationaryPolicy,
    gamma: f64,
    horizon: usize,
) -> Result<RiskEvaluation, VanishingError> {
    if horizon == 0 {
        return Err(VanishingError::InvalidParameter("horizon must be at least 1".into()));
    }
    let mut tracker = GrowthTracker::new(model, policy, gamma)?;
    for _ in 0..horizon {
        tracker.step();
    }
    Ok(tracker.snapshot())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrowthEstimate {
    pub evaluation: RiskEvaluation,
    /// The Cauchy deviation fell below the tolerance before `2^16` steps.
    pub converged: bool,
}

impl GrowthEstimate {
    pub fn rates(&self) -> &[f64] {
        &self.evaluation.growth
    }
}

/// Growth rate with horizon doubling `n = 16, 32, …, 2^16` until the last ten
/// difference quotients agree within `tol`.
pub fn estimate_growth_rate(
    model: &FiniteMDP,
    policy: &StationaryPolicy,
    gamma: f64,
    tol: f64,
) -> Result<GrowthEstimate, VanishingError> {
    let mut tracker = GrowthTracker::new(model, policy, gamma)?;
    let mut checkpoint = 16;
    loop {
        while tracker.steps < checkpoint {
            tracker.step();
        }
        let evaluation = tracker.snapshot();
        if evaluation.cauchy_deviation <= tol || checkpoint >= MAX_GROWTH_HORIZON {
            let converged = evaluation.cauchy_deviation <= tol;
            return Ok(GrowthEstimate { evaluation, converged });
        }
        checkpoint *= 2;
    }
}

/// Candidate deterministic policies: all of them up to [`ENUMERATION_LIMIT`],
/// otherwise `include` plus uniformly sampled ones (seeded).
pub fn candidate_policies(model: &FiniteMDP, include: Option<&StationaryPolicy>, seed: u64) -> (Vec<StationaryPolicy>, bool) {
    let count = model.policy_count();
    if count <= ENUMERATION_LIMIT {
        return ((0..count).map(|i| StationaryPolicy::nth(model, i)).collect(), true);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<StationaryPolicy> = include.into_iter().cloned().collect();
    while out.len() < SAMPLED_POLICIES {
        out.push(StationaryPolicy::random(model, &mut rng));
    }
    (out, false)
}

#[derive(Debug, Clone)]
pub struct VerifyConfig {
    pub betas: Vec<f64>,
    pub tail: usize,
    /// Tolerance for the inequality and growth-rate assertions.
    pub tol: f64,
    /// Tolerance passed to each discounted solve.
    pub solver_tol: f64,
    /// Threshold `η` used by the boundedness diagnostic.
    pub eta: f64,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            betas: default_beta_grid(),
            tail: DEFAULT_TAIL,
            tol: 1e-6,
            solver_tol: 1e-10,
            eta: 0.0,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyViolation {
    pub policy: StationaryPolicy,
    pub state: usize,
    pub growth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AverageSolution {
    pub l_hat: f64,
    pub h: Vec<f64>,
    pub policy: StationaryPolicy,
    pub inequality_residual: Vec<f64>,
    pub equation_residual: Vec<f64>,
}

#[derive(Debug)]
pub struct VerificationReport {
    pub gamma: f64,
    pub tol: f64,
    pub sweep: DiscountSweepResult,
    pub constant: AverageConstant,
    pub solution: AverageSolution,
    /// (a) `inequality_residual ≥ −tol` everywhere.
    pub inequality_holds: bool,
    /// Growth rate of the extracted policy, per state.
    pub policy_growth: GrowthEstimate,
    /// (b) `|growth − l̂/γ| ≤ tol` everywhere.
    pub growth_matches: bool,
    pub candidates_checked: usize,
    pub exhaustive: bool,
    /// (c) candidates whose growth falls below `l̂/γ − tol`.
    pub lower_bound_violations: Vec<PolicyViolation>,
    /// Smallest candidate growth rate per state.
    pub best_growth: Vec<f64>,
    /// Best growth rates differ across states by more than `tol`.
    pub state_dependent_optimum: bool,
    pub condition_b: ConditionBVerdict,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.inequality_holds && self.growth_matches && self.lower_bound_violations.is_empty()
    }
}

/// Average-cost solution from a finished sweep.
pub fn average_solution(
    model: &FiniteMDP,
    sweep: &DiscountSweepResult,
    tail: usize,
) -> Result<(AverageConstant, AverageSolution), VanishingError> {
    let constant = estimate_average_constant(sweep)?;
    let h = relative_value(sweep, tail.min(sweep.successful_count()))?;
    let res = optimality_residual(model, sweep.gamma, &h, constant.l_hat)?;
    Ok((
        constant,
        AverageSolution {
            l_hat: constant.l_hat,
            h,
            policy: res.policy,
            inequality_residual: res.inequality,
            equation_residual: res.equation,
        },
    ))
}

pub fn verify_optimality(model: &FiniteMDP, gamma: f64, config: &VerifyConfig) -> Result<VerificationReport, VanishingError> {
    let sweep = discount_sweep_with(model, gamma, &config.betas, config.solver_tol, config.exec)?;
    let (constant, solution) = average_solution(model, &sweep, config.tail)?;
    let target = constant.l_hat / gamma;
    let tol = config.tol;

    let inequality_holds = solution.inequality_residual.iter().all(|&r| r >= -tol);
    let policy_growth = estimate_growth_rate(model, &solution.policy, gamma, tol * 1e-2)?;
    let growth_matches = policy_growth.rates().iter().all(|g| (g - target).abs() <= tol);

    let (candidates, exhaustive) = candidate_policies(model, Some(&solution.policy), config.seed);
    let rates = par::map(config.exec, &candidates, |p| {
        estimate_growth_rate(model, p, gamma, tol * 1e-2).map(|g| g.evaluation.growth)
    });
    let mut best_growth = vec![f64::INFINITY; model.n_states];
    let mut lower_bound_violations = Vec::new();
    for (policy, rate) in candidates.iter().zip(rates) {
        let rate = rate?;
        for (x, &g) in rate.iter().enumerate() {
            best_growth[x] = best_growth[x].min(g);
            if g < target - tol {
                lower_bound_violations.push(PolicyViolation { policy: policy.clone(), state: x, growth: g });
            }
        }
    }
    let spread = best_growth.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - best_growth.iter().copied().fold(f64::INFINITY, f64::min);
    let condition_b = condition_b_from_sweep(model, &sweep, config.eta, config.exec)?.verdict;

    Ok(VerificationReport {
        gamma,
        tol,
        candidates_checked: candidates.len(),
        sweep,
        constant,
        solution,
        inequality_holds,
        policy_growth,
        growth_matches,
        exhaustive,
        lower_bound_violations,
        state_dependent_optimum: spread > tol,
        best_growth,
        condition_b,
    })
}
