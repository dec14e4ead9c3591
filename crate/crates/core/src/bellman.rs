//! Discounted risk-sensitive Bellman equation in log form,
//!
//! ```text
//! w(x) = min_{a ∈ A(x)} [ γ·min(N, c(x,a)) + log Σ_y q(y|x,a) e^{β w(y)} ]
//! ```
//!
//! solved by value iteration from `w ≡ 0`.
//!
//! The operator `T` is monotone and satisfies `T(w + k·1) = T(w) + βk`. The
//! iterate is therefore stored as a relative part `u` (anchored so that
//! `min u = 0`) plus a scalar offset, which keeps the relative part at full
//! floating-point resolution while the offset grows like `1/(1−β)`. For the
//! difference `d = T(u) − u` every fixed point satisfies
//!
//! ```text
//! T(u) + β·min(d)/(1−β) ≤ w* ≤ T(u) + β·max(d)/(1−β)
//! ```
//!
//! so `span(d)/(1−β)`, plus a rounding allowance of a few `ε·‖T u‖/(1−β)`,
//! bounds the error of the reported value. This never
//! exceeds the sup-norm bound `β/(1−β)·‖w_k − w_{k−1}‖` of plain iteration
//! and is much smaller when the tilted chains mix.

use std::fmt;

use thiserror::Error;

use crate::entropy::scaled_log_mgf;
use crate::model::{FiniteMDP, ModelError, StationaryPolicy};

/// Relative tolerance for treating two action values as tied.
pub const TIE_TOL: f64 = 1e-12;

/// `1 − β` below this is flagged as ill-conditioned.
pub const NEAR_UNIT_GAP: f64 = 1e-6;

/// Multiple of `ε·‖T u‖/(1−β)` below which an error bound cannot be
/// certified in double precision.
const PRECISION_FLOOR_FACTOR: f64 = 32.0;

/// Multiple of `ε·‖T u‖/(1−β)` added to the error bound for the rounding in
/// `d = T(u) − u` itself.
const ROUNDING_FACTOR: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Truncation {
    /// Costs replaced by `min(N, c)`.
    Level(u32),
    Untruncated,
}

impl Truncation {
    fn cost_cap(self) -> f64 {
        match self {
            Truncation::Level(n) => n as f64,
            Truncation::Untruncated => f64::INFINITY,
        }
    }
}

impl fmt::Display for Truncation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Truncation::Level(n) => write!(f, "N={n}"),
            Truncation::Untruncated => write!(f, "untruncated"),
        }
    }
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("iteration cap of {iterations} reached with error bound {best_residual:e} (requested {tol:e})")]
    IterationCap { iterations: usize, best_residual: f64, tol: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogValueFunction {
    pub values: Vec<f64>,
    pub beta: f64,
    pub gamma: f64,
    pub truncation: Truncation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscountedSolution {
    pub value: LogValueFunction,
    /// Minimizing selector, lowest action label on ties.
    pub policy: StationaryPolicy,
    pub iterations: usize,
    /// Certified bound on `‖value − w*‖_∞`.
    pub residual: f64,
    /// Tolerance actually enforced: the requested one, raised to the
    /// double-precision floor when that floor is larger.
    pub tolerance: f64,
    /// The requested tolerance was below what double precision can certify.
    pub precision_limited: bool,
    /// `1 − β < 1e-6`.
    pub near_unit_discount: bool,
    /// `value − min(value)`, computed without cancellation.
    pub relative: Vec<f64>,
    /// `min(value)`.
    pub offset: f64,
}

fn check_params(beta: f64, gamma: f64) -> Result<(), SolveError> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(SolveError::InvalidParameter(format!("beta must lie in (0, 1), got {beta}")));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(SolveError::InvalidParameter(format!("gamma must be positive, got {gamma}")));
    }
    Ok(())
}

/// Scratch state for repeated backups over one model.
pub(crate) struct Backup<'m> {
    model: &'m FiniteMDP,
    order: Vec<Vec<usize>>,
    scratch: Vec<f64>,
}

impl<'m> Backup<'m> {
    pub fn new(model: &'m FiniteMDP) -> Self {
        let width = model.actions.iter().map(Vec::len).max().unwrap_or(0);
        Backup { model, order: model.slots_by_label(), scratch: vec![0.0; width] }
    }

    /// `out(x) = min_a [γ·min(cap, c) + log Σ q e^{discount·w}]`, argmin slot in
    /// `choice`. `discount = 1` gives the average-cost right-hand side.
    pub fn apply(&mut self, w: &[f64], discount: f64, gamma: f64, cap: f64, out: &mut [f64], choice: &mut [usize]) {
        let model = self.model;
        for x in 0..model.n_states {
            let costs = &model.cost[x];
            let rows = &model.kernel[x];
            let mut best = f64::INFINITY;
            for (i, v) in self.scratch[..costs.len()].iter_mut().enumerate() {
                *v = gamma * costs[i].min(cap) + scaled_log_mgf(discount, w, &rows[i]);
                best = best.min(*v);
            }
            let slack = TIE_TOL * best.abs().max(1.0);
            let pick = self.order[x]
                .iter()
                .copied()
                .find(|&i| self.scratch[i] <= best + slack)
                .expect("nonempty action set");
            out[x] = best;
            choice[x] = pick;
        }
    }
}

/// One application of the Bellman operator.
pub fn bellman_apply(
    w: &[f64],
    model: &FiniteMDP,
    beta: f64,
    gamma: f64,
    truncation: Truncation,
) -> Result<(Vec<f64>, StationaryPolicy), SolveError> {
    check_params(beta, gamma)?;
    check_truncation(truncation)?;
    if w.len() != model.n_states {
        return Err(SolveError::InvalidParameter(format!(
            "value vector has {} entries, model has {} states",
            w.len(),
            model.n_states
        )));
    }
    let mut out = vec![0.0; model.n_states];
    let mut slots = vec![0; model.n_states];
    Backup::new(model).apply(w, beta, gamma, truncation.cost_cap(), &mut out, &mut slots);
    Ok((out, StationaryPolicy::from_slots(model, &slots)))
}

fn check_truncation(truncation: Truncation) -> Result<(), SolveError> {
    if truncation == Truncation::Level(0) {
        return Err(SolveError::InvalidParameter("truncation level must be at least 1".into()));
    }
    Ok(())
}

/// A-priori iteration budget `ceil(log(tol(1−β)/W₀)/log β) + 64`, where `W₀`
/// is the range `γN/(1−β)` of the value function.
pub fn iteration_cap(beta: f64, gamma: f64, level: f64, tol: f64) -> usize {
    let range = gamma * level / (1.0 - beta);
    let target = tol * (1.0 - beta);
    if range <= target {
        return 64;
    }
    let steps = ((target / range).ln() / beta.ln()).ceil();
    if steps.is_finite() && steps < 1e12 {
        steps as usize + 64
    } else {
        usize::MAX
    }
}

/// Fixed point of the (possibly truncated) discounted operator.
pub fn solve_discounted(
    model: &FiniteMDP,
    beta: f64,
    gamma: f64,
    truncation: Truncation,
    tol: f64,
) -> Result<DiscountedSolution, SolveError> {
    check_params(beta, gamma)?;
    check_truncation(truncation)?;
    if !(tol > 0.0) {
        return Err(SolveError::InvalidParameter(format!("tol must be positive, got {tol}")));
    }
    let level = match truncation {
        Truncation::Level(n) => (n as f64).min(model.max_cost()),
        Truncation::Untruncated => model.max_cost(),
    };
    let cap = truncation.cost_cap();
    let max_iter = iteration_cap(beta, gamma, level, tol);
    let n = model.n_states;
    let gap = 1.0 - beta;

    let mut backup = Backup::new(model);
    let mut u = vec![0.0; n];
    let mut tu = vec![0.0; n];
    let mut slots = vec![0; n];
    let mut anchor = 0;
    let mut bound = f64::INFINITY;

    for iteration in 1..=max_iter {
        backup.apply(&u, beta, gamma, cap, &mut tu, &mut slots);
        let (mut d_min, mut d_max, mut scale) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
        for x in 0..n {
            let d = tu[x] - u[x];
            d_min = d_min.min(d);
            d_max = d_max.max(d);
            scale = scale.max(tu[x].abs());
        }
        let unit = f64::EPSILON * (1.0 + scale) / gap;
        bound = (d_max - d_min) / gap + ROUNDING_FACTOR * unit;
        let floor = PRECISION_FLOOR_FACTOR * unit;
        let effective = tol.max(floor);
        if bound <= effective {
            let offset = (tu[anchor] - u[anchor]) / gap;
            let values = u.iter().map(|&v| v + offset).collect();
            return Ok(DiscountedSolution {
                value: LogValueFunction { values, beta, gamma, truncation },
                policy: StationaryPolicy::from_slots(model, &slots),
                iterations: iteration,
                residual: bound,
                tolerance: effective,
                precision_limited: effective > tol,
                near_unit_discount: gap < NEAR_UNIT_GAP,
                relative: u,
                offset,
            });
        }
        // Renormalize: the next iterate T(u) shifted so its minimum is 0.
        let (min_idx, min_val) = tu
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc });
        anchor = min_idx;
        for x in 0..n {
            u[x] = tu[x] - min_val;
        }
        u[anchor] = 0.0;
    }
    Err(SolveError::IterationCap { iterations: max_iter, best_residual: bound, tol })
}

/// Solves the untruncated equation. Costs are finite, so truncation at the
/// maximal cost already reproduces it exactly.
pub fn solve_untruncated(model: &FiniteMDP, beta: f64, gamma: f64, tol: f64) -> Result<DiscountedSolution, SolveError> {
    solve_discounted(model, beta, gamma, Truncation::Untruncated, tol)
}

/// Solutions for increasing truncation levels.
pub fn truncation_sweep(
    model: &FiniteMDP,
    beta: f64,
    gamma: f64,
    levels: &[u32],
    tol: f64,
) -> Result<Vec<DiscountedSolution>, SolveError> {
    if levels.first() == Some(&0) {
        return Err(SolveError::InvalidParameter("truncation level must be at least 1".into()));
    }
    if levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SolveError::InvalidParameter("truncation levels must be strictly increasing".into()));
    }
    levels
        .iter()
        .map(|&n| solve_discounted(model, beta, gamma, Truncation::Level(n), tol))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::make_example1;

    fn single(cost: f64) -> FiniteMDP {
        FiniteMDP {
            n_states: 1,
            actions: vec![vec![0]],
            cost: vec![vec![cost]],
            kernel: vec![vec![vec![1.0]]],
            label: String::new(),
        }
    }

    /// Scalar fixed point of w = γ + log[(1−ρ)e^{βw} + ρ] by bisection.
    fn bisect_example1(rho: f64, gamma: f64, beta: f64) -> f64 {
        // log[(1−ρ)e^{βw} + ρ] written without overflow
        let g = |w: f64| gamma + beta * w + ((1.0 - rho) + rho * (-beta * w).exp()).ln() - w;
        let (mut lo, mut hi) = (0.0, gamma / (1.0 - beta) + 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn zero_input_backup_on_example1() {
        let m = make_example1(0.5).unwrap();
        for &beta in &[0.3, 0.9] {
            let (out, _) = bellman_apply(&[0.0, 0.0], &m, beta, 0.5, Truncation::Level(1)).unwrap();
            assert_eq!(out, vec![0.0, 0.5]);
        }
    }

    #[test]
    fn zero_cost_zero_value_is_fixed() {
        let mut m = make_example1(0.3).unwrap();
        m.cost[1][0] = 0.0;
        let (out, _) = bellman_apply(&[0.0, 0.0], &m, 0.9, 2.0, Truncation::Untruncated).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn ties_break_to_lowest_label() {
        let m = FiniteMDP {
            n_states: 1,
            actions: vec![vec![7, 3, 5]],
            cost: vec![vec![1.0, 1.0, 1.0]],
            kernel: vec![vec![vec![1.0], vec![1.0], vec![1.0]]],
            label: String::new(),
        };
        let (_, f) = bellman_apply(&[0.4], &m, 0.5, 1.0, Truncation::Untruncated).unwrap();
        assert_eq!(f.choice, vec![3]);
    }

    #[test]
    fn example1_discounted_solution() {
        let (rho, gamma, beta) = (0.5, 0.5, 0.9);
        let m = make_example1(rho).unwrap();
        let sol = solve_discounted(&m, beta, gamma, Truncation::Level(10), 1e-12).unwrap();
        assert_eq!(sol.value.values[0], 0.0);
        let w1 = sol.value.values[1];
        let rhs = gamma + ((1.0 - rho) * (beta * w1).exp() + rho).ln();
        assert!((w1 - rhs).abs() < 1e-12);
        assert!(sol.residual <= 1e-12);
    }

    #[test]
    fn example1_case_one_bound() {
        // log(e^γ(1−ρ)/(1−e^γ(1−ρ))) at γ = ρ = 0.5
        let bound = 1.5461752700778737;
        let m = make_example1(0.5).unwrap();
        for &beta in &[0.5, 0.9, 0.99] {
            let sol = solve_untruncated(&m, beta, 0.5, 1e-10).unwrap();
            assert!(sol.value.values[1] < bound);
        }
    }

    #[test]
    fn example1_case_three_lower_bound() {
        let m = make_example1(0.5).unwrap();
        let lower = |beta: f64| (1.0 + 0.5f64.ln()) / (1.0 - beta);
        assert!((lower(0.99) - 30.685281944005).abs() < 1e-9);
        // At β = 0.99 the true margin is log1p(e^{−βV})/(1−β) ≈ 6e-12, below
        // what double precision resolves at V ≈ 30; only non-refutation by
        // the certified interval is checkable there.
        let sol = solve_untruncated(&m, 0.99, 1.0, 1e-10).unwrap();
        assert!(sol.value.values[1] + sol.residual > lower(0.99));
        assert_eq!(sol.value.values[0], 0.0);
        let sol = solve_untruncated(&m, 0.9, 1.0, 1e-10).unwrap();
        assert!(sol.value.values[1] - sol.residual > lower(0.9));
    }

    #[test]
    fn single_state_geometric_series() {
        for &(kappa, gamma, beta) in &[(3.0, 0.5, 0.9), (1.0, 2.0, 0.99), (0.0, 1.0, 0.5)] {
            let sol = solve_untruncated(&single(kappa), beta, gamma, 1e-10).unwrap();
            let expected = gamma * kappa / (1.0 - beta);
            assert!((sol.value.values[0] - expected).abs() <= 1e-12 * expected.max(1.0));
        }
    }

    #[test]
    fn matches_bisection_in_regime_one() {
        for &rho in &[0.3, 0.5, 0.8] {
            let boundary = -(1.0f64 - rho).ln();
            for &frac in &[0.2, 0.6, 0.95] {
                let gamma = frac * boundary;
                for &beta in &[0.5, 0.9, 0.99, 0.999] {
                    let m = make_example1(rho).unwrap();
                    let sol = solve_untruncated(&m, beta, gamma, 1e-12).unwrap();
                    let oracle = bisect_example1(rho, gamma, beta);
                    assert!(
                        (sol.value.values[1] - oracle).abs() < 1e-10,
                        "rho={rho} gamma={gamma} beta={beta}: {} vs {oracle}",
                        sol.value.values[1]
                    );
                }
            }
        }
    }

    #[test]
    fn truncation_sweep_is_monotone_and_stabilizes() {
        let m = FiniteMDP {
            n_states: 3,
            actions: vec![vec![0, 1], vec![0], vec![0]],
            cost: vec![vec![5.0, 2.5], vec![1.0], vec![3.7]],
            kernel: vec![
                vec![vec![0.2, 0.3, 0.5], vec![0.6, 0.2, 0.2]],
                vec![vec![0.5, 0.5, 0.0]],
                vec![vec![0.1, 0.1, 0.8]],
            ],
            label: String::new(),
        };
        let levels = [1, 2, 3, 4, 5, 6];
        let sols = truncation_sweep(&m, 0.9, 0.3, &levels, 1e-11).unwrap();
        for pair in sols.windows(2) {
            for x in 0..3 {
                assert!(pair[1].value.values[x] >= pair[0].value.values[x] - 1e-11);
            }
        }
        assert_eq!(sols[4].value.values, sols[5].value.values);
        assert!(sols[0].value.values[0] < sols[5].value.values[0]);

        let ex = make_example1(0.5).unwrap();
        let s = truncation_sweep(&ex, 0.9, 0.5, &[1, 2, 3], 1e-11).unwrap();
        assert_eq!(s[0].value.values, s[2].value.values);
    }

    #[test]
    fn parameter_errors() {
        let m = make_example1(0.5).unwrap();
        assert!(truncation_sweep(&m, 0.9, 0.5, &[0, 1], 1e-8).is_err());
        assert!(truncation_sweep(&m, 0.9, 0.5, &[2, 2], 1e-8).is_err());
        assert!(solve_untruncated(&m, 1.0, 0.5, 1e-8).is_err());
        assert!(solve_untruncated(&m, 0.5, -1.0, 1e-8).is_err());
        assert!(solve_untruncated(&m, 0.5, 1.0, 0.0).is_err());
    }

    #[test]
    fn near_unit_discount_is_flagged() {
        let m = make_example1(0.5).unwrap();
        let sol = solve_untruncated(&m, 1.0 - 1e-7, 0.5, 1e-8).unwrap();
        assert!(sol.near_unit_discount);
        assert!(!solve_untruncated(&m, 0.9, 0.5, 1e-8).unwrap().near_unit_discount);
    }

    #[test]
    fn iteration_budget_formula() {
        assert_eq!(iteration_cap(0.5, 1.0, 0.0, 1e-10), 64);
        let cap = iteration_cap(0.9, 0.5, 1.0, 1e-10);
        let expected = ((1e-10f64 * 0.1 / 5.0).ln() / 0.9f64.ln()).ceil() as usize + 64;
        assert_eq!(cap, expected);
    }
}
