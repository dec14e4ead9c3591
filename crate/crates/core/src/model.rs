//! Finite control model `(X, A(x), c, q)`, its policies and validation.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entropy::PROB_SUM_TOL;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("malformed model file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("model violates {count} invariant(s):\n{report}", count = .0.violations.len(), report = .0)]
    Invalid(ValidationReport),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("action {action} is not admissible in state {state}")]
    InvalidPolicy { state: usize, action: usize },
    #[error("policy covers {found} states, model has {expected}")]
    PolicyShape { expected: usize, found: usize },
    #[error("no convergence after {iterations} iterations (last change {last_change:e})")]
    NonConvergence { iterations: usize, last_change: f64 },
}

/// A finite Markov control model with ragged action sets.
///
/// `cost[x][i]` and `kernel[x][i]` belong to the action `actions[x][i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteMDP {
    pub n_states: usize,
    pub actions: Vec<Vec<usize>>,
    pub cost: Vec<Vec<f64>>,
    pub kernel: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    pub label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NoStates,
    FieldLength { field: &'static str, expected: usize, found: usize },
    CostLength { state: usize, expected: usize, found: usize },
    KernelLength { state: usize, expected: usize, found: usize },
    NoActions { state: usize },
    DuplicateAction { state: usize, action: usize },
    RowLength { state: usize, action: usize, expected: usize, found: usize },
    NegativeProbability { state: usize, action: usize, target: usize, value: f64 },
    NonFiniteProbability { state: usize, action: usize, target: usize },
    RowSum { state: usize, action: usize, sum: f64 },
    NegativeCost { state: usize, action: usize, value: f64 },
    NonFiniteCost { state: usize, action: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        match self {
            NoStates => write!(f, "n_states must be positive"),
            FieldLength { field, expected, found } => {
                write!(f, "`{field}` has {found} entries, expected {expected}")
            }
            CostLength { state, expected, found } => {
                write!(f, "state {state}: {found} cost entries for {expected} actions")
            }
            KernelLength { state, expected, found } => {
                write!(f, "state {state}: {found} kernel rows for {expected} actions")
            }
            NoActions { state } => write!(f, "state {state}: empty action set"),
            DuplicateAction { state, action } => {
                write!(f, "state {state}: action {action} listed twice")
            }
            RowLength { state, action, expected, found } => write!(
                f,
                "(x={state}, a={action}): kernel row has {found} entries, expected {expected}"
            ),
            NegativeProbability { state, action, target, value } => write!(
                f,
                "(x={state}, a={action}): negative probability {value} for target {target}"
            ),
            NonFiniteProbability { state, action, target } => write!(
                f,
                "(x={state}, a={action}): non-finite probability for target {target}"
            ),
            RowSum { state, action, sum } => {
                write!(f, "(x={state}, a={action}): kernel row sums to {sum}")
            }
            NegativeCost { state, action, value } => {
                write!(f, "(x={state}, a={action}): negative cost {value}")
            }
            NonFiniteCost { state, action } => {
                write!(f, "(x={state}, a={action}): cost is not finite")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "  - {v}")?;
        }
        Ok(())
    }
}

/// Lists every violated invariant; never aborts early.
pub fn validate_model(model: &FiniteMDP) -> ValidationReport {
    let mut out = Vec::new();
    let n = model.n_states;
    if n == 0 {
        out.push(Violation::NoStates);
    }
    for (field, found) in [
        ("actions", model.actions.len()),
        ("cost", model.cost.len()),
        ("kernel", model.kernel.len()),
    ] {
        if found != n {
            out.push(Violation::FieldLength { field, expected: n, found });
        }
    }
    for (x, acts) in model.actions.iter().enumerate() {
        if acts.is_empty() {
            out.push(Violation::NoActions { state: x });
        }
        for (i, &a) in acts.iter().enumerate() {
            if acts[..i].contains(&a) {
                out.push(Violation::DuplicateAction { state: x, action: a });
            }
        }
        if let Some(costs) = model.cost.get(x) {
            if costs.len() != acts.len() {
                out.push(Violation::CostLength { state: x, expected: acts.len(), found: costs.len() });
            }
            for (&a, &c) in acts.iter().zip(costs) {
                if !c.is_finite() {
                    out.push(Violation::NonFiniteCost { state: x, action: a });
                } else if c < 0.0 {
                    out.push(Violation::NegativeCost { state: x, action: a, value: c });
                }
            }
        }
        if let Some(rows) = model.kernel.get(x) {
            if rows.len() != acts.len() {
                out.push(Violation::KernelLength { state: x, expected: acts.len(), found: rows.len() });
            }
            for (&a, row) in acts.iter().zip(rows) {
                if row.len() != n {
                    out.push(Violation::RowLength { state: x, action: a, expected: n, found: row.len() });
                    continue;
                }
                let mut finite = true;
                for (y, &p) in row.iter().enumerate() {
                    if !p.is_finite() {
                        finite = false;
                        out.push(Violation::NonFiniteProbability { state: x, action: a, target: y });
                    } else if p < 0.0 {
                        out.push(Violation::NegativeProbability { state: x, action: a, target: y, value: p });
                    }
                }
                let sum: f64 = row.iter().sum();
                if finite && (sum - 1.0).abs() > PROB_SUM_TOL {
                    out.push(Violation::RowSum { state: x, action: a, sum });
                }
            }
        }
    }
    ValidationReport { violations: out }
}

/// Parses a JSON model file and validates it.
pub fn load_model(text: &str) -> Result<FiniteMDP, ModelError> {
    let model: FiniteMDP = serde_json::from_str(text)?;
    model.checked()
}

pub fn save_model(model: &FiniteMDP) -> String {
    serde_json::to_string_pretty(model).expect("model serialization is infallible")
}

impl FiniteMDP {
    /// Returns the model if it passes [`validate_model`].
    pub fn checked(self) -> Result<Self, ModelError> {
        let report = validate_model(&self);
        if report.is_valid() {
            Ok(self)
        } else {
            Err(ModelError::Invalid(report))
        }
    }

    /// Position of action `action` inside `actions[state]`.
    pub fn slot_of(&self, state: usize, action: usize) -> Option<usize> {
        self.actions[state].iter().position(|&a| a == action)
    }

    pub fn max_cost(&self) -> f64 {
        self.cost.iter().flatten().copied().fold(0.0, f64::max)
    }

    /// Number of deterministic stationary policies, saturating.
    pub fn policy_count(&self) -> u128 {
        self.actions
            .iter()
            .fold(1u128, |acc, a| acc.saturating_mul(a.len() as u128))
    }

    /// Slot indices ordered by ascending action label, per state.
    pub(crate) fn slots_by_label(&self) -> Vec<Vec<usize>> {
        self.actions
            .iter()
            .map(|acts| {
                let mut idx: Vec<usize> = (0..acts.len()).collect();
                idx.sort_by_key(|&i| acts[i]);
                idx
            })
            .collect()
    }
}

/// Deterministic stationary selector `f(x) ∈ A(x)`, stored as action labels.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StationaryPolicy {
    pub choice: Vec<usize>,
}

impl StationaryPolicy {
    /// Maps each state's action label to its slot in the model.
    pub fn slots(&self, model: &FiniteMDP) -> Result<Vec<usize>, ModelError> {
        if self.choice.len() != model.n_states {
            return Err(ModelError::PolicyShape { expected: model.n_states, found: self.choice.len() });
        }
        self.choice
            .iter()
            .enumerate()
            .map(|(x, &a)| model.slot_of(x, a).ok_or(ModelError::InvalidPolicy { state: x, action: a }))
            .collect()
    }

    pub(crate) fn from_slots(model: &FiniteMDP, slots: &[usize]) -> Self {
        StationaryPolicy {
            choice: slots.iter().enumerate().map(|(x, &i)| model.actions[x][i]).collect(),
        }
    }

    /// The `index`-th deterministic policy in mixed-radix order over slots.
    pub fn nth(model: &FiniteMDP, mut index: u128) -> Self {
        let slots: Vec<usize> = model
            .actions
            .iter()
            .map(|acts| {
                let k = acts.len() as u128;
                let s = (index % k) as usize;
                index /= k;
                s
            })
            .collect();
        Self::from_slots(model, &slots)
    }

    pub fn random<R: Rng + ?Sized>(model: &FiniteMDP, rng: &mut R) -> Self {
        let slots: Vec<usize> = model.actions.iter().map(|a| rng.gen_range(0..a.len())).collect();
        Self::from_slots(model, &slots)
    }
}

impl fmt::Display for StationaryPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.choice.iter().map(|a| a.to_string()).collect();
        write!(f, "[{}]", parts.join(","))
    }
}

/// Finite-horizon randomized Markov policy: `stages[k][x][i]` is the
/// probability of action slot `i` in state `x` at stage `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomizedMarkovPolicy {
    pub stages: Vec<Vec<Vec<f64>>>,
}

impl RandomizedMarkovPolicy {
    pub fn validate(&self, model: &FiniteMDP) -> Result<(), ModelError> {
        for (k, stage) in self.stages.iter().enumerate() {
            if stage.len() != model.n_states {
                return Err(ModelError::PolicyShape { expected: model.n_states, found: stage.len() });
            }
            for (x, probs) in stage.iter().enumerate() {
                if probs.len() != model.actions[x].len() {
                    return Err(ModelError::Domain(format!(
                        "stage {k}, state {x}: {} weights for {} actions",
                        probs.len(),
                        model.actions[x].len()
                    )));
                }
                crate::entropy::check_probability(probs)
                    .map_err(|e| ModelError::Domain(format!("stage {k}, state {x}: {e}")))?;
            }
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    /// The deterministic policy repeated for `horizon` stages.
    pub fn from_stationary(model: &FiniteMDP, policy: &StationaryPolicy, horizon: usize) -> Result<Self, ModelError> {
        let slots = policy.slots(model)?;
        let stage: Vec<Vec<f64>> = slots
            .iter()
            .enumerate()
            .map(|(x, &s)| {
                let mut w = vec![0.0; model.actions[x].len()];
                w[s] = 1.0;
                w
            })
            .collect();
        Ok(RandomizedMarkovPolicy { stages: vec![stage; horizon] })
    }

    pub fn random<R: Rng + ?Sized>(model: &FiniteMDP, horizon: usize, rng: &mut R) -> Self {
        let stages = (0..horizon)
            .map(|_| model.actions.iter().map(|a| random_simplex(rng, a.len())).collect())
            .collect();
        RandomizedMarkovPolicy { stages }
    }
}

/// A controller policy: deterministic stationary or finite-horizon Markov.
#[derive(Debug, Clone, Copy)]
pub enum PolicyRef<'a> {
    Stationary(&'a StationaryPolicy),
    Markov(&'a RandomizedMarkovPolicy),
}

impl<'a> From<&'a StationaryPolicy> for PolicyRef<'a> {
    fn from(p: &'a StationaryPolicy) -> Self {
        PolicyRef::Stationary(p)
    }
}

impl<'a> From<&'a RandomizedMarkovPolicy> for PolicyRef<'a> {
    fn from(p: &'a RandomizedMarkovPolicy) -> Self {
        PolicyRef::Markov(p)
    }
}

/// A policy resolved against a model into sparse `(slot, weight)` lists.
#[derive(Debug, Clone)]
pub(crate) struct DecisionRule {
    stages: Vec<Vec<Vec<(usize, f64)>>>,
}

impl DecisionRule {
    /// Resolves `policy`; Markov policies must cover at least `horizon` stages.
    pub fn resolve(model: &FiniteMDP, policy: PolicyRef<'_>, horizon: usize) -> Result<Self, ModelError> {
        match policy {
            PolicyRef::Stationary(p) => {
                let slots = p.slots(model)?;
                Ok(DecisionRule { stages: vec![slots.into_iter().map(|s| vec![(s, 1.0)]).collect()] })
            }
            PolicyRef::Markov(p) => {
                p.validate(model)?;
                if p.horizon() < horizon {
                    return Err(ModelError::Domain(format!(
                        "Markov policy has {} stages, horizon {horizon} requested",
                        p.horizon()
                    )));
                }
                let stages = p
                    .stages
                    .iter()
                    .map(|stage| {
                        stage
                            .iter()
                            .map(|w| w.iter().copied().enumerate().filter(|&(_, q)| q > 0.0).collect())
                            .collect()
                    })
                    .collect();
                Ok(DecisionRule { stages })
            }
        }
    }

    #[inline]
    pub fn at(&self, stage: usize, state: usize) -> &[(usize, f64)] {
        let k = if self.stages.len() == 1 { 0 } else { stage };
        &self.stages[k][state]
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }
}

/// Example 1: `X = {0, 1}`, one action, `c(x) = x`, rows `(1, 0)` and `(ρ, 1−ρ)`.
pub fn make_example1(rho: f64) -> Result<FiniteMDP, ModelError> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(ModelError::Domain(format!("rho must lie in (0, 1), got {rho}")));
    }
    Ok(FiniteMDP {
        n_states: 2,
        actions: vec![vec![0], vec![0]],
        cost: vec![vec![0.0], vec![1.0]],
        kernel: vec![vec![vec![1.0, 0.0]], vec![vec![rho, 1.0 - rho]]],
        label: format!("example1(rho={rho})"),
    })
}

/// Tolerance for the boundary regime II.
pub const REGIME_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Regime {
    I,
    II,
    III,
}

impl Regime {
    /// The threshold `−log(1 − ρ)` separating the regimes.
    pub fn boundary(rho: f64) -> f64 {
        -(-rho).ln_1p()
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::I => "I",
            Regime::II => "II",
            Regime::III => "III",
        })
    }
}

pub fn classify_regime(rho: f64, gamma: f64) -> Result<Regime, ModelError> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(ModelError::Domain(format!("rho must lie in (0, 1), got {rho}")));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(ModelError::Domain(format!("gamma must be positive, got {gamma}")));
    }
    let boundary = Regime::boundary(rho);
    Ok(if (gamma - boundary).abs() <= REGIME_TOL {
        Regime::II
    } else if gamma < boundary {
        Regime::I
    } else {
        Regime::III
    })
}

const NEUTRAL_TOL: f64 = 1e-10;
const NEUTRAL_MAX_ITER: usize = 10_000_000;

/// Long-run expected average cost of a stationary policy, per state.
///
/// The Cesàro limit `lim (1/n) Σ_{k<n} P^k c` coincides with `lim L^n c` for
/// the lazy chain `L = (I + P)/2`, which is aperiodic, so the iteration
/// converges geometrically even for periodic `P`.
pub fn neutral_average_cost(model: &FiniteMDP, policy: &StationaryPolicy) -> Result<Vec<f64>, ModelError> {
    let slots = policy.slots(model)?;
    let n = model.n_states;
    let mut v: Vec<f64> = (0..n).map(|x| model.cost[x][slots[x]]).collect();
    let mut next = vec![0.0; n];
    let mut change = f64::INFINITY;
    for _ in 0..NEUTRAL_MAX_ITER {
        for x in 0..n {
            let row = &model.kernel[x][slots[x]];
            let pv: f64 = row.iter().zip(&v).map(|(p, u)| p * u).sum();
            next[x] = 0.5 * (v[x] + pv);
        }
        change = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        std::mem::swap(&mut v, &mut next);
        if change <= NEUTRAL_TOL {
            return Ok(v);
        }
    }
    Err(ModelError::NonConvergence { iterations: NEUTRAL_MAX_ITER, last_change: change })
}

/// `(1/n) Σ_{k<n} (P_f^k c_f)(x)`, the expected n-step average cost.
pub fn neutral_horizon_average(model: &FiniteMDP, policy: &StationaryPolicy, horizon: usize) -> Result<Vec<f64>, ModelError> {
    if horizon == 0 {
        return Err(ModelError::Domain("horizon must be at least 1".into()));
    }
    let slots = policy.slots(model)?;
    let n = model.n_states;
    let c: Vec<f64> = (0..n).map(|x| model.cost[x][slots[x]]).collect();
    // Backward: s_{k+1} = c + P s_k, s_0 = 0.
    let mut s = vec![0.0; n];
    let mut next = vec![0.0; n];
    for _ in 0..horizon {
        for x in 0..n {
            let row = &model.kernel[x][slots[x]];
            next[x] = c[x] + row.iter().zip(&s).map(|(p, u)| p * u).sum::<f64>();
        }
        std::mem::swap(&mut s, &mut next);
    }
    Ok(s.into_iter().map(|v| v / horizon as f64).collect())
}

/// Uniform sample from the probability simplex of dimension `dim`.
pub fn random_simplex<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..dim).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Random model with dense kernels and costs uniform in `[0, max_cost]`.
pub fn random_model<R: Rng + ?Sized>(rng: &mut R, n_states: usize, n_actions: usize, max_cost: f64) -> FiniteMDP {
    let actions = vec![(0..n_actions).collect::<Vec<_>>(); n_states];
    let cost = (0..n_states)
        .map(|_| (0..n_actions).map(|_| rng.gen::<f64>() * max_cost).collect())
        .collect();
    let kernel = (0..n_states)
        .map(|_| (0..n_actions).map(|_| random_simplex(rng, n_states)).collect())
        .collect();
    FiniteMDP { n_states, actions, cost, kernel, label: format!("random-{n_states}x{n_actions}") }
}
