//! The entropy-penalized game behind the risk-sensitive criterion. The
//! controller picks actions, the opponent picks a stationary kernel `p` and
//! pays `R(p‖q)` per step for deviating from the true dynamics:
//!
//! ```text
//! j_n(x, π, p) = Σ_{k<n} E^{πp}_x [γ c(x_k, a_k) − R(p(·|x_k,a_k) ‖ q(·|x_k,a_k))]
//! ```
//!
//! The opponent's best reply to a value `w` is the tilt `p⁰ ∝ q e^{βw}`.

use rand::Rng;
use thiserror::Error;

use crate::entropy::{check_probability, relative_entropy, tilt_unchecked, ExtendedReal};
use crate::model::{DecisionRule, FiniteMDP, ModelError, PolicyRef, StationaryPolicy};
use crate::vanishing::risk_stage;

/// Largest absolute entry of the random tilting vectors.
pub const RANDOM_TILT_RADIUS: f64 = 5.0;

#[derive(Debug, Error)]
pub enum GameError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("opponent kernel shape: {0}")]
    Shape(String),
    #[error("opponent kernel is not admissible: infinite relative entropy at state {state}, action {action}")]
    Inadmissible { state: usize, action: usize },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Stationary opponent kernel, `p[x][slot]` aligned with the model's action slots.
#[derive(Debug, Clone, PartialEq)]
pub struct OpponentKernel {
    pub p: Vec<Vec<Vec<f64>>>,
}

impl OpponentKernel {
    pub fn new(model: &FiniteMDP, p: Vec<Vec<Vec<f64>>>) -> Result<Self, GameError> {
        if p.len() != model.n_states {
            return Err(GameError::Shape(format!("{} states, model has {}", p.len(), model.n_states)));
        }
        for (x, rows) in p.iter().enumerate() {
            if rows.len() != model.actions[x].len() {
                return Err(GameError::Shape(format!("state {x}: {} rows for {} actions", rows.len(), model.actions[x].len())));
            }
            for (slot, row) in rows.iter().enumerate() {
                if row.len() != model.n_states {
                    return Err(GameError::Shape(format!("state {x}, slot {slot}: row of length {}", row.len())));
                }
                check_probability(row).map_err(|e| GameError::Shape(format!("state {x}, slot {slot}: {e}")))?;
            }
        }
        Ok(OpponentKernel { p })
    }

    /// The true dynamics, `p = q`.
    pub fn nominal(model: &FiniteMDP) -> Self {
        OpponentKernel { p: model.kernel.clone() }
    }

    fn check_shape(&self, model: &FiniteMDP) -> Result<(), GameError> {
        let ok = self.p.len() == model.n_states
            && self.p.iter().zip(&model.actions).all(|(rows, a)| rows.len() == a.len())
            && self.p.iter().flatten().all(|row| row.len() == model.n_states);
        if ok {
            Ok(())
        } else {
            Err(GameError::Shape("kernel does not match the model".into()))
        }
    }

    /// `R(p(·|x,a) ‖ q(·|x,a))` for every slot.
    pub fn entropies(&self, model: &FiniteMDP) -> Vec<Vec<ExtendedReal>> {
        self.p
            .iter()
            .zip(&model.kernel)
            .map(|(ps, qs)| {
                ps.iter()
                    .zip(qs)
                    .map(|(p, q)| relative_entropy(p, q).expect("shapes checked"))
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmissibilityCertificate {
    pub admissible: bool,
    /// Smallest `C ≥ 0` with `γc − R + C ≥ 0` on the policy's support.
    pub constant: f64,
    /// First `(state, action label)` with infinite relative entropy.
    pub witness: Option<(usize, usize)>,
}

fn support(model: &FiniteMDP, policy: PolicyRef<'_>) -> Result<Vec<Vec<bool>>, ModelError> {
    let mut used: Vec<Vec<bool>> = model.actions.iter().map(|a| vec![false; a.len()]).collect();
    match policy {
        PolicyRef::Stationary(f) => {
            for (x, s) in f.slots(model)?.into_iter().enumerate() {
                used[x][s] = true;
            }
        }
        PolicyRef::Markov(m) => {
            m.validate(model)?;
            for stage in &m.stages {
                for (x, w) in stage.iter().enumerate() {
                    for (s, &pr) in w.iter().enumerate() {
                        used[x][s] |= pr > 0.0;
                    }
                }
            }
        }
    }
    Ok(used)
}

/// Every state can start the process, so the support is every `(x, a)` the
/// policy charges at some stage.
pub fn admissibility_check(
    model: &FiniteMDP,
    policy: PolicyRef<'_>,
    p: &OpponentKernel,
    gamma: f64,
) -> Result<AdmissibilityCertificate, GameError> {
    p.check_shape(model)?;
    let used = support(model, policy)?;
    let entropies = p.entropies(model);
    let mut constant = 0.0f64;
    for x in 0..model.n_states {
        for (s, &on) in used[x].iter().enumerate() {
            if !on {
                continue;
            }
            match entropies[x][s] {
                ExtendedReal::PosInfinity => {
                    return Ok(AdmissibilityCertificate {
                        admissible: false,
                        constant: f64::INFINITY,
                        witness: Some((x, model.actions[x][s])),
                    })
                }
                ExtendedReal::Finite(r) => constant = constant.max(r - gamma * model.cost[x][s]),
            }
        }
    }
    Ok(AdmissibilityCertificate { admissible: true, constant, witness: None })
}

fn require_admissible(model: &FiniteMDP, policy: PolicyRef<'_>, p: &OpponentKernel, gamma: f64) -> Result<AdmissibilityCertificate, GameError> {
    let cert = admissibility_check(model, policy, p, gamma)?;
    match cert.witness {
        Some((state, action)) => Err(GameError::Inadmissible { state, action }),
        None => Ok(cert),
    }
}

/// `p⁰(·|x,a) ∝ q(·|x,a) e^{βw}`.
pub fn opponent_tilt(model: &FiniteMDP, w: &[f64], beta: f64) -> Result<OpponentKernel, GameError> {
    if w.len() != model.n_states || w.iter().any(|v| !v.is_finite()) {
        return Err(GameError::InvalidParameter("w must be finite with one entry per state".into()));
    }
    let p = model
        .kernel
        .iter()
        .map(|rows| rows.iter().map(|q| tilt_unchecked(beta, w, q)).collect())
        .collect();
    Ok(OpponentKernel { p })
}

/// Tilts of `q` by independent uniform vectors in `[−5, 5]^n`, one per
/// `(x, a)`; admissible for every policy.
pub fn random_admissible_opponent<R: Rng + ?Sized>(model: &FiniteMDP, rng: &mut R) -> OpponentKernel {
    let p = model
        .kernel
        .iter()
        .map(|rows| {
            rows.iter()
                .map(|q| {
                    let v: Vec<f64> = (0..model.n_states)
                        .map(|_| rng.gen_range(-RANDOM_TILT_RADIUS..=RANDOM_TILT_RADIUS))
                        .collect();
                    tilt_unchecked(1.0, &v, q)
                })
                .collect()
        })
        .collect();
    OpponentKernel { p }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyBoundReport {
    pub bound: f64,
    pub max_entropy: f64,
    /// `max R / bound`, zero when the bound is infinite.
    pub max_ratio: f64,
    /// `(state, action label)` attaining `max_entropy`.
    pub worst: (usize, usize),
    pub holds: bool,
}

/// Checks `R(p⁰‖q) ≤ 2(βNγ/(1−β)) exp(βNγ/(1−β))` at every `(x, a)` for the
/// tilt of `w`; `w` must lie in `[0, Nγ/(1−β)]`.
pub fn entropy_bound_check(
    model: &FiniteMDP,
    w: &[f64],
    beta: f64,
    gamma: f64,
    level: u32,
) -> Result<EntropyBoundReport, GameError> {
    if !(beta > 0.0 && beta < 1.0) || !(gamma > 0.0) || level == 0 {
        return Err(GameError::InvalidParameter(format!("beta={beta}, gamma={gamma}, N={level}")));
    }
    let ceiling = level as f64 * gamma;
    if let Some((x, v)) = w
        .iter()
        .enumerate()
        .find(|(_, &v)| !((1.0 - beta) * v >= -1e-10 && (1.0 - beta) * v <= ceiling + 1e-10))
    {
        return Err(GameError::Precondition(format!(
            "(1−β)w({x}) = {} outside [0, {ceiling}]",
            (1.0 - beta) * v
        )));
    }
    let p0 = opponent_tilt(model, w, beta)?;
    let s = beta * ceiling / (1.0 - beta);
    let bound = 2.0 * s * s.exp();
    let mut max_entropy = 0.0;
    let mut worst = (0, model.actions[0][0]);
    for (x, rows) in p0.entropies(model).iter().enumerate() {
        for (slot, r) in rows.iter().enumerate() {
            let r = r.to_f64();
            if r > max_entropy {
                max_entropy = r;
                worst = (x, model.actions[x][slot]);
            }
        }
    }
    let max_ratio = if bound.is_finite() && bound > 0.0 { max_entropy / bound } else { 0.0 };
    Ok(EntropyBoundReport { bound, max_entropy, max_ratio, worst, holds: max_entropy <= bound })
}

/// `J_n(x, π) = log E^π_x exp(γ Σ_{k<n} c)` by backward recursion; the
/// stage-`k` mixture of a Markov policy sits inside the expectation.
pub fn log_mgf_horizon(model: &FiniteMDP, policy: PolicyRef<'_>, gamma: f64, n: usize) -> Result<Vec<f64>, GameError> {
    if n == 0 {
        return Err(GameError::InvalidParameter("horizon must be at least 1".into()));
    }
    let rule = DecisionRule::resolve(model, policy, n)?;
    let mut u = vec![0.0; model.n_states];
    let mut next = vec![0.0; model.n_states];
    for k in (0..n).rev() {
        risk_stage(model, &rule, k, gamma, &u, &mut next);
        std::mem::swap(&mut u, &mut next);
    }
    Ok(u)
}

/// Per-state expected payoff and transition rows under `p` at one stage.
fn stage_payoff(
    model: &FiniteMDP,
    rule: &DecisionRule,
    stage: usize,
    p: &OpponentKernel,
    entropy: &[Vec<f64>],
    gamma: f64,
) -> Vec<(f64, Vec<f64>)> {
    (0..model.n_states)
        .map(|x| {
            let mut reward = 0.0;
            let mut row = vec![0.0; model.n_states];
            for &(slot, w) in rule.at(stage, x) {
                reward += w * (gamma * model.cost[x][slot] - entropy[x][slot]);
                for (r, &pr) in row.iter_mut().zip(&p.p[x][slot]) {
                    *r += w * pr;
                }
            }
            (reward, row)
        })
        .collect()
}

fn finite_entropies(model: &FiniteMDP, p: &OpponentKernel) -> Vec<Vec<f64>> {
    p.entropies(model)
        .into_iter()
        .map(|rows| rows.into_iter().map(|r| r.finite().unwrap_or(f64::INFINITY)).collect())
        .collect()
}

/// `j_n(x, π, p)` by propagating the state distribution forward under `p`.
pub fn game_cost_finite(
    model: &FiniteMDP,
    policy: PolicyRef<'_>,
    p: &OpponentKernel,
    gamma: f64,
    n: usize,
) -> Result<Vec<f64>, GameError> {
    if n == 0 {
        return Err(GameError::InvalidParameter("horizon must be at least 1".into()));
    }
    require_admissible(model, policy, p, gamma)?;
    let rule = DecisionRule::resolve(model, policy, n)?;
    let entropy = finite_entropies(model, p);
    let stages: Vec<_> = (0..rule.stage_count().min(n))
        .map(|k| stage_payoff(model, &rule, k, p, &entropy, gamma))
        .collect();
    let at = |k: usize| &stages[if stages.len() == 1 { 0 } else { k }];

    let n_states = model.n_states;
    let mut out = vec![0.0; n_states];
    let mut dist = vec![0.0; n_states];
    let mut next = vec![0.0; n_states];
    for (x0, total) in out.iter_mut().enumerate() {
        dist.fill(0.0);
        dist[x0] = 1.0;
        for k in 0..n {
            let stage = at(k);
            next.fill(0.0);
            for (x, &mass) in dist.iter().enumerate() {
                if mass == 0.0 {
                    continue;
                }
                let (reward, row) = &stage[x];
                *total += mass * reward;
                for (nx, &pr) in next.iter_mut().zip(row) {
                    *nx += mass * pr;
                }
            }
            std::mem::swap(&mut dist, &mut next);
        }
    }
    Ok(out)
}

/// `V_β(x, f, p) = Σ_k β^k E^{fp}_x[γc − R]`, summed until the tail bound
/// `β^{K+1}(γ max c + C)/(1−β)` drops below `tol`.
pub fn discounted_game_cost(
    model: &FiniteMDP,
    policy: &StationaryPolicy,
    p: &OpponentKernel,
    beta: f64,
    gamma: f64,
    tol: f64,
) -> Result<Vec<f64>, GameError> {
    if !(beta > 0.0 && beta < 1.0) || !(tol > 0.0) {
        return Err(GameError::InvalidParameter(format!("beta={beta}, tol={tol}")));
    }
    let cert = require_admissible(model, policy.into(), p, gamma)?;
    let rule = DecisionRule::resolve(model, policy.into(), 1)?;
    let entropy = finite_entropies(model, p);
    let stage = stage_payoff(model, &rule, 0, p, &entropy, gamma);
    let scale = (gamma * model.max_cost() + cert.constant) / (1.0 - beta);

    let mut v: Vec<f64> = stage.iter().map(|(r, _)| *r).collect();
    let mut next = vec![0.0; model.n_states];
    let mut tail = beta * scale;
    while tail > tol {
        for (x, (reward, row)) in stage.iter().enumerate() {
            next[x] = reward + beta * row.iter().zip(&v).map(|(pr, vy)| pr * vy).sum::<f64>();
        }
        std::mem::swap(&mut v, &mut next);
        tail *= beta;
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bellman::solve_untruncated;
    use crate::model::{make_example1, RandomizedMarkovPolicy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(cost: f64) -> FiniteMDP {
        FiniteMDP {
            n_states: 1,
            actions: vec![vec![0]],
            cost: vec![vec![cost]],
            kernel: vec![vec![vec![1.0]]],
            label: String::new(),
        }
    }

    fn two_action() -> FiniteMDP {
        FiniteMDP {
            n_states: 2,
            actions: vec![vec![0, 1], vec![0]],
            cost: vec![vec![1.0, 0.2], vec![0.5]],
            kernel: vec![vec![vec![0.5, 0.5], vec![0.1, 0.9]], vec![vec![0.3, 0.7]]],
            label: String::new(),
        }
    }

    #[test]
    fn nominal_kernel_is_admissible_with_zero_constant() {
        let m = two_action();
        let f = StationaryPolicy { choice: vec![1, 0] };
        let c = admissibility_check(&m, (&f).into(), &OpponentKernel::nominal(&m), 0.7).unwrap();
        assert!(c.admissible);
        assert_eq!(c.constant, 0.0);
        assert_eq!(c.witness, None);
    }

    #[test]
    fn mass_on_null_state_is_inadmissible() {
        let m = make_example1(0.5).unwrap();
        let p = OpponentKernel::new(&m, vec![vec![vec![0.5, 0.5]], vec![vec![0.5, 0.5]]]).unwrap();
        let f = StationaryPolicy { choice: vec![0, 0] };
        let c = admissibility_check(&m, (&f).into(), &p, 0.5).unwrap();
        assert!(!c.admissible);
        assert_eq!(c.witness, Some((0, 0)));
        assert!(matches!(
            game_cost_finite(&m, (&f).into(), &p, 0.5, 3),
            Err(GameError::Inadmissible { state: 0, action: 0 })
        ));
    }

    #[test]
    fn tilt_constant_matches_entropy_excess() {
        let m = two_action();
        let p = opponent_tilt(&m, &[0.0, 3.0], 0.9).unwrap();
        let f = StationaryPolicy { choice: vec![0, 0] };
        let c = admissibility_check(&m, (&f).into(), &p, 0.1).unwrap();
        let r00 = relative_entropy(&p.p[0][0], &m.kernel[0][0]).unwrap().to_f64();
        let r10 = relative_entropy(&p.p[1][0], &m.kernel[1][0]).unwrap().to_f64();
        let expect = (r00 - 0.1).max(r10 - 0.05).max(0.0);
        assert!((c.constant - expect).abs() < 1e-15);
    }

    #[test]
    fn tilt_examples() {
        let m = make_example1(0.5).unwrap();
        assert_eq!(opponent_tilt(&m, &[0.0, 0.0], 0.9).unwrap(), OpponentKernel::nominal(&m));
        let (beta, w1) = (0.9, 2.0);
        let p = opponent_tilt(&m, &[0.0, w1], beta).unwrap();
        let e = 0.5 * (beta * w1).exp();
        assert!((p.p[1][0][0] - 0.5 / (0.5 + e)).abs() < 1e-15);
        assert!((p.p[1][0][1] - e / (0.5 + e)).abs() < 1e-15);
        assert_eq!(p.p[0][0], vec![1.0, 0.0]);
    }

    #[test]
    fn entropy_bound_examples() {
        let m = make_example1(0.5).unwrap();
        let sol = solve_untruncated(&m, 0.5, 0.5, 1e-12).unwrap();
        let r = entropy_bound_check(&m, &sol.value.values, 0.5, 0.5, 1).unwrap();
        assert!(r.holds && r.max_ratio < 0.5, "{r:?}");

        let zero = entropy_bound_check(&m, &[0.0, 0.0], 0.5, 0.5, 1).unwrap();
        assert_eq!(zero.max_entropy, 0.0);

        let m2 = two_action();
        let top = m2.max_cost() * 0.5 / (1.0 - 0.5);
        let flat = entropy_bound_check(&m2, &[top, top], 0.5, 0.5, 1).unwrap();
        assert!(flat.max_entropy < 1e-15 && flat.holds);

        assert!(matches!(
            entropy_bound_check(&m2, &[10.0, 0.0], 0.5, 0.5, 1),
            Err(GameError::Precondition(_))
        ));
    }

    #[test]
    fn horizon_one_is_log_of_mixture() {
        let m = two_action();
        let pi = RandomizedMarkovPolicy { stages: vec![vec![vec![0.25, 0.75], vec![1.0]]] };
        let j = log_mgf_horizon(&m, (&pi).into(), 0.8, 1).unwrap();
        let expect = (0.25 * (0.8f64).exp() + 0.75 * (0.8 * 0.2f64).exp()).ln();
        assert!((j[0] - expect).abs() < 1e-15);
        assert!((j[1] - 0.4).abs() < 1e-15);
        assert!(log_mgf_horizon(&m, (&pi).into(), 0.8, 2).is_err());
        assert!(log_mgf_horizon(&m, (&pi).into(), 0.8, 0).is_err());
    }

    #[test]
    fn horizon_single_state() {
        let j = log_mgf_horizon(&single(1.5), (&StationaryPolicy { choice: vec![0] }).into(), 0.3, 9).unwrap();
        assert!((j[0] - 9.0 * 0.3 * 1.5).abs() < 1e-13);
    }

    #[test]
    fn horizon_matches_trajectory_enumeration() {
        let (rho, gamma, n) = (0.5, 0.5, 3);
        let m = make_example1(rho).unwrap();
        let f = StationaryPolicy { choice: vec![0, 0] };
        let j = log_mgf_horizon(&m, (&f).into(), gamma, n).unwrap();
        for x0 in 0..2usize {
            let mut total = 0.0;
            for bits in 0..(1u32 << n) {
                // bit k is the state at step k+1
                let mut x = x0;
                let mut prob = 1.0;
                let mut cost = 0.0;
                for k in 0..n {
                    cost += x as f64;
                    let y = ((bits >> k) & 1) as usize;
                    prob *= m.kernel[x][0][y];
                    x = y;
                }
                total += prob * (gamma * cost).exp();
            }
            assert!((j[x0] - total.ln()).abs() < 1e-14, "state {x0}");
        }
    }

    #[test]
    fn markov_stage_order() {
        let m = two_action();
        let a = vec![vec![1.0, 0.0], vec![1.0]];
        let b = vec![vec![0.0, 1.0], vec![1.0]];
        let pi = RandomizedMarkovPolicy { stages: vec![a.clone(), b.clone()] };
        let j = log_mgf_horizon(&m, (&pi).into(), 1.0, 2).unwrap();
        // first step from state 0 uses slot 0 (cost 1), second uses slot 1
        let second = |y: usize| if y == 0 { 0.2f64 } else { 0.5 };
        let expect: f64 = (1.0f64).exp() * (0.5 * second(0).exp() + 0.5 * second(1).exp());
        assert!((j[0] - expect.ln()).abs() < 1e-14);
    }

    #[test]
    fn nominal_game_cost_is_risk_neutral() {
        let m = two_action();
        let f = StationaryPolicy { choice: vec![0, 0] };
        let j = game_cost_finite(&m, (&f).into(), &OpponentKernel::nominal(&m), 0.5, 2).unwrap();
        // step 0 cost 1 from state 0, then half the mass at each state
        assert!((j[0] - 0.5 * (1.0 + 0.5 * 1.0 + 0.5 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn game_cost_below_log_mgf() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let m = crate::model::random_model(&mut rng, 3, 2, 2.0);
            let pi = RandomizedMarkovPolicy::random(&m, 6, &mut rng);
            let p = random_admissible_opponent(&m, &mut rng);
            for n in 1..=6 {
                let j = game_cost_finite(&m, (&pi).into(), &p, 0.9, n).unwrap();
                let big = log_mgf_horizon(&m, (&pi).into(), 0.9, n).unwrap();
                for x in 0..3 {
                    assert!(j[x] <= big[x] + 1e-10);
                }
            }
        }
    }

    #[test]
    fn discounted_single_state_series() {
        let m = single(2.0);
        let v = discounted_game_cost(&m, &StationaryPolicy { choice: vec![0] }, &OpponentKernel::nominal(&m), 0.9, 0.5, 1e-12)
            .unwrap();
        assert!((v[0] - 1.0 / 0.1).abs() < 1e-11);
    }

    #[test]
    fn saddle_on_example1() {
        let m = make_example1(0.5).unwrap();
        for &beta in &[0.5, 0.9, 0.99] {
            let sol = solve_untruncated(&m, beta, 0.5, 1e-12).unwrap();
            let p0 = opponent_tilt(&m, &sol.value.values, beta).unwrap();
            let v = discounted_game_cost(&m, &sol.policy, &p0, beta, 0.5, 1e-12).unwrap();
            for x in 0..2 {
                assert!((v[x] - sol.value.values[x]).abs() < 1e-9, "beta {beta}: {v:?}");
            }
        }
    }

    #[test]
    fn one_step_variational_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = crate::model::random_model(&mut rng, 4, 3, 1.0);
        let beta = 0.8;
        let sol = solve_untruncated(&m, beta, 0.7, 1e-12).unwrap();
        let w = &sol.value.values;
        let p0 = opponent_tilt(&m, w, beta).unwrap();
        for x in 0..4 {
            for s in 0..3 {
                let q = &m.kernel[x][s];
                let scaled: Vec<f64> = w.iter().map(|v| beta * v).collect();
                let lhs = crate::entropy::log_mgf(&scaled, q).unwrap();
                let r = relative_entropy(&p0.p[x][s], q).unwrap().to_f64();
                let rhs = -r + beta * p0.p[x][s].iter().zip(w).map(|(p, v)| p * v).sum::<f64>();
                assert!((lhs - rhs).abs() < 1e-10);
            }
        }
    }
}
