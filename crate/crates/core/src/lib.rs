//! Risk-sensitive average-cost control of finite Markov decision processes.
//!
//! The crate solves the discounted multiplicative Bellman equation in log
//! form, runs the vanishing-discount procedure that produces the average-cost
//! constant and relative value function, checks the resulting optimality
//! inequality against an independent growth-rate evaluator, verifies the
//! entropy-penalized minimax game behind the discounted equation, and
//! diagnoses boundedness of the relative value functions.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bellman;
pub mod cli;
pub mod diagnostics;
pub mod entropy;
pub mod game;
pub mod model;
pub mod par;
pub mod vanishing;

pub use bellman::{
    bellman_apply, solve_discounted, solve_untruncated, truncation_sweep, DiscountedSolution,
    LogValueFunction, SolveError, Truncation,
};
pub use diagnostics::{
    condition_b_bound, condition_b_scan, example1_report, hitting_exp_cost, stopping_set, ConditionBReport,
    ConditionBVerdict, DiagnosticsError, Example1Report, HittingCostSolution,
};
pub use entropy::{log_mgf, relative_entropy, tilt, variational_gap, ExtendedReal, ProbVector};
pub use model::{
    classify_regime, load_model, make_example1, save_model, validate_model, FiniteMDP, ModelError,
    PolicyRef, RandomizedMarkovPolicy, Regime, StationaryPolicy, ValidationReport,
};
pub use game::{
    admissibility_check, discounted_game_cost, entropy_bound_check, game_cost_finite, log_mgf_horizon,
    opponent_tilt, random_admissible_opponent, AdmissibilityCertificate, GameError, OpponentKernel,
};
pub use par::Exec;
pub use vanishing::{
    default_beta_grid, discount_sweep, estimate_average_constant, estimate_growth_rate, evaluate_policy_risk,
    optimality_residual, relative_value, verify_optimality, AverageSolution, DiscountSweepResult,
    VanishingError, VerificationReport, VerifyConfig,
};
