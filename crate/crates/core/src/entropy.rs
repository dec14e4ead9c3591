//! Relative entropy, the logarithmic moment-generating function and the
//! exponentially tilted measure that attains the entropy variational formula
//!
//! ```text
//! log Σ ν(y) e^{h(y)} = max_μ [ Σ μ(y) h(y) − R(μ‖ν) ],   argmax μ₀ ∝ ν e^h
//! ```
//!
//! Every exponential is evaluated after subtracting the largest exponent on
//! the support of `ν`, so the functions are safe for exponents of the size
//! produced by discount factors close to one.

use std::fmt;
use std::ops::Deref;

use thiserror::Error;

/// Row-sum tolerance shared by every probability vector in the crate.
pub const PROB_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EntropyError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("invalid probability vector: {0}")]
    InvalidProbability(String),
}

/// A finite real number or `+∞`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub enum ExtendedReal {
    Finite(f64),
    PosInfinity,
}

impl ExtendedReal {
    pub fn is_finite(self) -> bool {
        matches!(self, ExtendedReal::Finite(_))
    }

    /// The value as an `f64`, mapping `+∞` to `f64::INFINITY`.
    pub fn to_f64(self) -> f64 {
        match self {
            ExtendedReal::Finite(v) => v,
            ExtendedReal::PosInfinity => f64::INFINITY,
        }
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            ExtendedReal::Finite(v) => Some(v),
            ExtendedReal::PosInfinity => None,
        }
    }
}

impl fmt::Display for ExtendedReal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExtendedReal::Finite(v) => write!(f, "{v}"),
            ExtendedReal::PosInfinity => write!(f, "+inf"),
        }
    }
}

/// Nonnegative weights summing to one within [`PROB_SUM_TOL`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(weights: Vec<f64>) -> Result<Self, EntropyError> {
        check_probability(&weights).map_err(EntropyError::InvalidProbability)?;
        Ok(ProbVector(weights))
    }

    /// Point mass at `index` in dimension `dim`.
    pub fn point_mass(dim: usize, index: usize) -> Self {
        let mut w = vec![0.0; dim];
        w[index] = 1.0;
        ProbVector(w)
    }

    pub fn uniform(dim: usize) -> Self {
        ProbVector(vec![1.0 / dim as f64; dim])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ProbVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Returns a description of the first defect, if any.
pub(crate) fn check_probability(w: &[f64]) -> Result<(), String> {
    if w.is_empty() {
        return Err("empty vector".into());
    }
    for (i, &p) in w.iter().enumerate() {
        if !p.is_finite() {
            return Err(format!("entry {i} is not finite"));
        }
        if p < 0.0 {
            return Err(format!("entry {i} is negative ({p})"));
        }
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > PROB_SUM_TOL {
        return Err(format!("weights sum to {sum}"));
    }
    Ok(())
}

fn same_dim(a: &[f64], b: &[f64]) -> Result<(), EntropyError> {
    if a.len() != b.len() {
        return Err(EntropyError::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

/// Kullback–Leibler divergence `R(μ‖ν)` with `0·log(0/q) = 0`.
pub fn relative_entropy(mu: &[f64], nu: &[f64]) -> Result<ExtendedReal, EntropyError> {
    same_dim(mu, nu)?;
    let mut total = 0.0;
    for (&m, &n) in mu.iter().zip(nu) {
        if m <= 0.0 {
            continue;
        }
        if n <= 0.0 {
            return Ok(ExtendedReal::PosInfinity);
        }
        total += m * (m / n).ln();
    }
    // Rounding can leave a tiny negative value for μ ≈ ν.
    Ok(ExtendedReal::Finite(total.max(0.0)))
}

/// `log Σ ν(y) e^{h(y)}`, max-shifted over the support of `ν`.
pub fn log_mgf(h: &[f64], nu: &[f64]) -> Result<f64, EntropyError> {
    same_dim(h, nu)?;
    Ok(log_mgf_unchecked(h, nu))
}

/// `log Σ ν(y) e^{scale·h(y)}` without the dimension check; hot path of the
/// Bellman backups.
#[inline]
pub(crate) fn scaled_log_mgf(scale: f64, h: &[f64], nu: &[f64]) -> f64 {
    let mut shift = f64::NEG_INFINITY;
    for (&v, &p) in h.iter().zip(nu) {
        if p > 0.0 && scale * v > shift {
            shift = scale * v;
        }
    }
    let mut acc = 0.0;
    for (&v, &p) in h.iter().zip(nu) {
        if p > 0.0 {
            acc += p * (scale * v - shift).exp();
        }
    }
    shift + acc.ln()
}

#[inline]
pub(crate) fn log_mgf_unchecked(h: &[f64], nu: &[f64]) -> f64 {
    scaled_log_mgf(1.0, h, nu)
}

/// The tilted measure `μ₀ ∝ ν e^h`, the unique maximizer of the variational
/// formula.
pub fn tilt(h: &[f64], nu: &[f64]) -> Result<ProbVector, EntropyError> {
    same_dim(h, nu)?;
    Ok(ProbVector(tilt_unchecked(1.0, h, nu)))
}

pub(crate) fn tilt_unchecked(scale: f64, h: &[f64], nu: &[f64]) -> Vec<f64> {
    let shift = h
        .iter()
        .zip(nu)
        .filter(|(_, &p)| p > 0.0)
        .map(|(&v, _)| scale * v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = h
        .iter()
        .zip(nu)
        .map(|(&v, &p)| if p > 0.0 { p * (scale * v - shift).exp() } else { 0.0 })
        .collect();
    let total: f64 = out.iter().sum();
    for w in &mut out {
        *w /= total;
    }
    out
}

/// `log_mgf(h, ν) − (Σ μ h − R(μ‖ν))`: nonnegative, zero only at the tilt.
pub fn variational_gap(mu: &[f64], h: &[f64], nu: &[f64]) -> Result<ExtendedReal, EntropyError> {
    same_dim(mu, h)?;
    same_dim(mu, nu)?;
    let entropy = match relative_entropy(mu, nu)? {
        ExtendedReal::Finite(r) => r,
        ExtendedReal::PosInfinity => return Ok(ExtendedReal::PosInfinity),
    };
    let linear: f64 = mu
        .iter()
        .zip(h)
        .filter(|(&m, _)| m > 0.0)
        .map(|(&m, &v)| m * v)
        .sum();
    Ok(ExtendedReal::Finite(log_mgf_unchecked(h, nu) - (linear - entropy)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn entropy_of_equal_pair_is_zero() {
        let v = [0.3, 0.7];
        assert_eq!(relative_entropy(&v, &v).unwrap(), ExtendedReal::Finite(0.0));
    }

    #[test]
    fn entropy_point_mass_against_uniform() {
        let r = relative_entropy(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(r.to_f64(), 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn entropy_without_absolute_continuity_is_infinite() {
        let r = relative_entropy(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert_eq!(r, ExtendedReal::PosInfinity);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        assert!(matches!(
            relative_entropy(&[1.0], &[0.5, 0.5]),
            Err(EntropyError::DimensionMismatch { left: 1, right: 2 })
        ));
        assert!(log_mgf(&[0.0, 1.0, 2.0], &[0.5, 0.5]).is_err());
        assert!(tilt(&[0.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn log_mgf_of_constant_is_the_constant() {
        assert_abs_diff_eq!(log_mgf(&[2.5, 2.5, 2.5], &[0.2, 0.3, 0.5]).unwrap(), 2.5, epsilon = 1e-15);
    }

    #[test]
    fn log_mgf_two_point_example() {
        let v = log_mgf(&[0.0, 3f64.ln()], &[0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(v, 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn log_mgf_large_exponents_do_not_overflow() {
        let v = log_mgf(&[1000.0, 1000.0 + 2f64.ln()], &[0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(v, 1000.0 + 1.5f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn log_mgf_ignores_values_off_support() {
        let v = log_mgf(&[1.0, 1e308], &[1.0, 0.0]).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn tilt_examples() {
        let t = tilt(&[4.0, 4.0], &[0.3, 0.7]).unwrap();
        assert_abs_diff_eq!(t[0], 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(t[1], 0.7, epsilon = 1e-15);

        let t = tilt(&[0.0, 3f64.ln()], &[0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(t[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(t[1], 0.75, epsilon = 1e-15);

        let t = tilt(&[-7.0, 300.0], &[1.0, 0.0]).unwrap();
        assert_eq!(&*t, &[1.0, 0.0]);
    }

    #[test]
    fn gap_vanishes_at_tilt_and_for_constant_h() {
        let h = [0.3, -1.2, 2.0];
        let nu = [0.2, 0.5, 0.3];
        let mu0 = tilt(&h, &nu).unwrap();
        assert!(variational_gap(&mu0, &h, &nu).unwrap().to_f64().abs() < 1e-12);

        let g = variational_gap(&nu, &[1.5; 3], &nu).unwrap();
        assert_abs_diff_eq!(g.to_f64(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn gap_is_positive_away_from_tilt() {
        let h = [0.0, 1.0, -0.5, 2.0];
        let nu = [0.25; 4];
        let mu = [0.1, 0.2, 0.3, 0.4];
        let g = variational_gap(&mu, &h, &nu).unwrap().to_f64();
        assert!(g > 1e-6, "gap {g}");
    }

    #[test]
    fn gap_is_infinite_without_absolute_continuity() {
        let g = variational_gap(&[0.5, 0.5], &[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(g, ExtendedReal::PosInfinity);
    }

    #[test]
    fn prob_vector_validation() {
        assert!(ProbVector::new(vec![0.5, 0.5]).is_ok());
        assert!(ProbVector::new(vec![0.5, 0.4]).is_err());
        assert!(ProbVector::new(vec![1.5, -0.5]).is_err());
        assert!(ProbVector::new(vec![]).is_err());
    }
}
