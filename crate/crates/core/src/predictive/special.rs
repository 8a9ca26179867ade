//! Special functions needed by the predictive CDFs and the significance tests.
//!
//! Thin domain-checked wrappers over `statrs`.

use statrs::function::{beta, erf as erf_impl, gamma};

use crate::error::{Error, Result};

pub fn erf(x: f64) -> f64 {
    erf_impl::erf(x)
}

pub fn erfc(x: f64) -> f64 {
    erf_impl::erfc(x)
}

pub fn ln_gamma(x: f64) -> f64 {
    gamma::ln_gamma(x)
}

pub fn digamma(x: f64) -> f64 {
    gamma::digamma(x)
}

/// `I_x(a, b)` for `a, b > 0` and `x` in `[0, 1]`.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> Result<f64> {
    beta::checked_beta_reg(a, b, x)
        .map_err(|e| Error::Domain(format!("incomplete beta I_{x}({a}, {b}): {e}")))
}

/// `P(s, x)` for `s > 0` and `x >= 0`.
pub fn regularized_lower_gamma(s: f64, x: f64) -> Result<f64> {
    if s > 0.0 && x == 0.0 {
        return Ok(0.0);
    }
    gamma::checked_gamma_lr(s, x).map_err(|e| Error::Domain(format!("lower gamma P({s}, {x}): {e}")))
}

/// `Q(s, x) = 1 - P(s, x)`, computed directly for tail accuracy.
pub fn regularized_upper_gamma(s: f64, x: f64) -> Result<f64> {
    if s > 0.0 && x == 0.0 {
        return Ok(1.0);
    }
    gamma::checked_gamma_ur(s, x).map_err(|e| Error::Domain(format!("upper gamma Q({s}, {x}): {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        assert_eq!(erf(0.0), 0.0);
        assert_eq!(regularized_incomplete_beta(2.5, 0.7, 1.0).unwrap(), 1.0);
        assert!((regularized_lower_gamma(1.0, 1.0).unwrap() - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn domain_errors() {
        assert!(regularized_incomplete_beta(-1.0, 1.0, 0.5).is_err());
        assert!(regularized_incomplete_beta(1.0, 1.0, 1.5).is_err());
        assert!(regularized_lower_gamma(0.0, 1.0).is_err());
        assert!(regularized_lower_gamma(1.0, -1.0).is_err());
        assert_eq!(regularized_lower_gamma(2.0, 0.0).unwrap(), 0.0);
        assert_eq!(regularized_upper_gamma(2.0, 0.0).unwrap(), 1.0);
    }
}
