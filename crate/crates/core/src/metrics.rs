//! Accuracy, calibration and likelihood scores plus the significance tests
//! used to strike and rank models.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::predictive::{special, PredictiveDistribution};

pub const DEFAULT_ECE_BINS: usize = 10;

/// Root mean squared error over examples and dimensions.
pub fn rmse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "rmse",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    if pred.is_empty() {
        return Err(Error::Empty("rmse input"));
    }
    let sse: f64 = pred.data().iter().zip(target.data()).map(|(p, y)| (p - y) * (p - y)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

/// Equal-width histogram of CDF values on `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBins {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl CalibrationBins {
    /// Bin `j` (1-based) holds `p_{j-1} < F <= p_j`; `F = 0` goes to bin 1.
    pub fn from_values(values: &[f64], m: usize) -> Result<Self> {
        if m < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 bins, got {m}")));
        }
        if values.is_empty() {
            return Err(Error::Empty("calibration values"));
        }
        let edges: Vec<f64> = (0..=m).map(|j| j as f64 / m as f64).collect();
        let mut counts = vec![0u64; m];
        for &f in values {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Domain(format!("CDF value {f} outside [0, 1]")));
            }
            let mut j = ((f * m as f64).ceil() as usize).clamp(1, m);
            while j > 1 && f <= edges[j - 1] {
                j -= 1;
            }
            while j < m && f > edges[j] {
                j += 1;
            }
            counts[j - 1] += 1;
        }
        Ok(Self { edges, counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let n = self.total() as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }

    /// `sum_j (p_hat_j - (p_j - p_{j-1}))^2`.
    pub fn ece(&self) -> f64 {
        self.probabilities()
            .iter()
            .enumerate()
            .map(|(j, p)| {
                let d = p - (self.edges[j + 1] - self.edges[j]);
                d * d
            })
            .sum()
    }
}

pub fn ece(cdf_values: &[f64], m: usize) -> Result<f64> {
    Ok(CalibrationBins::from_values(cdf_values, m)?.ece())
}

/// Average per-example log density.
pub fn mean_ll(dist: &PredictiveDistribution, y: &Tensor) -> Result<f64> {
    let ll = dist.log_density(y)?;
    if ll.is_empty() {
        return Err(Error::Empty("log-likelihood input"));
    }
    Ok(ll.iter().sum::<f64>() / ll.len() as f64)
}

/// Upper tail `P(T > t)` of a standard Student-t with `dof` degrees of freedom.
fn student_upper_tail(t: f64, dof: f64) -> Result<f64> {
    if t == 0.0 {
        return Ok(0.5);
    }
    let x = dof / (dof + t * t);
    let half = 0.5 * special::regularized_incomplete_beta(0.5 * dof, 0.5, x)?;
    Ok(if t > 0.0 { half } else { 1.0 - half })
}

/// One-sided paired t-test of `H1: mean(a - b) > 0`.
///
/// With zero-variance differences the statistic is undefined: the p-value is
/// 1 when the common difference is `<= 0` and 0 otherwise.
pub fn paired_t_test_one_sided(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InvalidArgument("paired t-test needs at least 2 pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Ok(if mean > 0.0 { 0.0 } else { 1.0 });
    }
    let t = mean / (var / n as f64).sqrt();
    student_upper_tail(t, (n - 1) as f64)
}

/// Result of a contingency G-test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GTest {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Two-sample G-test on a `2 x m` table of histogram counts. Columns with zero
/// total are dropped and the degrees of freedom shrink to match.
pub fn g_test(counts_a: &[u64], counts_b: &[u64]) -> Result<GTest> {
    if counts_a.len() != counts_b.len() {
        return Err(Error::InvalidArgument("histograms differ in bin count".into()));
    }
    let (ra, rb) = (counts_a.iter().sum::<u64>() as f64, counts_b.iter().sum::<u64>() as f64);
    if ra == 0.0 || rb == 0.0 {
        return Err(Error::Empty("histogram counts"));
    }
    let n = ra + rb;
    let mut g = 0.0;
    let mut columns = 0usize;
    for (&a, &b) in counts_a.iter().zip(counts_b) {
        let c = (a + b) as f64;
        if c == 0.0 {
            continue;
        }
        columns += 1;
        for (o, r) in [(a as f64, ra), (b as f64, rb)] {
            if o > 0.0 {
                g += o * (o / (r * c / n)).ln();
            }
        }
    }
    let statistic = (2.0 * g).max(0.0);
    let dof = columns.saturating_sub(1);
    let p_value = if dof == 0 {
        1.0
    } else {
        special::regularized_upper_gamma(0.5 * dof as f64, 0.5 * statistic)?
    };
    Ok(GTest {
        statistic,
        dof,
        p_value,
    })
}

pub fn g_test_histograms(counts_a: &[u64], counts_b: &[u64]) -> Result<f64> {
    Ok(g_test(counts_a, counts_b)?.p_value)
}

/// Result of a one-sided two-sample Kolmogorov-Smirnov test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsTest {
    pub statistic: f64,
    pub p_value: f64,
}

/// `D+ = sup_x (F_a(x) - F_b(x))`, large when `a` tends to be smaller than `b`.
/// The p-value is the asymptotic `exp(-2 D+^2 nm / (n + m))`.
pub fn ks_test(a: &[f64], b: &[f64]) -> Result<KsTest> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("KS sample"));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::Domain("NaN in KS sample".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let (n, m) = (sa.len(), sb.len());
    let (mut i, mut j) = (0, 0);
    let mut d = 0.0f64;
    while i < n || j < m {
        let x = match (sa.get(i), sb.get(j)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => unreachable!(),
        };
        while i < n && sa[i] <= x {
            i += 1;
        }
        while j < m && sb[j] <= x {
            j += 1;
        }
        d = d.max(i as f64 / n as f64 - j as f64 / m as f64);
    }
    let eff = (n * m) as f64 / (n + m) as f64;
    Ok(KsTest {
        statistic: d,
        p_value: (-2.0 * d * d * eff).exp().min(1.0),
    })
}

pub fn ks_test_one_sided(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(ks_test(a, b)?.p_value)
}

/// Per-model evaluation on a held-out set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub rmse: f64,
    pub ece: f64,
    pub mean_ll: f64,
    /// Per-example squared error, averaged over output dimensions.
    pub sq_errors: Vec<f64>,
    /// CDF values pooled over examples and dimensions.
    pub cdf_values: Vec<f64>,
    pub ll: Vec<f64>,
    pub bins: CalibrationBins,
}

impl ModelScore {
    pub fn evaluate(dist: &PredictiveDistribution, y: &Tensor, bins: usize) -> Result<Self> {
        let (mean, _) = dist.moments();
        let rmse = rmse(&mean, y)?;
        let q = y.cols();
        let sq_errors = (0..y.rows())
            .map(|i| {
                let s: f64 = mean.row(i).iter().zip(y.row(i)).map(|(p, t)| (p - t) * (p - t)).sum();
                s / q as f64
            })
            .collect();
        let cdf_values = dist.cdf(y)?.into_data();
        let hist = CalibrationBins::from_values(&cdf_values, bins)?;
        let ll = dist.log_density(y)?;
        let mean_ll = ll.iter().sum::<f64>() / ll.len() as f64;
        Ok(Self {
            rmse,
            ece: hist.ece(),
            mean_ll,
            sq_errors,
            cdf_values,
            ll,
            bins: hist,
        })
    }

    /// Concatenates fold scores and recomputes the pooled summaries.
    pub fn pool(parts: &[ModelScore]) -> Result<Self> {
        let first = parts.first().ok_or(Error::Empty("scores to pool"))?;
        let m = first.bins.counts.len();
        let mut sq_errors = Vec::new();
        let mut cdf_values = Vec::new();
        let mut ll = Vec::new();
        for p in parts {
            sq_errors.extend_from_slice(&p.sq_errors);
            cdf_values.extend_from_slice(&p.cdf_values);
            ll.extend_from_slice(&p.ll);
        }
        let hist = CalibrationBins::from_values(&cdf_values, m)?;
        Ok(Self {
            rmse: (sq_errors.iter().sum::<f64>() / sq_errors.len() as f64).sqrt(),
            ece: hist.ece(),
            mean_ll: ll.iter().sum::<f64>() / ll.len() as f64,
            sq_errors,
            cdf_values,
            ll,
            bins: hist,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_examples() {
        let y = Tensor::column(&[1.0, 2.0]);
        assert_eq!(rmse(&y, &y).unwrap(), 0.0);
        let p = Tensor::column(&[4.0, 6.0]);
        assert!((rmse(&p, &y).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        assert!(rmse(&Tensor::column(&[]), &Tensor::column(&[])).is_err());
    }

    #[test]
    fn ece_examples() {
        assert_eq!(ece(&[0.25, 0.75], 2).unwrap(), 0.0);
        assert_eq!(ece(&[0.1, 0.2], 2).unwrap(), 0.5);
        assert!(ece(&[], 2).is_err());
        assert!(ece(&[0.5], 1).is_err());
    }

    #[test]
    fn ece_boundary_convention() {
        let b = CalibrationBins::from_values(&[0.0, 0.5, 1.0, 0.3, 0.1], 10).unwrap();
        assert_eq!(b.counts, vec![2, 0, 1, 0, 1, 0, 0, 0, 0, 1]);
    }

    #[test]
    fn degenerate_t_test() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(paired_t_test_one_sided(&a, &a).unwrap(), 1.0);
        let b: Vec<f64> = a.iter().map(|v| v - 1.0).collect();
        assert_eq!(paired_t_test_one_sided(&a, &b).unwrap(), 0.0);
        assert!(paired_t_test_one_sided(&a[..1], &a[..1]).is_err());
    }

    #[test]
    fn g_test_identical_is_one() {
        let r = g_test(&[50, 50], &[50, 50]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
        assert_eq!(g_test(&[3, 0, 7], &[3, 0, 7]).unwrap().dof, 1);
        assert!(g_test(&[0, 0], &[1, 1]).is_err());
    }

    #[test]
    fn ks_extremes() {
        let b: Vec<f64> = (0..100).map(|i| i as f64 * 0.37).collect();
        let r = ks_test(&b, &b).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
        let a: Vec<f64> = b.iter().map(|v| v - 100.0).collect();
        let r = ks_test(&a, &b).unwrap();
        assert_eq!(r.statistic, 1.0);
        assert!((r.p_value - (-100.0f64).exp()).abs() < 1e-60);
        assert!(ks_test(&[], &b).is_err());
    }
}
