//! Predictive distributions over diagonal outputs.
//!
//! Parameters are `[n, q]` tensors: one row per example, one column per output
//! dimension. Densities are products over output dimensions.

pub mod special;

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::Moments;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Degrees of freedom of the unit-variance Student baseline.
pub const UNIT_STUDENT_DOF: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub enum PredictiveDistribution {
    Normal { mean: Tensor, variance: Tensor },
    Student { loc: Tensor, scale: Tensor, dof: Tensor },
    /// Equally weighted components of one kind.
    Mixture(Vec<PredictiveDistribution>),
}

fn check_same(what: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "predictive",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if !b.all_finite() {
        return Err(Error::Domain(format!("non-finite {what}")));
    }
    Ok(())
}

fn normal_log_pdf(y: f64, mean: f64, var: f64) -> f64 {
    let r = y - mean;
    -0.5 * (LN_2PI + var.ln() + r * r / var)
}

fn normal_cdf(y: f64, mean: f64, var: f64) -> f64 {
    0.5 * special::erfc(-(y - mean) / (2.0 * var).sqrt())
}

fn student_log_pdf(y: f64, loc: f64, scale: f64, dof: f64) -> f64 {
    let t = (y - loc) / scale;
    special::ln_gamma(0.5 * (dof + 1.0)) - special::ln_gamma(0.5 * dof) - 0.5 * (dof * PI).ln() - scale.ln()
        - 0.5 * (dof + 1.0) * (t * t / dof).ln_1p()
}

fn student_cdf(y: f64, loc: f64, scale: f64, dof: f64) -> Result<f64> {
    let t = (y - loc) / scale;
    if t == 0.0 {
        return Ok(0.5);
    }
    let x = dof / (dof + t * t);
    let tail = 0.5 * special::regularized_incomplete_beta(0.5 * dof, 0.5, x)?;
    Ok(if t < 0.0 { tail } else { 1.0 - tail })
}

impl PredictiveDistribution {
    pub fn normal(mean: Tensor, variance: Tensor) -> Result<Self> {
        check_same("variance", &mean, &variance)?;
        if variance.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain("variance must be positive".into()));
        }
        Ok(Self::Normal { mean, variance })
    }

    pub fn student(loc: Tensor, scale: Tensor, dof: Tensor) -> Result<Self> {
        check_same("scale", &loc, &scale)?;
        check_same("dof", &loc, &dof)?;
        if scale.data().iter().any(|&s| s <= 0.0) {
            return Err(Error::Domain("scale must be positive".into()));
        }
        if dof.data().iter().any(|&v| v <= 2.0) {
            return Err(Error::Domain("degrees of freedom must exceed 2".into()));
        }
        Ok(Self::Student { loc, scale, dof })
    }

    pub fn mixture(components: Vec<PredictiveDistribution>) -> Result<Self> {
        let first = components.first().ok_or(Error::Empty("mixture components"))?;
        let shape = first.shape().to_vec();
        for c in &components {
            if std::mem::discriminant(c) != std::mem::discriminant(first) || matches!(c, Self::Mixture(_)) {
                return Err(Error::InvalidArgument("mixture components must share one base kind".into()));
            }
            if c.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "mixture",
                    lhs: shape.clone(),
                    rhs: c.shape().to_vec(),
                });
            }
        }
        Ok(Self::Mixture(components))
    }

    /// `N(mean, 1)` in every dimension.
    pub fn unit_variance(mean: Tensor) -> Self {
        let variance = Tensor::full(mean.shape(), 1.0);
        Self::Normal { mean, variance }
    }

    /// Student with unit variance: `nu = 100`, `sigma = sqrt(98 / 100)`.
    pub fn unit_variance_student(loc: Tensor) -> Self {
        let scale = Tensor::full(loc.shape(), ((UNIT_STUDENT_DOF - 2.0) / UNIT_STUDENT_DOF).sqrt());
        let dof = Tensor::full(loc.shape(), UNIT_STUDENT_DOF);
        Self::Student { loc, scale, dof }
    }

    /// Normal or Student distribution from a model's head outputs.
    pub fn from_moments(m: &Moments) -> Result<Self> {
        match (&m.scale_sq, &m.dof) {
            (Some(s2), Some(dof)) => Self::student(m.mean.clone(), s2.map(f64::sqrt), dof.clone()),
            (Some(s2), None) => Self::normal(m.mean.clone(), s2.clone()),
            _ => Err(Error::InvalidArgument("model has no scale head".into())),
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Self::Normal { mean, .. } => mean.shape(),
            Self::Student { loc, .. } => loc.shape(),
            Self::Mixture(c) => c[0].shape(),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape().first().copied().unwrap_or(0)
    }

    fn check_target(&self, y: &Tensor) -> Result<()> {
        if y.shape() != self.shape() {
            return Err(Error::ShapeMismatch {
                op: "predictive target",
                lhs: self.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Log density of each example's target row.
    pub fn log_density(&self, y: &Tensor) -> Result<Vec<f64>> {
        self.check_target(y)?;
        let q = y.cols();
        let per_row = |f: &dyn Fn(usize) -> f64| -> Vec<f64> {
            (0..y.rows())
                .map(|i| (0..q).map(|j| f(i * q + j)).sum())
                .collect()
        };
        let yd = y.data();
        Ok(match self {
            Self::Normal { mean, variance } => {
                let (m, v) = (mean.data(), variance.data());
                per_row(&|k| normal_log_pdf(yd[k], m[k], v[k]))
            }
            Self::Student { loc, scale, dof } => {
                let (l, s, d) = (loc.data(), scale.data(), dof.data());
                per_row(&|k| student_log_pdf(yd[k], l[k], s[k], d[k]))
            }
            Self::Mixture(components) if components.len() == 1 => components[0].log_density(y)?,
            Self::Mixture(components) => {
                let parts = components
                    .iter()
                    .map(|c| c.log_density(y))
                    .collect::<Result<Vec<_>>>()?;
                let ln_m = (components.len() as f64).ln();
                (0..y.rows())
                    .map(|i| {
                        let top = parts.iter().map(|p| p[i]).fold(f64::NEG_INFINITY, f64::max);
                        if top == f64::NEG_INFINITY {
                            return top;
                        }
                        let s: f64 = parts.iter().map(|p| (p[i] - top).exp()).sum();
                        top + s.ln() - ln_m
                    })
                    .collect()
            }
        })
    }

    /// Marginal CDF in each dimension.
    pub fn cdf(&self, y: &Tensor) -> Result<Tensor> {
        self.check_target(y)?;
        let yd = y.data();
        let data: Vec<f64> = match self {
            Self::Normal { mean, variance } => yd
                .iter()
                .zip(mean.data().iter().zip(variance.data()))
                .map(|(&y, (&m, &v))| normal_cdf(y, m, v))
                .collect(),
            Self::Student { loc, scale, dof } => yd
                .iter()
                .enumerate()
                .map(|(k, &y)| student_cdf(y, loc.data()[k], scale.data()[k], dof.data()[k]))
                .collect::<Result<_>>()?,
            Self::Mixture(components) => {
                let m = components.len() as f64;
                let mut acc = vec![0.0; yd.len()];
                for c in components {
                    for (a, v) in acc.iter_mut().zip(c.cdf(y)?.data()) {
                        *a += v;
                    }
                }
                acc.into_iter().map(|a| a / m).collect()
            }
        };
        Tensor::new(y.shape().to_vec(), data)
    }

    /// Predictive mean and variance per dimension.
    pub fn moments(&self) -> (Tensor, Tensor) {
        match self {
            Self::Normal { mean, variance } => (mean.clone(), variance.clone()),
            Self::Student { loc, scale, dof } => {
                let var = scale
                    .data()
                    .iter()
                    .zip(dof.data())
                    .map(|(&s, &v)| s * s * v / (v - 2.0))
                    .collect();
                (loc.clone(), Tensor::new(loc.shape().to_vec(), var).expect("same shape"))
            }
            Self::Mixture(components) => {
                let parts: Vec<(Tensor, Tensor)> = components.iter().map(|c| c.moments()).collect();
                let m = parts.len() as f64;
                let len = parts[0].0.len();
                let mut mean = vec![0.0; len];
                let mut var = vec![0.0; len];
                for (mu, v) in &parts {
                    for k in 0..len {
                        mean[k] += mu.data()[k];
                        var[k] += v.data()[k];
                    }
                }
                for k in 0..len {
                    mean[k] /= m;
                    var[k] /= m;
                }
                // law of total variance, spread term accumulated around the mixture mean
                let mut spread = vec![0.0; len];
                for (mu, _) in &parts {
                    for k in 0..len {
                        let d = mu.data()[k] - mean[k];
                        spread[k] += d * d;
                    }
                }
                for k in 0..len {
                    var[k] += spread[k] / m;
                }
                let shape = self.shape().to_vec();
                (
                    Tensor::new(shape.clone(), mean).expect("same shape"),
                    Tensor::new(shape, var).expect("same shape"),
                )
            }
        }
    }

    fn sample_row(&self, i: usize, rng: &mut impl Rng, out: &mut Vec<f64>) -> Result<()> {
        let q = self.shape().get(1).copied().unwrap_or(1);
        match self {
            Self::Normal { mean, variance } => {
                for k in i * q..(i + 1) * q {
                    let z: f64 = StandardNormal.sample(rng);
                    out.push(mean.data()[k] + variance.data()[k].sqrt() * z);
                }
            }
            Self::Student { loc, scale, dof } => {
                for k in i * q..(i + 1) * q {
                    let t = StudentT::new(dof.data()[k]).map_err(|e| Error::Domain(e.to_string()))?;
                    out.push(loc.data()[k] + scale.data()[k] * t.sample(rng));
                }
            }
            Self::Mixture(components) => {
                let c = rng.random_range(0..components.len());
                components[c].sample_row(i, rng, out)?;
            }
        }
        Ok(())
    }

    /// One draw per example.
    pub fn sample(&self, rng: &mut impl Rng) -> Result<Tensor> {
        let mut out = Vec::with_capacity(self.shape().iter().product());
        for i in 0..self.rows() {
            self.sample_row(i, rng, &mut out)?;
        }
        Tensor::new(self.shape().to_vec(), out)
    }
}
