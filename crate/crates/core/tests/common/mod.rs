//! Finite-difference oracle shared by the gradient suite and the acceptance run.
//!
//! Losses are re-evaluated in plain `f64` from `predict_moments`, with every
//! stop-gradient quantity held at its unperturbed value, and differenced
//! centrally parameter by parameter.

#![allow(dead_code)]

use std::f64::consts::PI;

use faithful_core::autodiff::Tensor;
use faithful_core::losses::{Likelihood, LossSpec, Objective};
use faithful_core::model::{Activation, ArchitectureSpec, LayerSpec, Moments, Partition, PartitionedModel, PredictMode};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use statrs::function::gamma::ln_gamma;

pub const FD_STEP: f64 = 1e-5;

pub const ALL_LOSSES: [LossSpec; 10] = [
    LossSpec::Sse,
    LossSpec::GaussianNll,
    LossSpec::Faithful,
    LossSpec::BetaNll { beta: 0.5 },
    LossSpec::StudentNll,
    LossSpec::FaithfulStudent,
    LossSpec::NewtonMean { likelihood: Likelihood::Normal },
    LossSpec::ShieldedTrunk { likelihood: Likelihood::Normal },
    LossSpec::NewtonMean { likelihood: Likelihood::Student },
    LossSpec::ShieldedTrunk { likelihood: Likelihood::Student },
];

pub struct Instance {
    pub model: PartitionedModel,
    pub x: Tensor,
    pub y: Tensor,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// A small random network and batch suited to `spec`.
pub fn random_instance(rng: &mut ChaCha8Rng, spec: LossSpec) -> Instance {
    let input_dim = rng.random_range(1..=3);
    let output_dim = rng.random_range(1..=2);
    let depth = rng.random_range(1..=2);
    let trunk = (0..depth)
        .map(|_| LayerSpec {
            width: rng.random_range(2..=5),
            activation: if rng.random_bool(0.7) { Activation::Elu } else { Activation::Linear },
        })
        .collect();
    let arch = ArchitectureSpec {
        input_dim,
        output_dim,
        trunk,
        dof_head: spec.likelihood() == Some(Likelihood::Student),
        dropout_rate: 0.0,
    };
    let model = PartitionedModel::build(arch, rng.random()).unwrap();
    let rows = rng.random_range(3..=8);
    let x = Tensor::matrix(rows, input_dim, uniform(rng, rows * input_dim, -2.0, 2.0)).unwrap();
    let y = Tensor::matrix(rows, output_dim, uniform(rng, rows * output_dim, -2.0, 2.0)).unwrap();
    Instance { model, x, y }
}

fn sse(y: &[f64], mu: &[f64]) -> f64 {
    y.iter().zip(mu).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum()
}

fn normal_nll(y: &[f64], mu: &[f64], var: &[f64]) -> f64 {
    (0..y.len())
        .map(|i| 0.5 * ((2.0 * PI * var[i]).ln() + (y[i] - mu[i]).powi(2) / var[i]))
        .sum()
}

fn student_nll(y: &[f64], mu: &[f64], scale_sq: &[f64], dof: &[f64]) -> f64 {
    (0..y.len())
        .map(|i| {
            let (v, s) = (dof[i], scale_sq[i].sqrt());
            let t = (y[i] - mu[i]) / s;
            ln_gamma(v / 2.0) - ln_gamma((v + 1.0) / 2.0)
                + 0.5 * (v * PI).ln()
                + s.ln()
                + 0.5 * (v + 1.0) * (1.0 + t * t / v).ln()
        })
        .sum()
}

/// Loss value at `now` with stop-gradient inputs taken from `base`.
/// `trunk_moved` says whether the perturbation was in the trunk.
fn surrogate(spec: LossSpec, y: &[f64], now: &Moments, base: &Moments, trunk_moved: bool) -> f64 {
    let mu = now.mean.data();
    let mu0 = base.mean.data();
    let heads = if spec.shields_trunk() && trunk_moved { base } else { now };
    let var = || heads.scale_sq.as_ref().unwrap().data();
    let dof = || heads.dof.as_ref().unwrap().data();
    let lik = |mu: &[f64], l: Likelihood| match l {
        Likelihood::Normal => normal_nll(y, mu, var()),
        Likelihood::Student => student_nll(y, mu, var(), dof()),
    };
    match spec {
        LossSpec::Sse => sse(y, mu),
        LossSpec::GaussianNll => lik(mu, Likelihood::Normal),
        LossSpec::StudentNll => lik(mu, Likelihood::Student),
        LossSpec::BetaNll { beta } => {
            let w0 = base.scale_sq.as_ref().unwrap().data();
            let v = var();
            (0..y.len())
                .map(|i| w0[i].powf(beta) * (0.5 * v[i].ln() + (y[i] - mu[i]).powi(2) / (2.0 * v[i])))
                .sum()
        }
        LossSpec::Faithful => sse(y, mu) + lik(mu0, Likelihood::Normal),
        LossSpec::FaithfulStudent => sse(y, mu) + lik(mu0, Likelihood::Student),
        LossSpec::NewtonMean { likelihood } => sse(y, mu) + lik(mu0, likelihood),
        LossSpec::ShieldedTrunk { likelihood } => lik(mu, likelihood),
    }
}

fn moments(model: &PartitionedModel, x: &Tensor) -> Moments {
    model.predict_moments(x, PredictMode::Deterministic).unwrap()
}

/// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1)` over every
/// parameter entry. Absent gradients count as zero.
pub fn max_fd_error(inst: &Instance, spec: LossSpec) -> f64 {
    let Instance { model, x, y } = inst;
    let mut obj = Objective::build(model, x.rows(), spec, false).unwrap();
    obj.evaluate(model, x, y, &[]).unwrap();
    let grads = obj.param_gradients().unwrap();
    let base = moments(model, x);
    let mut worst: f64 = 0.0;
    for p in Partition::ALL {
        if !model.has(p) {
            continue;
        }
        for t in 0..model.params(p).len() {
            let len = model.params(p)[t].len();
            for k in 0..len {
                let at = |delta: f64| {
                    let mut m = model.clone();
                    let store = m.store_mut();
                    let tensor = std::sync::Arc::make_mut(&mut store.get_mut(&p).unwrap()[t]);
                    tensor.data_mut()[k] += delta;
                    surrogate(spec, y.data(), &moments(&m, x), &base, p == Partition::Trunk)
                };
                let numeric = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
                let analytic = grads
                    .get(&p)
                    .and_then(|v| v.get(t))
                    .and_then(|g| g.as_ref())
                    .map_or(0.0, |g| g.data()[k]);
                let denom = analytic.abs().max(numeric.abs()).max(1.0);
                worst = worst.max((analytic - numeric).abs() / denom);
            }
        }
    }
    worst
}

/// Composite Simpson rule with `n` (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let inner: f64 = (1..n)
        .map(|i| f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 })
        .sum();
    (f(a) + inner + f(b)) * h / 3.0
}

/// Standard normal CDF by quadrature of the density.
pub fn normal_cdf_quadrature(x: f64) -> f64 {
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * PI).sqrt();
    0.5 + simpson(pdf, 0.0, x, 20_000)
}

/// `sup |F_n(u) - u|` of a sample against the uniform law on `[0, 1]`.
pub fn ks_distance_from_uniform(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &u)| ((i + 1) as f64 / n - u).max(u - i as f64 / n))
        .fold(0.0, f64::max)
}

/// Hand-expanded G statistic of a 2 x m table.
pub fn g_statistic(a: &[f64], b: &[f64]) -> f64 {
    let (ta, tb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    let total = ta + tb;
    let mut g = 0.0;
    for j in 0..a.len() {
        let col = a[j] + b[j];
        for (o, t) in [(a[j], ta), (b[j], tb)] {
            if o > 0.0 {
                g += o * (o / (t * col / total)).ln();
            }
        }
    }
    2.0 * g
}
