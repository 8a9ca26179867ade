mod common;

use std::f64::consts::PI;

use common::{g_statistic, ks_distance_from_uniform, normal_cdf_quadrature, simpson};
use faithful_core::autodiff::Tensor;
use faithful_core::data::{
    generate_decomposition_pair, generate_sine_dataset, load_csv_dataset, standardize, write_csv_dataset, Dataset,
    NoiseParam, SineTruth, SINE_RANGE,
};
use faithful_core::metrics::{ece, g_test, ks_test, ks_test_one_sided, mean_ll, paired_t_test_one_sided, rmse};
use faithful_core::predictive::special::{regularized_incomplete_beta, regularized_lower_gamma};
use faithful_core::predictive::PredictiveDistribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normals(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(r)).collect()
}

#[test]
fn normal_cdf_matches_quadrature() {
    let d = PredictiveDistribution::normal(Tensor::column(&[0.0]), Tensor::column(&[1.0])).unwrap();
    for x in [-2.5, -0.3, 0.7, 1.959_964, 3.1] {
        let got = d.cdf(&Tensor::column(&[x])).unwrap().item();
        assert!((got - normal_cdf_quadrature(x)).abs() < 1e-9, "x = {x}");
    }
    assert!((normal_cdf_quadrature(1.959_964) - 0.975).abs() < 1e-6);
}

#[test]
fn incomplete_beta_matches_quadrature() {
    for &(a, b, x) in &[(2.0, 3.0, 0.4), (1.5, 1.5, 0.8), (5.0, 2.0, 0.3), (1.0, 4.5, 0.05)] {
        let f = |t: f64| t.powf(a - 1.0) * (1.0 - t).powf(b - 1.0);
        let want = simpson(f, 0.0, x, 20_000) / simpson(f, 0.0, 1.0, 20_000);
        let got = regularized_incomplete_beta(a, b, x).unwrap();
        assert!((got - want).abs() < 1e-7, "I({a}, {b}; {x}) = {got}, quadrature {want}");
    }
}

#[test]
fn lower_gamma_matches_series() {
    for &(s, x) in &[(0.5, 0.3), (1.0, 2.0), (2.5, 1.7), (4.0, 6.0)] {
        // P(s, x) = x^s e^-x sum_k x^k / Gamma(s + k + 1), with the Gamma built by recurrence.
        let mut gamma = statrs::function::gamma::gamma(s + 1.0);
        let mut term_sum = 0.0;
        let mut xk = 1.0;
        for k in 0..200 {
            term_sum += xk / gamma;
            xk *= x;
            gamma *= s + k as f64 + 1.0;
        }
        let want = x.powf(s) * (-x).exp() * term_sum;
        let got = regularized_lower_gamma(s, x).unwrap();
        assert!((got - want).abs() < 1e-12, "P({s}, {x})");
    }
}

#[test]
fn t_test_reproduces_the_table_value() {
    // Alternating +-1 noise around a shift chosen to give t = 2.045 on 29 dof.
    let n = 30;
    let e: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let sd = (n as f64 / (n as f64 - 1.0)).sqrt();
    let shift = 2.045 * sd / (n as f64).sqrt();
    let b = vec![0.0; n];
    let a: Vec<f64> = e.iter().map(|v| v + shift).collect();
    let p = paired_t_test_one_sided(&a, &b).unwrap();
    assert!((p - 0.025).abs() < 1e-3, "p = {p}");
}

#[test]
fn t_test_constant_shift_drives_p_to_zero() {
    let b: Vec<f64> = (0..30).map(|i| i as f64).collect();
    let a: Vec<f64> = b.iter().map(|v| v + 1.0).collect();
    assert_eq!(paired_t_test_one_sided(&a, &b).unwrap(), 0.0);
    let mut r = rng(3);
    let jitter: Vec<f64> = a.iter().map(|v| v + 1e-6 * r.random_range(-1.0..1.0)).collect();
    assert!(paired_t_test_one_sided(&jitter, &b).unwrap() < 1e-12);
    assert_eq!(paired_t_test_one_sided(&b, &a).unwrap(), 1.0);
}

#[test]
fn t_test_under_symmetry_averages_one_half() {
    let mut r = rng(4);
    let trials = 400;
    let mean_p: f64 = (0..trials)
        .map(|_| {
            let a = normals(&mut r, 200);
            let b = normals(&mut r, 200);
            paired_t_test_one_sided(&a, &b).unwrap()
        })
        .sum::<f64>()
        / trials as f64;
    assert!((mean_p - 0.5).abs() < 0.1, "mean p {mean_p}");
}

#[test]
fn g_test_matches_hand_expansion() {
    let t = g_test(&[90, 10], &[50, 50]).unwrap();
    let g = g_statistic(&[90.0, 10.0], &[50.0, 50.0]);
    assert!((t.statistic - g).abs() < 1e-10);
    assert_eq!(t.dof, 1);
    // Chi-square with one dof: P(X > g) = 2 (1 - Phi(sqrt g)).
    let p = 2.0 * (1.0 - normal_cdf_quadrature(g.sqrt()));
    assert!((t.p_value - p).abs() < 1e-3);
    assert!(t.p_value < 0.05);
    assert_eq!(g_test(&[50, 50], &[50, 50]).unwrap().p_value, 1.0);
}

#[test]
fn g_test_two_dof_survival_is_exponential() {
    let a = [30u64, 50, 20];
    let b = [40u64, 30, 30];
    let t = g_test(&a, &b).unwrap();
    let g = g_statistic(&[30.0, 50.0, 20.0], &[40.0, 30.0, 30.0]);
    assert_eq!(t.dof, 2);
    assert!((t.p_value - (-g / 2.0).exp()).abs() < 1e-10);
}

#[test]
fn ks_rejection_rate_under_the_null() {
    let mut r = rng(5);
    let trials = 1000;
    let rejected = (0..trials)
        .filter(|_| {
            let a = normals(&mut r, 500);
            let b = normals(&mut r, 500);
            ks_test_one_sided(&a, &b).unwrap() < 0.05
        })
        .count();
    let rate = rejected as f64 / trials as f64;
    assert!((0.03..=0.07).contains(&rate), "rejection rate {rate}");
}

#[test]
fn ks_full_separation() {
    let b: Vec<f64> = (0..100).map(|i| i as f64).collect();
    let a: Vec<f64> = b.iter().map(|v| v - 1000.0).collect();
    // D+ = 1, so p = exp(-2 nm / (n + m)) = exp(-100).
    let p = ks_test_one_sided(&a, &b).unwrap();
    assert!((p - (-100.0f64).exp()).abs() < 1e-50);
    assert_eq!(ks_test_one_sided(&b, &a).unwrap(), 1.0);
    assert_eq!(ks_test(&a, &b).unwrap().statistic, 1.0);
}

#[test]
fn uniform_cdf_values_have_small_ece() {
    let mut r = rng(6);
    let u: Vec<f64> = (0..100_000).map(|_| r.random::<f64>()).collect();
    assert!(ece(&u, 10).unwrap() < 1e-3);
}

fn pit_distance(dist: &PredictiveDistribution, seed: u64) -> f64 {
    let draw = dist.sample(&mut rng(seed)).unwrap();
    ks_distance_from_uniform(dist.cdf(&draw).unwrap().data())
}

fn random_columns(seed: u64, n: usize) -> (Tensor, Tensor) {
    let mut r = rng(seed);
    let m: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
    let v: Vec<f64> = (0..n).map(|_| r.random_range(0.1..4.0)).collect();
    (Tensor::column(&m), Tensor::column(&v))
}

#[test]
fn sampling_is_calibrated_under_its_own_cdf() {
    let n = 100_000;
    let (m, v) = random_columns(7, n);
    let normal = PredictiveDistribution::normal(m.clone(), v.clone()).unwrap();
    assert!(pit_distance(&normal, 1) < 0.01);

    let dof = Tensor::column(&vec![4.5; n]);
    let student = PredictiveDistribution::student(m.clone(), v.clone(), dof).unwrap();
    assert!(pit_distance(&student, 2) < 0.01);

    let (m2, v2) = random_columns(8, n);
    let mixture = PredictiveDistribution::mixture(vec![
        normal,
        PredictiveDistribution::normal(m2, v2).unwrap(),
    ])
    .unwrap();
    assert!(pit_distance(&mixture, 3) < 0.01);
}

#[test]
fn mixture_moments_match_sampling() {
    let n = 1_000_000;
    let comp = |mu: f64, var: f64| {
        PredictiveDistribution::normal(Tensor::column(&vec![mu; n]), Tensor::column(&vec![var; n])).unwrap()
    };
    let mix = PredictiveDistribution::mixture(vec![comp(-1.0, 0.5), comp(0.5, 2.0), comp(3.0, 0.2)]).unwrap();
    let (mean, var) = mix.moments();
    let draws = mix.sample(&mut rng(9)).unwrap().into_data();
    let m = draws.iter().sum::<f64>() / n as f64;
    let c2 = draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / n as f64;
    let c4 = draws.iter().map(|d| (d - m).powi(4)).sum::<f64>() / n as f64;
    let se_mean = (c2 / n as f64).sqrt();
    let se_var = ((c4 - c2 * c2) / n as f64).sqrt();
    assert!((mean.data()[0] - m).abs() < 3.0 * se_mean);
    assert!((var.data()[0] - c2).abs() < 3.0 * se_var);
}

#[test]
fn mixture_log_density_matches_direct_sum() {
    let comps = [(0.3, 1.2), (-0.7, 0.4), (1.5, 2.5)];
    let ys = [-1.0, 0.0, 0.4, 2.2];
    let n = ys.len();
    let mix = PredictiveDistribution::mixture(
        comps
            .iter()
            .map(|&(m, v)| PredictiveDistribution::normal(Tensor::column(&vec![m; n]), Tensor::column(&vec![v; n])).unwrap())
            .collect(),
    )
    .unwrap();
    let got = mix.log_density(&Tensor::column(&ys)).unwrap();
    for (i, &y) in ys.iter().enumerate() {
        let dens: f64 = comps
            .iter()
            .map(|&(m, v)| (-(y - m) * (y - m) / (2.0 * v)).exp() / (2.0 * PI * v).sqrt())
            .sum::<f64>()
            / comps.len() as f64;
        assert!((got[i] - dens.ln()).abs() < 1e-12);
    }
    let want_mean = got.iter().sum::<f64>() / n as f64;
    assert!((mean_ll(&mix, &Tensor::column(&ys)).unwrap() - want_mean).abs() < 1e-12);
}

#[test]
fn rmse_matches_two_pass_oracle() {
    let mut r = rng(10);
    let (n, q) = (257, 3);
    let a: Vec<f64> = (0..n * q).map(|_| r.random_range(-5.0..5.0)).collect();
    let b: Vec<f64> = (0..n * q).map(|_| r.random_range(-5.0..5.0)).collect();
    let sq: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).collect();
    let mean = sq.iter().sum::<f64>() / sq.len() as f64;
    let want = mean.sqrt();
    let got = rmse(&Tensor::matrix(n, q, a).unwrap(), &Tensor::matrix(n, q, b).unwrap()).unwrap();
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn sine_residual_spread_follows_the_noise_law() {
    let truth = SineTruth { noise: NoiseParam::StdDev };
    let mut resid = Vec::new();
    for seed in 0..200 {
        let (ds, _) = generate_sine_dataset(seed, NoiseParam::StdDev);
        for i in 0..ds.len() {
            let x = ds.x.data()[i];
            if (x - 5.0).abs() < 0.1 {
                resid.push((ds.y.data()[i] - truth.mean(x)) / truth.noise_std(x));
            }
        }
    }
    let sd = (resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64).sqrt();
    assert!(resid.len() > 1000);
    assert!((sd - 1.0).abs() < 0.05, "standardized spread {sd}");
    assert!((truth.noise_std(5.0) - 2.6).abs() < 1e-12);
}

#[test]
fn decomposition_noise_variance_per_x() {
    let xs = [3.0, 5.0, 7.0];
    let law = |x: f64| 0.1 + (0.5 * x).abs();
    let reps = 10_000;
    let mut sums = [0.0; 3];
    let mut hits = [0usize; 3];
    for seed in 0..reps {
        // A degenerate range pins every covariate to the probe point.
        for (k, &x0) in xs.iter().enumerate() {
            let (c, n) = generate_decomposition_pair(seed, 1, (x0, x0 + 1e-12), |x| x.sin(), law).unwrap();
            let d = n.y.data()[0] - c.y.data()[0];
            sums[k] += d * d;
            hits[k] += 1;
        }
    }
    for k in 0..3 {
        let var = sums[k] / hits[k] as f64;
        let want = law(xs[k]).powi(2);
        assert!((var / want - 1.0).abs() < 0.05, "x = {}: {var} vs {want}", xs[k]);
    }
    let (c, n) = generate_decomposition_pair(1, 50, SINE_RANGE, |x| x, law).unwrap();
    assert!(c.x.bitwise_eq(&n.x));
}

#[test]
fn csv_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let mut r = rng(12);
    let x: Vec<f64> = (0..40).map(|_| r.random::<f64>() * 1e3 - 500.0).collect();
    let y: Vec<f64> = (0..20).map(|_| StandardNormal.sample(&mut r)).collect();
    let mut ds = Dataset::new(Tensor::matrix(20, 2, x).unwrap(), Tensor::column(&y), "test").unwrap();
    ds.groups = Some((0..20).map(|i| i / 4).collect());
    write_csv_dataset(&path, &ds, "group").unwrap();
    let back = load_csv_dataset(&path, &["y0".to_string()], Some("group")).unwrap();
    assert!(back.x.bitwise_eq(&ds.x));
    assert!(back.y.bitwise_eq(&ds.y));
    assert_eq!(back.groups, ds.groups);
    assert!(load_csv_dataset(&path, &["missing".to_string()], None).is_err());
}

#[test]
fn standardization_inverts() {
    let mut r = rng(13);
    let y: Vec<f64> = (0..100).map(|_| { let z: f64 = StandardNormal.sample(&mut r); 7.0 + 3.0 * z }).collect();
    let x: Vec<f64> = (0..100).map(|_| r.random::<f64>()).collect();
    let ds = Dataset::new(Tensor::column(&x), Tensor::column(&y), "t").unwrap();
    let (scaled, s) = standardize(&ds, &ds, true).unwrap();
    let back = s.invert(&scaled);
    for (a, b) in back.y.data().iter().zip(&y) {
        assert!((a - b).abs() < 1e-12);
    }
    let (again, _) = standardize(&scaled, &scaled, true).unwrap();
    for (a, b) in again.y.data().iter().zip(scaled.y.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}
