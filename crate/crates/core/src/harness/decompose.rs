use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ModelKind};
use super::convergence::{raw_moments, VARIANCE_INTERVAL};
use super::report::{Curve, ExperimentReport};
use super::{fit, grid, mean_relative_error};
use crate::data::{generate_decomposition_pair, Dataset, SineTruth, Standardizer, SINE_RANGE};
use crate::error::Result;

/// Noise variance recovered as the gap between a model trained on noisy
/// targets and one trained on their conditional means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecovery {
    pub seed: u64,
    /// Mean relative error of `var_noisy - var_clean` against the true noise variance on `[3, 7]`.
    pub mean_relative_error: f64,
    /// Grid points where the clean model's variance exceeds the noisy model's
    /// by more than 5% of the true noise variance.
    pub clean_exceeds_noisy: usize,
    /// Largest `|var_noisy - var_clean|` when the noise law is zero, in
    /// standardized target units.
    pub control_max_abs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DecompositionSection {
    pub model: String,
    pub interval: (f64, f64),
    pub runs: Vec<NoiseRecovery>,
}

/// Raw-unit predictive variance at `x` of a faithful model trained on `ds`
/// after scaling by `scaler`.
fn variance_on(cfg: &ExperimentConfig, seed: u64, ds: &Dataset, scaler: &Standardizer, x: &[f64]) -> Result<Vec<f64>> {
    let ds = scaler.apply(ds);
    let mut schedule = cfg.schedule(seed);
    schedule.early_stop = crate::optim::EarlyStop::None;
    schedule.patience = 0;
    schedule.restore_best = false;
    let fitted = fit(cfg, ModelKind::Faithful, seed, &ds.x, &ds.y, None, &schedule)?;
    Ok(raw_moments(&fitted, scaler, x)?.1)
}

/// Trains faithful models on clean and noisy sine-task targets from the same
/// seed and compares the variance gap with the true noise variance. A
/// zero-noise control runs alongside.
pub fn run_decompose(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let truth = SineTruth { noise: cfg.noise };
    let xs = grid(VARIANCE_INTERVAL.0, VARIANCE_INTERVAL.1, cfg.grid_points);
    let true_var: Vec<f64> = xs.iter().map(|&v| truth.noise_variance(v)).collect();
    let mut report = ExperimentReport::new(cfg);
    let mut section = DecompositionSection {
        model: ModelKind::Faithful.label(),
        interval: VARIANCE_INTERVAL,
        runs: Vec::new(),
    };
    for &seed in &cfg.seeds {
        let (clean, noisy) =
            generate_decomposition_pair(seed, cfg.points, SINE_RANGE, |v| truth.mean(v), |v| truth.noise_std(v))?;
        let (ctl_clean, ctl_noisy) = generate_decomposition_pair(seed, cfg.points, SINE_RANGE, |v| truth.mean(v), |_| 0.0)?;
        // Each pair shares the scaling of its noisy member so the variance gap stays in one unit.
        let scaler = Standardizer::fit(&noisy, cfg.standardize_features)?;
        let ctl_scaler = Standardizer::fit(&ctl_noisy, cfg.standardize_features)?;
        let sets = [(&clean, &scaler), (&noisy, &scaler), (&ctl_clean, &ctl_scaler), (&ctl_noisy, &ctl_scaler)];
        let vars: Vec<Vec<f64>> = {
            use rayon::prelude::*;
            sets.par_iter()
                .map(|(ds, sc)| variance_on(cfg, seed, ds, sc, &xs))
                .collect::<Result<_>>()?
        };
        let ctl_sd2 = ctl_scaler.y.scale[0] * ctl_scaler.y.scale[0];
        let recovered: Vec<f64> = vars[1].iter().zip(&vars[0]).map(|(n, c)| n - c).collect();
        let clean_exceeds_noisy = vars[0]
            .iter()
            .zip(&vars[1])
            .zip(&true_var)
            .filter(|((c, n), t)| **c > **n + 0.05 * **t)
            .count();
        let control_max_abs = vars[3]
            .iter()
            .zip(&vars[2])
            .map(|(n, c)| (n - c).abs() / ctl_sd2)
            .fold(0.0, f64::max);
        section.runs.push(NoiseRecovery {
            seed,
            mean_relative_error: mean_relative_error(&recovered, &true_var),
            clean_exceeds_noisy,
            control_max_abs,
        });
        report.curves.push(Curve {
            name: format!("decomposition_s{seed}"),
            columns: ["x", "true_noise_variance", "recovered", "clean_variance", "noisy_variance"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            rows: xs
                .iter()
                .enumerate()
                .map(|(i, &xi)| vec![xi, true_var[i], recovered[i], vars[0][i], vars[1][i]])
                .collect(),
            plot: vec![1, 2],
        });
    }
    report.decomposition = Some(section);
    Ok(report)
}
