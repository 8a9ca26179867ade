use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ModelKind};
use super::report::{Curve, ExperimentReport};
use super::{fit, grid, mean_relative_error, Fitted};
use crate::autodiff::Tensor;
use crate::data::{generate_sine_dataset, SineTruth, Standardizer, SINE_ISOLATED};
use crate::error::Result;

/// Interval on which variance recovery is scored.
pub const VARIANCE_INTERVAL: (f64, f64) = (3.0, 7.0);
const PLOT_RANGE: (f64, f64) = (0.0, 10.0);

/// Absolute mean error at the two isolated points, in standardized target units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsolatedError {
    pub epoch: usize,
    pub at_0_5: f64,
    pub at_9_5: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceModel {
    pub seed: u64,
    pub model: ModelKind,
    pub label: String,
    pub snapshots: Vec<IsolatedError>,
    pub final_error: Option<IsolatedError>,
    /// Mean relative error of the predicted variance against the true noise
    /// variance on `[3, 7]`; absent for the fixed-variance baseline.
    pub variance_rel_error: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSection {
    pub models: Vec<ConvergenceModel>,
}

impl ConvergenceSection {
    pub fn get(&self, seed: u64, model: ModelKind) -> Option<&ConvergenceModel> {
        self.models.iter().find(|m| m.seed == seed && m.model == model)
    }
}

/// Predictive mean and variance at raw `x`, mapped back to raw target units.
pub(crate) fn raw_moments(f: &Fitted, scaler: &Standardizer, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (m, v) = f.predictive(&scaler.x.apply(&Tensor::column(x)))?.moments();
    Ok((scaler.y.invert(&m).into_data(), scaler.y.invert_variance(&v).into_data()))
}

fn isolated_error(f: &Fitted, scaler: &Standardizer, truth: &SineTruth, epoch: usize) -> Result<IsolatedError> {
    let (mean, _) = raw_moments(f, scaler, &SINE_ISOLATED)?;
    let sd = scaler.y.scale[0];
    Ok(IsolatedError {
        epoch,
        at_0_5: (mean[0] - truth.mean(SINE_ISOLATED[0])).abs() / sd,
        at_9_5: (mean[1] - truth.mean(SINE_ISOLATED[1])).abs() / sd,
    })
}

fn snapshot_epochs(epochs: usize, every: usize) -> Vec<usize> {
    let mut v: Vec<usize> = if every == 0 {
        Vec::new()
    } else {
        (0..=epochs).step_by(every).collect()
    };
    if v.last() != Some(&epochs) {
        v.push(epochs);
    }
    v
}

struct Outcome {
    summary: ConvergenceModel,
    curves: Vec<Curve>,
}

fn run_one(cfg: &ExperimentConfig, seed: u64, kind: ModelKind) -> Outcome {
    let (ds, truth) = generate_sine_dataset(seed, cfg.noise);
    let mut schedule = cfg.schedule(seed);
    schedule.early_stop = crate::optim::EarlyStop::None;
    schedule.patience = 0;
    schedule.restore_best = false;
    schedule.snapshot_epochs = snapshot_epochs(cfg.epochs, cfg.snapshot_every);

    let mut summary = ConvergenceModel {
        seed,
        model: kind,
        label: kind.label(),
        snapshots: Vec::new(),
        final_error: None,
        variance_rel_error: None,
        error: None,
    };
    let result = (|| -> Result<Vec<Curve>> {
        let scaler = Standardizer::fit(&ds, cfg.standardize_features)?;
        let scaled = scaler.apply(&ds);
        let fitted = fit(cfg, kind, seed, &scaled.x, &scaled.y, None, &schedule)?;
        let xs = grid(PLOT_RANGE.0, PLOT_RANGE.1, cfg.grid_points);
        let mut long = Vec::new();
        for &e in &schedule.snapshot_epochs {
            let snap = fitted.at_snapshot(e)?;
            summary.snapshots.push(isolated_error(&snap, &scaler, &truth, e)?);
            let (m, v) = raw_moments(&snap, &scaler, &xs)?;
            for (i, &xi) in xs.iter().enumerate() {
                long.push(vec![e as f64, xi, m[i], v[i]]);
            }
        }
        summary.final_error = Some(isolated_error(&fitted, &scaler, &truth, cfg.epochs)?);

        let (m, v) = raw_moments(&fitted, &scaler, &xs)?;
        let rows: Vec<Vec<f64>> = xs
            .iter()
            .enumerate()
            .map(|(i, &xi)| vec![xi, truth.mean(xi), m[i], truth.noise_variance(xi), v[i]])
            .collect();

        if !kind.is_baseline() {
            let inner = grid(VARIANCE_INTERVAL.0, VARIANCE_INTERVAL.1, cfg.grid_points);
            let (_, v) = raw_moments(&fitted, &scaler, &inner)?;
            let t: Vec<f64> = inner.iter().map(|&x| truth.noise_variance(x)).collect();
            summary.variance_rel_error = Some(mean_relative_error(&v, &t));
        }

        let tag = format!("convergence_{}_s{seed}", kind.slug());
        let columns = |names: &[&str]| names.iter().map(|s| s.to_string()).collect();
        Ok(vec![
            Curve {
                name: format!("{tag}_mean"),
                columns: columns(&["x", "true_mean", "mean", "true_variance", "variance"]),
                rows: rows.clone(),
                plot: vec![1, 2],
            },
            Curve {
                name: format!("{tag}_variance"),
                columns: columns(&["x", "true_mean", "mean", "true_variance", "variance"]),
                rows,
                plot: vec![3, 4],
            },
            Curve {
                name: format!("{tag}_snapshots"),
                columns: columns(&["epoch", "x", "mean", "variance"]),
                rows: long,
                plot: Vec::new(),
            },
        ])
    })();
    match result {
        Ok(curves) => Outcome { summary, curves },
        Err(e) => {
            summary.error = Some(e.to_string());
            Outcome {
                summary,
                curves: Vec::new(),
            }
        }
    }
}

/// Trains every configured model on the sine task with standardized targets (full batch)
/// and tracks convergence at the isolated points. Curves are in raw units.
pub fn run_convergence(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let jobs: Vec<(u64, ModelKind)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| cfg.models.iter().map(move |&m| (s, m)))
        .collect();
    let outcomes: Vec<Outcome> = jobs.par_iter().map(|&(s, m)| run_one(cfg, s, m)).collect();
    let mut report = ExperimentReport::new(cfg);
    let mut section = ConvergenceSection::default();
    for o in outcomes {
        if let Some(e) = &o.summary.error {
            report
                .warnings
                .push(format!("{} (seed {}) failed: {e}", o.summary.label, o.summary.seed));
        }
        section.models.push(o.summary);
        report.curves.extend(o.curves);
    }
    report.convergence = Some(section);
    Ok(report)
}
