use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Family, ModelKind};
use super::report::{Curve, ExperimentReport, ScoreRecord};
use super::convergence::raw_moments;
use super::{fit, grid};
use crate::data::{generate_sine_dataset, Standardizer, SINE_ISOLATED};
use crate::error::Result;
use crate::metrics::ModelScore;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyModel {
    pub seed: u64,
    pub model: ModelKind,
    pub label: String,
    pub members: usize,
    /// Predictive variance at `x = 5` (inside the data) and `x = 10` (outside),
    /// in raw units.
    pub variance_at_5: f64,
    pub variance_at_10: f64,
    /// Isolated-point mean errors in standardized target units.
    pub error_at_0_5: f64,
    pub error_at_9_5: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FamilySection {
    pub family: Option<Family>,
    pub mixture_size: usize,
    pub models: Vec<FamilyModel>,
}

impl FamilySection {
    pub fn get(&self, seed: u64, model: ModelKind) -> Option<&FamilyModel> {
        self.models.iter().find(|m| m.seed == seed && m.model == model)
    }
}

type Outcome = (ScoreRecord, Option<FamilyModel>, Vec<Curve>);

fn run_one(cfg: &ExperimentConfig, seed: u64, kind: ModelKind) -> Outcome {
    let dataset = format!("sine(seed={seed})");
    let (train, truth) = generate_sine_dataset(seed, cfg.noise);
    let (test, _) = generate_sine_dataset(seed::derive(seed, &[seed::tag::DATA, 1]), cfg.noise);
    let mut schedule = cfg.schedule(seed);
    schedule.early_stop = crate::optim::EarlyStop::None;
    schedule.patience = 0;
    schedule.restore_best = false;
    let result = (|| -> Result<(ModelScore, FamilyModel, Curve)> {
        let scaler = Standardizer::fit(&train, cfg.standardize_features)?;
        let (train, test) = (scaler.apply(&train), scaler.apply(&test));
        let sd = scaler.y.scale[0];
        let fitted = fit(cfg, kind, seed, &train.x, &train.y, None, &schedule)?;
        let score = ModelScore::evaluate(&fitted.predictive(&test.x)?, &test.y, cfg.ece_bins)?;
        let (_, v) = raw_moments(&fitted, &scaler, &[5.0, 10.0])?;
        let (m, _) = raw_moments(&fitted, &scaler, &SINE_ISOLATED)?;
        let summary = FamilyModel {
            seed,
            model: kind,
            label: kind.label(),
            members: fitted.members.len(),
            variance_at_5: v[0],
            variance_at_10: v[1],
            error_at_0_5: (m[0] - truth.mean(SINE_ISOLATED[0])).abs() / sd,
            error_at_9_5: (m[1] - truth.mean(SINE_ISOLATED[1])).abs() / sd,
            warnings: fitted.warnings.clone(),
        };
        let xs = grid(0.0, 12.0, cfg.grid_points);
        let (gm, gv) = raw_moments(&fitted, &scaler, &xs)?;
        let curve = Curve {
            name: format!("family_{}_{}_s{seed}", cfg.family, kind.slug()),
            columns: ["x", "true_mean", "mean", "true_variance", "variance"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            rows: xs
                .iter()
                .enumerate()
                .map(|(i, &x)| vec![x, truth.mean(x), gm[i], truth.noise_variance(x), gv[i]])
                .collect(),
            plot: vec![3, 4],
        };
        Ok((score, summary, curve))
    })();
    match result {
        Ok((score, summary, curve)) => (
            ScoreRecord {
                dataset,
                model: kind,
                score: Some(score),
                error: None,
            },
            Some(summary),
            vec![curve],
        ),
        Err(e) => (
            ScoreRecord {
                dataset,
                model: kind,
                score: None,
                error: Some(e.to_string()),
            },
            None,
            Vec::new(),
        ),
    }
}

/// Trains each configured model as an ensemble or MC-dropout mixture on the
/// standardized sine task and scores the mixture on a fresh sample in
/// standardized target units.
pub fn run_family(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let jobs: Vec<(u64, ModelKind)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| cfg.models.iter().map(move |&m| (s, m)))
        .collect();
    let outcomes: Vec<Outcome> = jobs.par_iter().map(|&(s, m)| run_one(cfg, s, m)).collect();
    let mut report = ExperimentReport::new(cfg);
    let mut section = FamilySection {
        family: Some(cfg.family),
        mixture_size: cfg.mixture_size(),
        models: Vec::new(),
    };
    for (record, summary, curves) in outcomes {
        if let Some(e) = &record.error {
            report.warnings.push(format!("{} failed: {e}", record.model.label()));
        }
        if let Some(s) = summary {
            report.warnings.extend(s.warnings.iter().map(|w| format!("{}: {w}", s.label)));
            section.models.push(s);
        }
        report.scores.push(record);
        report.curves.extend(curves);
    }
    report.family = Some(section);
    report.adjudicate_scores()?;
    Ok(report)
}
