//! Experiment orchestration: convergence runs, tabular cross-validation with
//! strike-outs and win/tie tallies, variance decomposition, faithfulness
//! verification and ensemble / dropout families.

pub mod config;
mod convergence;
mod decompose;
mod family;
pub mod report;
mod tabular;
mod verify;

pub use config::{parse_flat, Experiment, ExperimentConfig, Family, ModelKind, StandardizeMode};
pub use convergence::{run_convergence, ConvergenceModel, ConvergenceSection, IsolatedError};
pub use decompose::{run_decompose, DecompositionSection, NoiseRecovery};
pub use family::{run_family, FamilyModel, FamilySection};
pub use report::{adjudicate, emit_report, Curve, ExperimentReport, ResultRow, ScoreRecord, Tally, Wins};
pub use tabular::{dataset_folds, run_tabular, run_tabular_datasets, synthetic_tabular, synthetic_truth, SYNTHETIC_FEATURES};
pub use verify::{verify_faithfulness, Certificate, Divergence, SeedCertificate};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{PartitionedModel, PredictMode};
use crate::optim::{train, TrainSchedule, TrainedModel};
use crate::predictive::PredictiveDistribution;
use crate::seed;

/// Init seed of ensemble member `m`. Member 0 uses the base seed, so a
/// one-member ensemble is the single model.
pub fn member_seed(init_seed: u64, m: usize) -> u64 {
    if m == 0 {
        init_seed
    } else {
        seed::derive(init_seed, &[seed::tag::MEMBER, m as u64])
    }
}

/// Trained members of one roster model under one family.
#[derive(Debug, Clone)]
pub struct Fitted {
    pub kind: ModelKind,
    pub family: Family,
    pub members: Vec<TrainedModel>,
    /// Dropout mask seeds averaged at prediction time.
    pub mask_seeds: Vec<u64>,
    pub warnings: Vec<String>,
}

/// Builds the initial model of one member: the full network, or its mean-only
/// projection for the baseline.
pub fn initial_model(cfg: &ExperimentConfig, kind: ModelKind, input_dim: usize, output_dim: usize, seed: u64) -> Result<PartitionedModel> {
    let full = PartitionedModel::build(cfg.architecture(input_dim, output_dim), seed)?;
    Ok(if kind.is_baseline() {
        full.mean_only_projection()
    } else {
        full
    })
}

/// Trains `kind` on `(x, y)`. Ensemble members that fail are dropped with a
/// warning as long as one survives.
pub fn fit(
    cfg: &ExperimentConfig,
    kind: ModelKind,
    init_seed: u64,
    x: &Tensor,
    y: &Tensor,
    validation: Option<(&Tensor, &Tensor)>,
    schedule: &TrainSchedule,
) -> Result<Fitted> {
    let loss = kind.loss(cfg.family.likelihood())?;
    let count = if cfg.family == Family::DeepEnsemble { cfg.members } else { 1 };
    let mut members = Vec::with_capacity(count);
    let mut warnings = Vec::new();
    let mut last_err = None;
    for m in 0..count {
        let model = initial_model(cfg, kind, x.cols(), y.cols(), member_seed(init_seed, m))?;
        match train(model, loss, x, y, validation, schedule) {
            Ok(t) => members.push(t),
            Err(e) if count > 1 => {
                warnings.push(format!("member {m} failed: {e}"));
                last_err = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    if members.is_empty() {
        return Err(last_err.unwrap_or(Error::Empty("ensemble members")));
    }
    let mask_seeds = if cfg.family == Family::McDropout {
        (0..cfg.members)
            .map(|m| seed::derive(init_seed, &[seed::tag::MC_MASK, m as u64]))
            .collect()
    } else {
        Vec::new()
    };
    Ok(Fitted {
        kind,
        family: cfg.family,
        members,
        mask_seeds,
        warnings,
    })
}

impl Fitted {
    fn component(&self, model: &PartitionedModel, x: &Tensor, mode: PredictMode) -> Result<PredictiveDistribution> {
        let m = model.predict_moments(x, mode)?;
        if self.kind.is_baseline() {
            Ok(match self.family {
                Family::Student => PredictiveDistribution::unit_variance_student(m.mean),
                _ => PredictiveDistribution::unit_variance(m.mean),
            })
        } else {
            PredictiveDistribution::from_moments(&m)
        }
    }

    /// Predictive distribution at `x`.
    pub fn predictive(&self, x: &Tensor) -> Result<PredictiveDistribution> {
        match self.family {
            Family::DeepEnsemble => PredictiveDistribution::mixture(
                self.members
                    .iter()
                    .map(|t| self.component(&t.model, x, PredictMode::Deterministic))
                    .collect::<Result<_>>()?,
            ),
            Family::McDropout => {
                let model = &self.members[0].model;
                PredictiveDistribution::mixture(
                    self.mask_seeds
                        .iter()
                        .map(|&s| self.component(model, x, PredictMode::Dropout { mask_seed: s }))
                        .collect::<Result<_>>()?,
                )
            }
            Family::Normal | Family::Student => self.component(&self.members[0].model, x, PredictMode::Deterministic),
        }
    }

    /// The same members restored to their checkpoint at `epoch`.
    pub fn at_snapshot(&self, epoch: usize) -> Result<Fitted> {
        let members = self
            .members
            .iter()
            .map(|t| {
                let cp = t
                    .trace
                    .snapshots
                    .get(&epoch)
                    .ok_or_else(|| Error::InvalidArgument(format!("no snapshot at epoch {epoch}")))?;
                Ok(TrainedModel {
                    model: PartitionedModel::from_checkpoint(cp.clone())?,
                    trace: Default::default(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Fitted {
            members,
            warnings: Vec::new(),
            ..self.clone()
        })
    }
}

/// `count` evenly spaced points on `[lo, hi]`.
pub fn grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    (0..count)
        .map(|i| lo + (hi - lo) * i as f64 / (count - 1).max(1) as f64)
        .collect()
}

/// Mean of `|est - truth| / truth` over points with positive truth.
pub fn mean_relative_error(est: &[f64], truth: &[f64]) -> f64 {
    let pairs: Vec<f64> = est
        .iter()
        .zip(truth)
        .filter(|(_, t)| **t > 0.0)
        .map(|(e, t)| (e - t).abs() / t)
        .collect();
    pairs.iter().sum::<f64>() / pairs.len().max(1) as f64
}
