use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Family};
use super::member_seed;
use super::report::ExperimentReport;
use crate::data::generate_sine_dataset;
use crate::error::Result;
use crate::losses::LossSpec;
use crate::model::{Partition, PartitionedModel};
use crate::optim::{EarlyStop, TrainSession};

/// First point where the full model's shared parameters left its mean-only twin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub epoch: usize,
    pub partition: Partition,
    pub tensor: usize,
    pub max_ulp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedCertificate {
    pub seed: u64,
    pub member: usize,
    pub epochs_checked: usize,
    pub passed: bool,
    pub divergence: Option<Divergence>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub loss: String,
    pub family: Family,
    pub epochs: usize,
    pub passed: bool,
    pub runs: Vec<SeedCertificate>,
}

/// Compares trunk and mean-head tensors; returns the first differing one.
pub fn compare_shared(epoch: usize, a: &PartitionedModel, b: &PartitionedModel) -> Option<Divergence> {
    for p in [Partition::Trunk, Partition::Mean] {
        for (i, (x, y)) in a.params(p).iter().zip(b.params(p)).enumerate() {
            if !x.bitwise_eq(y) {
                return Some(Divergence {
                    epoch,
                    partition: p,
                    tensor: i,
                    max_ulp: x.max_ulp_distance(y),
                });
            }
        }
    }
    None
}

fn check(cfg: &ExperimentConfig, loss: LossSpec, seed: u64, member: usize) -> Result<SeedCertificate> {
    let (ds, _) = generate_sine_dataset(seed, cfg.noise);
    let full = PartitionedModel::build(cfg.architecture(1, 1), member_seed(seed, member))?;
    let twin = full.mean_only_projection();
    let mut schedule = cfg.schedule(seed);
    schedule.early_stop = EarlyStop::None;
    schedule.patience = 0;
    schedule.restore_best = false;
    let mut a = TrainSession::new(full, loss, ds.x.clone(), ds.y.clone(), None, schedule.clone())?;
    let mut b = TrainSession::new(twin, LossSpec::Sse, ds.x, ds.y, None, schedule)?;
    let mut divergence = compare_shared(0, a.model(), b.model());
    while divergence.is_none() && !a.is_finished() {
        a.step_epoch()?;
        b.step_epoch()?;
        divergence = compare_shared(a.epoch(), a.model(), b.model());
    }
    Ok(SeedCertificate {
        seed,
        member,
        epochs_checked: a.epoch(),
        passed: divergence.is_none(),
        divergence,
    })
}

/// Trains the full model under the configured loss and its mean-only twin
/// under squared error in lockstep, requiring bitwise-equal trunk and mean
/// parameters after every epoch.
pub fn verify_faithfulness(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let loss = cfg.verify_loss.loss(cfg.family.likelihood())?;
    let members = if cfg.family == Family::DeepEnsemble { cfg.members } else { 1 };
    let jobs: Vec<(u64, usize)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| (0..members).map(move |m| (s, m)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(s, m)| check(cfg, loss, s, m))
        .collect::<Result<Vec<_>>>()?;
    let mut report = ExperimentReport::new(cfg);
    report.certificate = Some(Certificate {
        loss: loss.to_string(),
        family: cfg.family,
        epochs: cfg.epochs,
        passed: runs.iter().all(|r| r.passed),
        runs,
    });
    Ok(report)
}
