//! Adam and the epoch loop.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::losses::{LossSpec, Objective, ParamGrads};
use crate::model::{Checkpoint, ParamStore, Partition, PartitionedModel, PredictMode};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !(self.lr > 0.0 && self.lr.is_finite()) || !unit(self.beta1) || !unit(self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam hyperparameters {self:?}")));
        }
        Ok(())
    }
}

/// First and second moments for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: BTreeMap<(Partition, usize), Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Moments restricted to the given partitions, for comparing optimizer states.
    pub fn partition_moments(&self, partitions: &[Partition]) -> Vec<(&(Partition, usize), &Moments)> {
        self.moments.iter().filter(|(k, _)| partitions.contains(&k.0)).collect()
    }
}

/// One Adam update with bias correction. Parameters whose gradient is `None`
/// are left untouched, moments included.
pub fn adam_step(model: &mut PartitionedModel, grads: &ParamGrads, state: &mut AdamState) -> Result<()> {
    for (p, gs) in grads {
        let params = model.params(*p);
        if gs.len() != params.len() {
            return Err(Error::InvalidArgument(format!("gradient layout for {p} does not match the model")));
        }
        for (param, g) in params.iter().zip(gs) {
            if let Some(g) = g {
                if g.shape() != param.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "adam",
                        lhs: param.shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
            }
        }
    }

    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = i32::try_from(state.step).map_err(|_| Error::InvalidArgument("step counter overflow".into()))?;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);

    let store = model.store_mut();
    for (p, gs) in grads {
        let params = store.get_mut(p).expect("checked above");
        for (i, (param, g)) in params.iter_mut().zip(gs).enumerate() {
            let Some(g) = g else { continue };
            let mom = state.moments.entry((*p, i)).or_insert_with(|| Moments {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
            });
            let w = Arc::make_mut(param);
            for (((w, &g), m), v) in w
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(mom.m.data_mut())
                .zip(mom.v.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EarlyStop {
    None,
    ValidationRmse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    /// `0` trains on the full batch.
    pub batch_size: usize,
    pub early_stop: EarlyStop,
    pub patience: usize,
    pub restore_best: bool,
    pub seed: u64,
    /// Epochs after whose update a checkpoint is kept; `0` is the initial state.
    pub snapshot_epochs: Vec<usize>,
    pub adam: AdamConfig,
}

impl TrainSchedule {
    pub fn full_batch(epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size: 0,
            early_stop: EarlyStop::None,
            patience: 0,
            restore_best: false,
            seed,
            snapshot_epochs: Vec::new(),
            adam: AdamConfig::default(),
        }
    }

    pub fn with_early_stopping(mut self, patience: usize) -> Self {
        self.early_stop = EarlyStop::ValidationRmse;
        self.patience = patience;
        self.restore_best = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.patience > self.epochs {
            return Err(Error::Config(format!(
                "patience {} exceeds epoch budget {}",
                self.patience, self.epochs
            )));
        }
        if self.early_stop == EarlyStop::ValidationRmse && self.patience == 0 {
            return Err(Error::Config("early stopping needs positive patience".into()));
        }
        self.adam.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Loss summed over batches and divided by the number of training rows.
    pub train_loss: f64,
    pub val_rmse: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub records: Vec<EpochRecord>,
    pub snapshots: BTreeMap<usize, Checkpoint>,
    pub best_epoch: Option<usize>,
    pub stopped_at: Option<usize>,
}

impl Trace {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["epoch", "train_loss", "val_rmse"]).map_err(csv_err)?;
        for r in &self.records {
            let val = r.val_rmse.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([r.epoch.to_string(), r.train_loss.to_string(), val])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Root mean squared error over every element.
pub fn rmse(pred: &Tensor, target: &Tensor) -> f64 {
    let n = pred.len().max(1) as f64;
    let sse: f64 = pred.data().iter().zip(target.data()).map(|(p, y)| (p - y) * (p - y)).sum();
    (sse / n).sqrt()
}

/// A training run that can be advanced one epoch at a time.
#[derive(Debug, Clone)]
pub struct TrainSession {
    model: PartitionedModel,
    loss: LossSpec,
    schedule: TrainSchedule,
    adam: AdamState,
    x: Tensor,
    y: Tensor,
    validation: Option<(Tensor, Tensor)>,
    objectives: BTreeMap<usize, Objective>,
    epoch: usize,
    trace: Trace,
    best: Option<(f64, usize, ParamStore)>,
    finished: bool,
}

impl TrainSession {
    pub fn new(
        model: PartitionedModel,
        loss: LossSpec,
        x: Tensor,
        y: Tensor,
        validation: Option<(Tensor, Tensor)>,
        schedule: TrainSchedule,
    ) -> Result<Self> {
        schedule.validate()?;
        loss.check_compatible(&model)?;
        if x.rows() == 0 {
            return Err(Error::Empty("training set"));
        }
        if x.rows() != y.rows() {
            return Err(Error::InvalidArgument(format!(
                "{} feature rows but {} target rows",
                x.rows(),
                y.rows()
            )));
        }
        if schedule.early_stop == EarlyStop::ValidationRmse && validation.as_ref().is_none_or(|(v, _)| v.rows() == 0) {
            return Err(Error::Config("early stopping needs a nonempty validation set".into()));
        }
        let mut trace = Trace::default();
        if schedule.snapshot_epochs.contains(&0) {
            trace.snapshots.insert(0, model.to_checkpoint());
        }
        Ok(Self {
            adam: AdamState::new(schedule.adam),
            model,
            loss,
            schedule,
            x,
            y,
            validation,
            objectives: BTreeMap::new(),
            epoch: 0,
            trace,
            best: None,
            finished: false,
        })
    }

    pub fn model(&self) -> &PartitionedModel {
        &self.model
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn is_finished(&self) -> bool {
        self.finished || self.epoch >= self.schedule.epochs
    }

    fn batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let n = self.x.rows();
        let size = self.schedule.batch_size;
        if size == 0 || size >= n {
            return vec![(0..n).collect()];
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = seed::rng(self.schedule.seed, &[seed::tag::SHUFFLE, epoch as u64]);
        order.shuffle(&mut rng);
        order.chunks(size).map(|c| c.to_vec()).collect()
    }

    /// Runs one epoch of updates and returns its record.
    pub fn step_epoch(&mut self) -> Result<EpochRecord> {
        if self.is_finished() {
            return Err(Error::InvalidArgument("training already finished".into()));
        }
        let epoch = self.epoch + 1;
        let dropout = self.model.spec().dropout_rate > 0.0;
        let full = self.schedule.batch_size == 0 || self.schedule.batch_size >= self.x.rows();
        let mut total = 0.0;
        for (b, rows) in self.batches(epoch).into_iter().enumerate() {
            let (xb, yb) = if full {
                (self.x.clone(), self.y.clone())
            } else {
                (self.x.select_rows(&rows), self.y.select_rows(&rows))
            };
            let masks = if dropout {
                let mask_seed = seed::derive(self.schedule.seed, &[seed::tag::DROPOUT, epoch as u64, b as u64]);
                self.model.dropout_masks(rows.len(), mask_seed)
            } else {
                Vec::new()
            };
            let objective = match self.objectives.entry(rows.len()) {
                std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
                std::collections::btree_map::Entry::Vacant(e) => {
                    e.insert(Objective::build(&self.model, rows.len(), self.loss, dropout)?)
                }
            };
            let value = objective
                .evaluate(&self.model, &xb, &yb, &masks)
                .map_err(|e| Error::Divergence {
                    epoch,
                    detail: e.to_string(),
                })?;
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("loss is {value}"),
                });
            }
            total += value;
            let grads = objective.param_gradients()?;
            adam_step(&mut self.model, &grads, &mut self.adam)?;
        }
        self.epoch = epoch;

        let val_rmse = match &self.validation {
            Some((vx, vy)) if vx.rows() > 0 => {
                let pred = self.model.predict_moments(vx, PredictMode::Deterministic)?;
                Some(rmse(&pred.mean, vy))
            }
            _ => None,
        };
        let record = EpochRecord {
            epoch,
            train_loss: total / self.x.rows() as f64,
            val_rmse,
        };
        self.trace.records.push(record);
        if self.schedule.snapshot_epochs.contains(&epoch) {
            self.trace.snapshots.insert(epoch, self.model.to_checkpoint());
        }

        if self.schedule.early_stop == EarlyStop::ValidationRmse {
            if let Some(v) = val_rmse {
                let improved = self.best.as_ref().is_none_or(|(best, _, _)| v < *best);
                if improved {
                    self.best = Some((v, epoch, self.model.store().clone()));
                    self.trace.best_epoch = Some(epoch);
                } else if let Some((_, best_epoch, _)) = &self.best {
                    if epoch - best_epoch >= self.schedule.patience {
                        self.finished = true;
                        self.trace.stopped_at = Some(epoch);
                    }
                }
            }
        }
        Ok(record)
    }

    /// Finishes the run, restoring the best-validation parameters when configured.
    pub fn finish(mut self) -> Result<TrainedModel> {
        if self.schedule.restore_best {
            if let Some((_, _, store)) = self.best.take() {
                self.model.set_store(store)?;
            }
        }
        Ok(TrainedModel {
            model: self.model,
            trace: self.trace,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: PartitionedModel,
    pub trace: Trace,
}

/// Trains to completion or early stop.
pub fn train(
    model: PartitionedModel,
    loss: LossSpec,
    x: &Tensor,
    y: &Tensor,
    validation: Option<(&Tensor, &Tensor)>,
    schedule: &TrainSchedule,
) -> Result<TrainedModel> {
    let mut session = TrainSession::new(
        model,
        loss,
        x.clone(),
        y.clone(),
        validation.map(|(a, b)| (a.clone(), b.clone())),
        schedule.clone(),
    )?;
    while !session.is_finished() {
        session.step_epoch()?;
    }
    session.finish()
}
