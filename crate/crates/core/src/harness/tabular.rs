use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::config::{ExperimentConfig, ModelKind, StandardizeMode};
use super::fit;
use super::report::{ExperimentReport, ScoreRecord};
use crate::autodiff::Tensor;
use crate::data::{kfold_split, load_csv_dataset, Dataset, FoldPlan, Standardizer};
use crate::error::Result;
use crate::metrics::ModelScore;
use crate::seed;

/// Number of covariates in [`synthetic_tabular`].
pub const SYNTHETIC_FEATURES: usize = 5;

/// Mean and noise standard deviation of [`synthetic_tabular`] at `x`.
pub fn synthetic_truth(x: &[f64]) -> (f64, f64) {
    let mean = (3.0 * x[0]).sin() + x[1] * x[2] + 0.5 * x[3] + x[4] * x[4];
    let std = 0.05 + 0.6 * x[0].abs();
    (mean, std)
}

/// `n` rows with five `U(-1, 1)` covariates, a nonlinear mean and noise whose
/// scale grows with `|x0|`. The noise driver also drives the mean.
pub fn synthetic_tabular(seed: u64, n: usize) -> Dataset {
    let mut rng = seed::rng(seed, &[seed::tag::DATA]);
    let mut xs = Vec::with_capacity(n * SYNTHETIC_FEATURES);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = (0..SYNTHETIC_FEATURES).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (m, s) = synthetic_truth(&row);
        let z: f64 = StandardNormal.sample(&mut rng);
        ys.push(m + s * z);
        xs.extend(row);
    }
    let x = Tensor::matrix(n, SYNTHETIC_FEATURES, xs).expect("shape by construction");
    Dataset::new(x, Tensor::column(&ys), format!("synthetic-tabular(seed={seed}, n={n})")).expect("finite by construction")
}

/// Folds over rows, or over replicate groups when the dataset carries them so
/// that no group straddles a train/test split.
pub fn dataset_folds(ds: &Dataset, k: usize, seed: u64) -> Result<FoldPlan> {
    let Some(groups) = &ds.groups else {
        return kfold_split(ds.len(), k, seed);
    };
    let mut ids: BTreeMap<u64, usize> = BTreeMap::new();
    for &g in groups {
        let next = ids.len();
        ids.entry(g).or_insert(next);
    }
    let by_group = kfold_split(ids.len(), k, seed)?;
    Ok(FoldPlan {
        k,
        seed,
        assignment: groups.iter().map(|g| by_group.assignment[ids[g]]).collect(),
    })
}

struct Prepared {
    train: Dataset,
    test: Dataset,
}

fn prepare(cfg: &ExperimentConfig, ds: &Dataset, plan: &FoldPlan, fold: usize) -> Result<Prepared> {
    let train = ds.subset(&plan.train_rows(fold));
    let test = ds.subset(&plan.test_rows(fold));
    let scaler = match cfg.standardize {
        StandardizeMode::Fold => Standardizer::fit(&train, cfg.standardize_features)?,
        StandardizeMode::Global => Standardizer::fit(ds, cfg.standardize_features)?,
    };
    Ok(Prepared {
        train: scaler.apply(&train),
        test: scaler.apply(&test),
    })
}

fn score_fold(cfg: &ExperimentConfig, kind: ModelKind, init_seed: u64, p: &Prepared) -> Result<ModelScore> {
    let schedule = cfg.schedule(init_seed);
    let validation = (cfg.patience > 0).then_some((&p.test.x, &p.test.y));
    let fitted = fit(cfg, kind, init_seed, &p.train.x, &p.train.y, validation, &schedule)?;
    ModelScore::evaluate(&fitted.predictive(&p.test.x)?, &p.test.y, cfg.ece_bins)
}

/// Cross-validates every configured model on `datasets` (name, data) and
/// adjudicates strikes, wins and ties on the pooled held-out predictions.
///
/// All models share the fold plan of each seed and the initial parameters of
/// each fold. Scores are in standardized target units.
pub fn run_tabular_datasets(cfg: &ExperimentConfig, datasets: &[(String, Dataset)]) -> Result<ExperimentReport> {
    cfg.validate_protocol()?;
    let mut report = ExperimentReport::new(cfg);
    for (name, ds) in datasets {
        ds.validate()?;
        for &s in &cfg.seeds {
            let dataset = if cfg.seeds.len() > 1 {
                format!("{name}#seed{s}")
            } else {
                name.clone()
            };
            let plan = dataset_folds(ds, cfg.folds, s)?;
            let folds: Vec<Prepared> = (0..cfg.folds).map(|f| prepare(cfg, ds, &plan, f)).collect::<Result<_>>()?;
            let jobs: Vec<(usize, ModelKind)> = cfg
                .models
                .iter()
                .flat_map(|&m| (0..cfg.folds).map(move |f| (f, m)))
                .collect();
            let parts: Vec<Result<ModelScore>> = jobs
                .par_iter()
                .map(|&(f, m)| score_fold(cfg, m, seed::derive(s, &[seed::tag::FOLD_INIT, f as u64]), &folds[f]))
                .collect();
            for (i, &kind) in cfg.models.iter().enumerate() {
                let mine = &parts[i * cfg.folds..(i + 1) * cfg.folds];
                let pooled = mine
                    .iter()
                    .enumerate()
                    .map(|(f, r)| r.as_ref().map_err(|e| format!("fold {f}: {e}")).cloned())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .and_then(|v| ModelScore::pool(&v).map_err(|e| e.to_string()));
                let record = match pooled {
                    Ok(score) => ScoreRecord {
                        dataset: dataset.clone(),
                        model: kind,
                        score: Some(score),
                        error: None,
                    },
                    Err(e) => {
                        report.warnings.push(format!("{dataset}: {} failed: {e}", kind.label()));
                        ScoreRecord {
                            dataset: dataset.clone(),
                            model: kind,
                            score: None,
                            error: Some(e),
                        }
                    }
                };
                report.scores.push(record);
            }
        }
    }
    report.adjudicate_scores()?;
    Ok(report)
}

/// Loads every configured CSV and runs [`run_tabular_datasets`].
pub fn run_tabular(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let datasets = cfg
        .data
        .iter()
        .map(|p| {
            let ds = load_csv_dataset(p, &cfg.targets, cfg.group_column.as_deref())?;
            let name = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
            Ok((name, ds))
        })
        .collect::<Result<Vec<_>>>()?;
    run_tabular_datasets(cfg, &datasets)
}
