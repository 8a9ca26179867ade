//! Experiment configuration and its flat `key = value` file format.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are comma
//! separated. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::NoiseParam;
use crate::error::{Error, Result};
use crate::losses::{Likelihood, LossSpec};
use crate::metrics::DEFAULT_ECE_BINS;
use crate::model::{Activation, ArchitectureSpec, LayerSpec, DEFAULT_DROPOUT_RATE};
use crate::optim::{AdamConfig, EarlyStop, TrainSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Convergence,
    Tabular,
    Decompose,
    VerifyFaithful,
    Family,
}

impl FromStr for Experiment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "convergence" => Self::Convergence,
            "tabular" => Self::Tabular,
            "decompose" => Self::Decompose,
            "verify" | "verify-faithful" => Self::VerifyFaithful,
            "family" => Self::Family,
            other => return Err(Error::Config(format!("unknown experiment `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Normal,
    Student,
    DeepEnsemble,
    McDropout,
}

impl Family {
    pub fn likelihood(self) -> Likelihood {
        match self {
            Family::Student => Likelihood::Student,
            _ => Likelihood::Normal,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Normal => "normal",
            Family::Student => "student",
            Family::DeepEnsemble => "deep-ensemble",
            Family::McDropout => "mc-dropout",
        })
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "normal" => Self::Normal,
            "student" => Self::Student,
            "deep-ensemble" | "ensemble" => Self::DeepEnsemble,
            "mc-dropout" | "dropout" => Self::McDropout,
            other => return Err(Error::Config(format!("unknown family `{other}`"))),
        })
    }
}

/// Model roster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    UnitVariance,
    Conventional,
    BetaNll(f64),
    Proposal1,
    Proposal2,
    Faithful,
}

impl ModelKind {
    pub fn roster() -> Vec<ModelKind> {
        vec![
            ModelKind::UnitVariance,
            ModelKind::Conventional,
            ModelKind::BetaNll(0.5),
            ModelKind::BetaNll(1.0),
            ModelKind::Proposal1,
            ModelKind::Proposal2,
            ModelKind::Faithful,
        ]
    }

    pub fn label(&self) -> String {
        match self {
            ModelKind::UnitVariance => "Unit Variance Homoscedastic".into(),
            ModelKind::Conventional => "Conventional Heteroscedastic".into(),
            ModelKind::BetaNll(b) => format!("Beta NLL ({b:.1})"),
            ModelKind::Proposal1 => "Proposal 1".into(),
            ModelKind::Proposal2 => "Proposal 2".into(),
            ModelKind::Faithful => "Faithful Heteroscedastic".into(),
        }
    }

    /// Short identifier used in config files and file names.
    pub fn key(&self) -> String {
        match self {
            ModelKind::UnitVariance => "unit-variance".into(),
            ModelKind::Conventional => "conventional".into(),
            ModelKind::BetaNll(b) => format!("beta-nll({b:?})"),
            ModelKind::Proposal1 => "proposal-1".into(),
            ModelKind::Proposal2 => "proposal-2".into(),
            ModelKind::Faithful => "faithful".into(),
        }
    }

    /// File-name-safe form of [`ModelKind::key`].
    pub fn slug(&self) -> String {
        self.key().replace(['(', ')'], "").replace('.', "_")
    }

    pub fn is_baseline(&self) -> bool {
        matches!(self, ModelKind::UnitVariance)
    }

    pub fn loss(&self, likelihood: Likelihood) -> Result<LossSpec> {
        let student = likelihood == Likelihood::Student;
        Ok(match self {
            ModelKind::UnitVariance => LossSpec::Sse,
            ModelKind::Conventional if student => LossSpec::StudentNll,
            ModelKind::Conventional => LossSpec::GaussianNll,
            ModelKind::BetaNll(_) if student => {
                return Err(Error::Config("Beta NLL is only defined for Normal likelihoods".into()))
            }
            ModelKind::BetaNll(b) => LossSpec::beta_nll(*b)?,
            ModelKind::Proposal1 => LossSpec::NewtonMean { likelihood },
            ModelKind::Proposal2 => LossSpec::ShieldedTrunk { likelihood },
            ModelKind::Faithful if student => LossSpec::FaithfulStudent,
            ModelKind::Faithful => LossSpec::Faithful,
        })
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(inner) = s.strip_prefix("beta-nll(").and_then(|r| r.strip_suffix(')')) {
            let b: f64 = inner.trim().parse().map_err(|_| Error::Config(format!("bad beta in `{s}`")))?;
            LossSpec::beta_nll(b)?;
            return Ok(ModelKind::BetaNll(b));
        }
        Ok(match s {
            "unit-variance" => ModelKind::UnitVariance,
            "conventional" => ModelKind::Conventional,
            "proposal-1" => ModelKind::Proposal1,
            "proposal-2" => ModelKind::Proposal2,
            "faithful" => ModelKind::Faithful,
            other => return Err(Error::Config(format!("unknown model `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StandardizeMode {
    /// Statistics from each training fold.
    Fold,
    /// Statistics from the whole dataset.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub family: Family,
    pub models: Vec<ModelKind>,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    /// Early-stopping patience on validation RMSE; `0` disables it.
    pub patience: usize,
    pub adam: AdamConfig,
    pub seeds: Vec<u64>,
    pub folds: usize,
    pub members: usize,
    pub dropout_rate: f64,
    pub ece_bins: usize,
    pub out: PathBuf,
    pub data: Vec<PathBuf>,
    pub targets: Vec<String>,
    pub group_column: Option<String>,
    pub noise: NoiseParam,
    pub standardize: StandardizeMode,
    pub standardize_features: bool,
    pub snapshot_every: usize,
    pub grid_points: usize,
    pub points: usize,
    pub verify_loss: ModelKind,
}

impl ExperimentConfig {
    pub fn defaults(experiment: Experiment) -> Self {
        let base = Self {
            experiment,
            family: Family::Normal,
            models: ModelKind::roster(),
            hidden: vec![50],
            activation: Activation::Elu,
            epochs: 20_000,
            batch_size: 0,
            patience: 0,
            adam: AdamConfig::default(),
            seeds: vec![0],
            folds: 10,
            members: 5,
            dropout_rate: DEFAULT_DROPOUT_RATE,
            ece_bins: DEFAULT_ECE_BINS,
            out: PathBuf::from("results"),
            data: Vec::new(),
            targets: Vec::new(),
            group_column: None,
            noise: NoiseParam::StdDev,
            standardize: StandardizeMode::Fold,
            standardize_features: true,
            snapshot_every: 2000,
            grid_points: 201,
            points: 1000,
            verify_loss: ModelKind::Faithful,
        };
        match experiment {
            // Sine inputs keep their raw scale so that x = 9.5 stays isolated.
            Experiment::Convergence | Experiment::Decompose => Self {
                standardize_features: false,
                ..base
            },
            Experiment::Tabular => Self {
                hidden: vec![50, 50],
                epochs: 60_000,
                patience: 100,
                ..base
            },
            Experiment::VerifyFaithful => Self {
                epochs: 2000,
                seeds: vec![0, 1, 2],
                ..base
            },
            Experiment::Family => Self {
                family: Family::DeepEnsemble,
                models: vec![ModelKind::UnitVariance, ModelKind::Conventional, ModelKind::Faithful],
                standardize_features: false,
                ..base
            },
        }
    }

    /// Defaults overridden by a flat config text.
    pub fn parse(experiment: Experiment, text: &str) -> Result<Self> {
        let mut cfg = Self::defaults(experiment);
        cfg.apply(&parse_flat(text)?)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("`{key}` expects a number, got `{v}`")))
        }
        fn list(v: &str) -> Vec<&str> {
            v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                _ => Err(Error::Config(format!("`{key}` expects a boolean, got `{v}`"))),
            }
        }
        for (key, v) in kv {
            let v = v.as_str();
            match key.as_str() {
                "experiment" => {
                    let e: Experiment = v.parse()?;
                    if e != self.experiment {
                        return Err(Error::Config(format!(
                            "config is for experiment `{v}`, not {:?}",
                            self.experiment
                        )));
                    }
                }
                "family" => self.family = v.parse()?,
                "models" => self.models = list(v).into_iter().map(str::parse).collect::<Result<_>>()?,
                "hidden" => self.hidden = list(v).into_iter().map(|w| num(key, w)).collect::<Result<_>>()?,
                "activation" => {
                    self.activation = match v {
                        "elu" => Activation::Elu,
                        "relu" => Activation::Relu,
                        "linear" => Activation::Linear,
                        _ => return Err(Error::Config(format!("unknown activation `{v}`"))),
                    }
                }
                "epochs" => self.epochs = num(key, v)?,
                "batch_size" => self.batch_size = num(key, v)?,
                "patience" => self.patience = num(key, v)?,
                "lr" => self.adam.lr = num(key, v)?,
                "adam_beta1" => self.adam.beta1 = num(key, v)?,
                "adam_beta2" => self.adam.beta2 = num(key, v)?,
                "adam_eps" => self.adam.eps = num(key, v)?,
                "seed" => self.seeds = vec![num(key, v)?],
                "seeds" => self.seeds = list(v).into_iter().map(|s| num(key, s)).collect::<Result<_>>()?,
                "folds" => self.folds = num(key, v)?,
                "members" => self.members = num(key, v)?,
                "dropout_rate" => self.dropout_rate = num(key, v)?,
                "ece_bins" => self.ece_bins = num(key, v)?,
                "out" => self.out = PathBuf::from(v),
                "data" => self.data = list(v).into_iter().map(PathBuf::from).collect(),
                "targets" => self.targets = list(v).into_iter().map(String::from).collect(),
                "group_column" => self.group_column = Some(v.to_string()).filter(|s| !s.is_empty()),
                "noise" => {
                    self.noise = match v {
                        "std" | "stddev" => NoiseParam::StdDev,
                        "variance" => NoiseParam::Variance,
                        _ => return Err(Error::Config(format!("unknown noise reading `{v}`"))),
                    }
                }
                "standardize" => {
                    self.standardize = match v {
                        "fold" => StandardizeMode::Fold,
                        "global" => StandardizeMode::Global,
                        _ => return Err(Error::Config(format!("unknown standardization `{v}`"))),
                    }
                }
                "standardize_features" => self.standardize_features = flag(key, v)?,
                "snapshot_every" => self.snapshot_every = num(key, v)?,
                "grid_points" => self.grid_points = num(key, v)?,
                "points" => self.points = num(key, v)?,
                "verify_loss" => self.verify_loss = v.parse()?,
                other => return Err(Error::Config(format!("unknown key `{other}`"))),
            }
        }
        Ok(())
    }

    /// Full check, including that a tabular run names its data.
    pub fn validate(&self) -> Result<()> {
        if self.experiment == Experiment::Tabular {
            if self.data.is_empty() {
                return Err(Error::Config("tabular runs need at least one data file".into()));
            }
            if self.targets.is_empty() {
                return Err(Error::Config("tabular runs need target columns".into()));
            }
        }
        self.validate_protocol()
    }

    /// Checks everything except data sources.
    pub fn validate_protocol(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        if self.models.is_empty() && self.experiment != Experiment::VerifyFaithful {
            return Err(Error::Config("model list is empty".into()));
        }
        for m in &self.models {
            m.loss(self.family.likelihood())?;
        }
        if self.members == 0 {
            return Err(Error::Config("members must be at least 1".into()));
        }
        if self.ece_bins < 2 {
            return Err(Error::Config("ece_bins must be at least 2".into()));
        }
        if self.grid_points < 2 {
            return Err(Error::Config("grid_points must be at least 2".into()));
        }
        if self.experiment == Experiment::Tabular && self.folds < 2 {
            return Err(Error::Config("folds must be at least 2".into()));
        }
        self.architecture(1, 1).validate()?;
        self.schedule(0).validate()
    }

    /// Architecture for the configured family.
    pub fn architecture(&self, input_dim: usize, output_dim: usize) -> ArchitectureSpec {
        ArchitectureSpec {
            input_dim,
            output_dim,
            trunk: self
                .hidden
                .iter()
                .map(|&width| LayerSpec {
                    width,
                    activation: self.activation,
                })
                .collect(),
            dof_head: self.family == Family::Student,
            dropout_rate: if self.family == Family::McDropout {
                self.dropout_rate
            } else {
                0.0
            },
        }
    }

    pub fn schedule(&self, seed: u64) -> TrainSchedule {
        let stop = self.patience > 0;
        TrainSchedule {
            epochs: self.epochs,
            batch_size: self.batch_size,
            early_stop: if stop {
                EarlyStop::ValidationRmse
            } else {
                EarlyStop::None
            },
            patience: self.patience,
            restore_best: stop,
            seed,
            snapshot_epochs: Vec::new(),
            adam: self.adam,
        }
    }

    /// Ensemble size, or number of dropout masks averaged at prediction time.
    pub fn mixture_size(&self) -> usize {
        match self.family {
            Family::DeepEnsemble | Family::McDropout => self.members,
            _ => 1,
        }
    }
}

/// Parses `key = value` lines.
pub fn parse_flat(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_overrides() {
        let text = "# tabular run\nexperiment = tabular\nmodels = unit-variance, faithful, beta-nll(0.5)\n\
                    seeds = 3, 4\nhidden = 20,20\ndata = a.csv\ntargets = y\nnoise = variance\n";
        let cfg = ExperimentConfig::parse(Experiment::Tabular, text).unwrap();
        assert_eq!(
            cfg.models,
            vec![ModelKind::UnitVariance, ModelKind::Faithful, ModelKind::BetaNll(0.5)]
        );
        assert_eq!(cfg.seeds, vec![3, 4]);
        assert_eq!(cfg.hidden, vec![20, 20]);
        assert_eq!(cfg.patience, 100);
        assert_eq!(cfg.noise, NoiseParam::Variance);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_bad_input() {
        assert!(parse_flat("novalue").is_err());
        assert!(parse_flat("a = 1\na = 2").is_err());
        assert!(ExperimentConfig::parse(Experiment::Convergence, "mystery = 1").is_err());
        assert!(ExperimentConfig::parse(Experiment::Convergence, "experiment = tabular").is_err());
        let cfg = ExperimentConfig::parse(Experiment::Convergence, "seeds = ").unwrap();
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig::parse(Experiment::Convergence, "family = student").unwrap();
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig::parse(Experiment::Convergence, "epochs = 10\npatience = 11").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn every_roster_model_has_a_loss() {
        for m in ModelKind::roster() {
            assert!(m.loss(Likelihood::Normal).is_ok());
            assert_eq!(m.key().parse::<ModelKind>().unwrap(), m);
        }
        assert_eq!(ModelKind::BetaNll(0.5).label(), "Beta NLL (0.5)");
        assert_eq!(ModelKind::BetaNll(1.0).slug(), "beta-nll1_0");
    }
}
