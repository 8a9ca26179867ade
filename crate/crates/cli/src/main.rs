use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use faithful_core::harness::{
    emit_report, run_convergence, run_decompose, run_family, run_tabular, verify_faithfulness, Experiment,
    ExperimentConfig, ExperimentReport,
};

#[derive(Parser)]
#[command(name = "faithful", version, about = "Faithful heteroscedastic regression experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sine-task convergence at the isolated points.
    Convergence(RunArgs),
    /// k-fold cross-validation on CSV datasets with strikes and win/tie tallies.
    Tabular(RunArgs),
    /// Noise-variance recovery from clean and noisy targets.
    Decompose(RunArgs),
    /// Bitwise check that the trunk and mean head match a mean-only twin.
    Verify(RunArgs),
    /// Deep-ensemble or MC-dropout mixtures on the sine task.
    Family(RunArgs),
    /// Recompute strikes and tallies from a saved results.json.
    Replay {
        report: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Comma-separated target column names.
    #[arg(long)]
    targets: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated seeds; overrides --seed.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    ece_bins: Option<usize>,
    /// normal, student, deep-ensemble or mc-dropout.
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    members: Option<usize>,
    #[arg(long)]
    dropout_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Comma-separated model keys, e.g. `unit-variance,faithful`.
    #[arg(long)]
    models: Option<String>,
    /// Model whose loss `verify` checks.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    group_column: Option<String>,
}

impl RunArgs {
    fn config(&self, experiment: Experiment) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                ExperimentConfig::parse(experiment, &text)?
            }
            None => ExperimentConfig::defaults(experiment),
        };
        let mut kv = BTreeMap::new();
        let mut set = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                kv.insert(k.to_string(), v);
            }
        };
        if !self.data.is_empty() {
            let joined = self.data.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",");
            set("data", Some(joined));
        }
        set("targets", self.targets.clone());
        set("out", self.out.as_ref().map(|p| p.display().to_string()));
        set("seed", self.seed.map(|s| s.to_string()));
        set("seeds", self.seeds.clone());
        set("folds", self.folds.map(|v| v.to_string()));
        set("ece_bins", self.ece_bins.map(|v| v.to_string()));
        set("family", self.family.clone());
        set("members", self.members.map(|v| v.to_string()));
        set("dropout_rate", self.dropout_rate.map(|v| v.to_string()));
        set("epochs", self.epochs.map(|v| v.to_string()));
        set("models", self.models.clone());
        set("verify_loss", self.loss.clone());
        set("group_column", self.group_column.clone());
        if kv.contains_key("seed") && kv.contains_key("seeds") {
            kv.remove("seed");
        }
        cfg.apply(&kv)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn summarize(report: &ExperimentReport) {
    for r in &report.rows {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        println!(
            "{:<24} {:<30} rmse {:>8} ece {:>8} ll {:>9}{}{}",
            r.dataset,
            r.model,
            cell(r.rmse),
            cell(r.ece),
            cell(r.ll),
            if r.struck { "  struck" } else { "" },
            r.error.as_deref().map(|e| format!("  error: {e}")).unwrap_or_default(),
        );
    }
    for (model, t) in &report.tallies {
        println!("wins/ties {model:<30} rmse {} ece {} ll {}", t.rmse, t.ece, t.ll);
    }
    if let Some(c) = &report.convergence {
        for m in &c.models {
            match (&m.final_error, &m.error) {
                (Some(e), _) => println!(
                    "seed {} {:<30} |err| at 0.5 {:.4}  at 9.5 {:.4}{}",
                    m.seed,
                    m.label,
                    e.at_0_5,
                    e.at_9_5,
                    m.variance_rel_error.map(|v| format!("  variance rel. error {v:.3}")).unwrap_or_default()
                ),
                (None, Some(err)) => println!("seed {} {:<30} failed: {err}", m.seed, m.label),
                _ => {}
            }
        }
    }
    if let Some(d) = &report.decomposition {
        for r in &d.runs {
            println!(
                "seed {} noise recovery rel. error {:.3}, control max |gap| {:.2e}",
                r.seed, r.mean_relative_error, r.control_max_abs
            );
        }
    }
    if let Some(f) = &report.family {
        for m in &f.models {
            println!(
                "seed {} {:<30} members {} var(5) {:.4} var(10) {:.4}",
                m.seed, m.label, m.members, m.variance_at_5, m.variance_at_10
            );
        }
    }
    if let Some(c) = &report.certificate {
        for r in &c.runs {
            match &r.divergence {
                None => println!("seed {} member {}: identical for {} epochs", r.seed, r.member, r.epochs_checked),
                Some(d) => println!(
                    "seed {} member {}: diverged at epoch {} in {:?}[{}], {} ulp",
                    r.seed, r.member, d.epoch, d.partition, d.tensor, d.max_ulp
                ),
            }
        }
        println!("{} under {}: {}", c.loss, c.family, if c.passed { "PASS" } else { "FAIL" });
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let (experiment, args) = match &cli.command {
        Command::Convergence(a) => (Experiment::Convergence, a),
        Command::Tabular(a) => (Experiment::Tabular, a),
        Command::Decompose(a) => (Experiment::Decompose, a),
        Command::Verify(a) => (Experiment::VerifyFaithful, a),
        Command::Family(a) => (Experiment::Family, a),
        Command::Replay { report } => {
            let mut r = ExperimentReport::load(report).with_context(|| format!("loading {}", report.display()))?;
            r.adjudicate_scores()?;
            summarize(&r);
            return Ok(ExitCode::SUCCESS);
        }
    };
    let cfg = args.config(experiment)?;
    let report = match experiment {
        Experiment::Convergence => run_convergence(&cfg)?,
        Experiment::Tabular => run_tabular(&cfg)?,
        Experiment::Decompose => run_decompose(&cfg)?,
        Experiment::VerifyFaithful => verify_faithfulness(&cfg)?,
        Experiment::Family => run_family(&cfg)?,
    };
    emit_report(&report, &cfg.out).with_context(|| format!("writing {}", cfg.out.display()))?;
    summarize(&report);
    println!("wrote {}", cfg.out.display());
    let failed = report.certificate.as_ref().is_some_and(|c| !c.passed);
    Ok(if failed { ExitCode::from(2) } else { ExitCode::SUCCESS })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
