//! Report schema, strike/win/tie adjudication and file emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ModelKind};
use super::convergence::ConvergenceSection;
use super::decompose::DecompositionSection;
use super::family::FamilySection;
use super::verify::Certificate;
use crate::error::{Error, Result};
use crate::metrics::{g_test_histograms, ks_test_one_sided, paired_t_test_one_sided, ModelScore};

/// Significance level for strikes and ties.
pub const ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Wins {
    pub rmse: bool,
    pub ece: bool,
    pub ll: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub model: String,
    pub key: ModelKind,
    pub rmse: Option<f64>,
    pub ece: Option<f64>,
    pub ll: Option<f64>,
    pub struck: bool,
    /// p-value of the paired t-test against the baseline's squared errors.
    pub strike_p: Option<f64>,
    pub wins: Wins,
    pub error: Option<String>,
}

/// Raw evaluation vectors, kept so adjudication can be replayed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub dataset: String,
    pub model: ModelKind,
    pub score: Option<ModelScore>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub rmse: usize,
    pub ece: usize,
    pub ll: usize,
}

/// A table written to `curves/<name>.csv`, plotted to `curves/<name>.svg`
/// when `plot` names the columns to draw against the first one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub plot: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub package: String,
    pub version: String,
    pub ece_bins: usize,
    pub adam: crate::optim::AdamConfig,
    pub g_test: String,
    pub ks_test: String,
    pub t_test: String,
    pub standardization: String,
    pub noise: String,
}

impl Environment {
    pub fn capture(cfg: &ExperimentConfig) -> Self {
        Self {
            package: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            ece_bins: cfg.ece_bins,
            adam: cfg.adam,
            g_test: "two-sample 2 x m contingency vs best-ECE model; zero-total bins dropped".into(),
            ks_test: "one-sided two-sample, asymptotic p = exp(-2 D^2 nm / (n + m))".into(),
            t_test: "one-sided paired; zero-variance differences give p = 1 if mean <= 0 else 0".into(),
            standardization: format!(
                "targets {:?}{}",
                cfg.standardize,
                if cfg.standardize_features { ", features too" } else { "" }
            )
            .to_lowercase(),
            noise: format!("{:?}", cfg.noise).to_lowercase(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub environment: Environment,
    pub rows: Vec<ResultRow>,
    pub tallies: BTreeMap<String, Tally>,
    pub scores: Vec<ScoreRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convergence: Option<ConvergenceSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decomposition: Option<DecompositionSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificate: Option<Certificate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<FamilySection>,
    #[serde(default)]
    pub curves: Vec<Curve>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl ExperimentReport {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            config: cfg.clone(),
            environment: Environment::capture(cfg),
            rows: Vec::new(),
            tallies: BTreeMap::new(),
            scores: Vec::new(),
            convergence: None,
            decomposition: None,
            certificate: None,
            family: None,
            curves: Vec::new(),
            warnings: Vec::new(),
        }
    }

    /// Recomputes rows and tallies from `scores` without retraining.
    pub fn replay(&self) -> Result<(Vec<ResultRow>, BTreeMap<String, Tally>)> {
        let mut datasets: Vec<&str> = Vec::new();
        for s in &self.scores {
            if !datasets.contains(&s.dataset.as_str()) {
                datasets.push(&s.dataset);
            }
        }
        let mut rows = Vec::new();
        for d in datasets {
            let entries: Vec<&ScoreRecord> = self.scores.iter().filter(|s| s.dataset == d).collect();
            rows.extend(adjudicate(d, &entries)?);
        }
        let tallies = tally(&rows);
        Ok((rows, tallies))
    }

    /// Fills rows and tallies from `scores`.
    pub fn adjudicate_scores(&mut self) -> Result<()> {
        let (rows, tallies) = self.replay()?;
        self.rows = rows;
        self.tallies = tallies;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

fn argbest<'a>(pool: &[&'a ScoreRecord], key: impl Fn(&ModelScore) -> f64) -> Option<&'a ScoreRecord> {
    let mut best: Option<&ScoreRecord> = None;
    for &r in pool {
        let v = key(r.score.as_ref().expect("pool holds scored models"));
        if best.is_none_or(|b| v < key(b.score.as_ref().expect("scored"))) {
            best = Some(r);
        }
    }
    best
}

/// Strikes, winners and ties for one dataset.
///
/// A model is struck when its squared errors are worse than the baseline's
/// under a one-sided paired t-test at [`ALPHA`], or when it failed to train.
/// The baseline and struck models are excluded from every winner pool. A model
/// wins or ties RMSE when the paired t-test against the best-RMSE model keeps
/// `p >= ALPHA`, ECE via the G-test against the best-ECE model, and LL via the
/// one-sided KS test against the best-LL model.
pub fn adjudicate(dataset: &str, entries: &[&ScoreRecord]) -> Result<Vec<ResultRow>> {
    let baseline = entries
        .iter()
        .find(|e| e.model.is_baseline())
        .and_then(|e| e.score.as_ref());
    let mut rows = Vec::with_capacity(entries.len());
    let mut eligible: Vec<&ScoreRecord> = Vec::new();
    for e in entries {
        let mut row = ResultRow {
            dataset: dataset.to_string(),
            model: e.model.label(),
            key: e.model,
            rmse: None,
            ece: None,
            ll: None,
            struck: false,
            strike_p: None,
            wins: Wins::default(),
            error: e.error.clone(),
        };
        match &e.score {
            None => row.struck = !e.model.is_baseline(),
            Some(s) => {
                row.rmse = Some(s.rmse);
                row.ece = Some(s.ece);
                row.ll = Some(s.mean_ll);
                if !e.model.is_baseline() {
                    if let Some(b) = baseline {
                        let p = paired_t_test_one_sided(&s.sq_errors, &b.sq_errors)?;
                        row.strike_p = Some(p);
                        row.struck = p < ALPHA;
                    }
                    if !row.struck {
                        eligible.push(e);
                    }
                }
            }
        }
        rows.push(row);
    }

    let best_rmse = argbest(&eligible, |s| s.rmse);
    let best_ece = argbest(&eligible, |s| s.ece);
    let best_ll = argbest(&eligible, |s| -s.mean_ll);
    for (row, e) in rows.iter_mut().zip(entries) {
        if !eligible.iter().any(|x| std::ptr::eq(*x, *e)) {
            continue;
        }
        let s = e.score.as_ref().expect("eligible models are scored");
        if let Some(b) = best_rmse.and_then(|b| b.score.as_ref()) {
            row.wins.rmse = paired_t_test_one_sided(&s.sq_errors, &b.sq_errors)? >= ALPHA;
        }
        if let Some(b) = best_ece.and_then(|b| b.score.as_ref()) {
            row.wins.ece = g_test_histograms(&s.bins.counts, &b.bins.counts)? >= ALPHA;
        }
        if let Some(b) = best_ll.and_then(|b| b.score.as_ref()) {
            row.wins.ll = ks_test_one_sided(&s.ll, &b.ll)? >= ALPHA;
        }
    }
    Ok(rows)
}

/// Wins-or-ties per model label, over datasets. The baseline is not tallied.
pub fn tally(rows: &[ResultRow]) -> BTreeMap<String, Tally> {
    let mut out: BTreeMap<String, Tally> = BTreeMap::new();
    for r in rows.iter().filter(|r| !r.key.is_baseline()) {
        let t = out.entry(r.model.clone()).or_default();
        t.rmse += r.wins.rmse as usize;
        t.ece += r.wins.ece as usize;
        t.ll += r.wins.ll as usize;
    }
    out
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `results.json`, `results.csv` and every curve as CSV (and SVG when plotted).
pub fn emit_report(report: &ExperimentReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("curves"))?;
    fs::write(dir.join("results.json"), serde_json::to_string_pretty(report)?)?;

    let csv_path = dir.join("results.csv");
    let csv_err = |source| Error::Csv {
        path: csv_path.clone(),
        source,
    };
    let mut w = csv::Writer::from_path(&csv_path).map_err(csv_err)?;
    w.write_record(["dataset", "model", "rmse", "ece", "ll", "struck", "win_rmse", "win_ece", "win_ll"])
        .map_err(csv_err)?;
    for r in &report.rows {
        w.write_record([
            r.dataset.clone(),
            r.model.clone(),
            opt(r.rmse),
            opt(r.ece),
            opt(r.ll),
            r.struck.to_string(),
            r.wins.rmse.to_string(),
            r.wins.ece.to_string(),
            r.wins.ll.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;

    for c in &report.curves {
        write_curve(c, &dir.join("curves"))?;
    }
    Ok(())
}

fn write_curve(c: &Curve, dir: &Path) -> Result<()> {
    let path = dir.join(format!("{}.csv", c.name));
    let csv_err = |source| Error::Csv {
        path: path.clone(),
        source,
    };
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    w.write_record(&c.columns).map_err(csv_err)?;
    for r in &c.rows {
        w.write_record(r.iter().map(|v| v.to_string())).map_err(csv_err)?;
    }
    w.flush()?;
    if !c.plot.is_empty() {
        fs::write(dir.join(format!("{}.svg", c.name)), svg_plot(c))?;
    }
    Ok(())
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// Line plot of the `plot` columns against column 0.
pub fn svg_plot(c: &Curve) -> String {
    let (w, h, pad) = (640.0, 400.0, 48.0);
    let finite = |v: f64| v.is_finite();
    let xs: Vec<f64> = c.rows.iter().map(|r| r[0]).filter(|v| finite(*v)).collect();
    let ys: Vec<f64> = c
        .rows
        .iter()
        .flat_map(|r| c.plot.iter().map(move |&j| r[j]))
        .filter(|v| finite(*v))
        .collect();
    let range = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(lo < hi) {
            (lo - 1.0, hi + 1.0)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = if xs.is_empty() { (0.0, 1.0) } else { range(&xs) };
    let (y0, y1) = if ys.is_empty() { (0.0, 1.0) } else { range(&ys) };
    let px = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let py = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{pad}" y="{pad}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - 2.0 * pad,
        h - 2.0 * pad
    );
    let _ = writeln!(s, r#"<text x="{}" y="24" font-size="14" text-anchor="middle">{}</text>"#, w / 2.0, c.name);
    let _ = writeln!(
        s,
        r#"<text x="{pad}" y="{}" font-size="10">{x0:.3}</text><text x="{}" y="{}" font-size="10" text-anchor="end">{x1:.3}</text>"#,
        h - pad + 14.0,
        w - pad,
        h - pad + 14.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{y0:.3}</text><text x="{}" y="{}" font-size="10" text-anchor="end">{y1:.3}</text>"#,
        pad - 4.0,
        h - pad,
        pad - 4.0,
        pad + 8.0
    );
    for (k, &j) in c.plot.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = c
            .rows
            .iter()
            .filter(|r| finite(r[0]) && finite(r[j]))
            .map(|r| format!("{:.2},{:.2}", px(r[0]), py(r[j])))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{}</text>"#,
            pad + 8.0,
            pad + 14.0 + 13.0 * k as f64,
            c.columns[j]
        );
    }
    s.push_str("</svg>\n");
    s
}
