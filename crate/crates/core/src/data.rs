//! Datasets, synthetic generators, CSV ingestion, standardization and folds.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Tensor,
    /// Replicate-group id per row, when rows are repeated measurements.
    pub groups: Option<Vec<u64>>,
    pub feature_names: Vec<String>,
    pub target_names: Vec<String>,
    pub provenance: String,
}

impl Dataset {
    pub fn new(x: Tensor, y: Tensor, provenance: impl Into<String>) -> Result<Self> {
        let d = x.cols();
        let q = y.cols();
        let ds = Self {
            feature_names: (0..d).map(|i| format!("x{i}")).collect(),
            target_names: (0..q).map(|i| format!("y{i}")).collect(),
            x,
            y,
            groups: None,
            provenance: provenance.into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.shape().len() != 2 || self.y.shape().len() != 2 {
            return Err(Error::InvalidArgument("dataset tensors must be matrices".into()));
        }
        if self.x.rows() != self.y.rows() {
            return Err(Error::InvalidArgument(format!(
                "{} feature rows but {} target rows",
                self.x.rows(),
                self.y.rows()
            )));
        }
        if let Some(g) = &self.groups {
            if g.len() != self.x.rows() {
                return Err(Error::InvalidArgument("group ids do not cover every row".into()));
            }
        }
        if !self.x.all_finite() || !self.y.all_finite() {
            return Err(Error::Domain("dataset contains non-finite values".into()));
        }
        if self.feature_names.len() != self.x.cols() || self.target_names.len() != self.y.cols() {
            return Err(Error::InvalidArgument("column names do not match widths".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.y.cols()
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(rows),
            y: self.y.select_rows(rows),
            groups: self.groups.as_ref().map(|g| rows.iter().map(|&r| g[r]).collect()),
            feature_names: self.feature_names.clone(),
            target_names: self.target_names.clone(),
            provenance: self.provenance.clone(),
        }
    }
}

/// How the second argument of the sine task's noise law is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseParam {
    #[default]
    StdDev,
    Variance,
}

pub const SINE_SAMPLED: usize = 498;
pub const SINE_RANGE: (f64, f64) = (2.5, 7.5);
pub const SINE_ISOLATED: [f64; 2] = [0.5, 9.5];

/// Ground truth of the sine task `y = x sin x + eps`, `eps ~ N(0, 0.1 + |x/2|)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SineTruth {
    pub noise: NoiseParam,
}

impl SineTruth {
    pub fn mean(&self, x: f64) -> f64 {
        x * x.sin()
    }

    fn law(x: f64) -> f64 {
        0.1 + (0.5 * x).abs()
    }

    pub fn noise_std(&self, x: f64) -> f64 {
        match self.noise {
            NoiseParam::StdDev => Self::law(x),
            NoiseParam::Variance => Self::law(x).sqrt(),
        }
    }

    pub fn noise_variance(&self, x: f64) -> f64 {
        match self.noise {
            NoiseParam::StdDev => Self::law(x) * Self::law(x),
            NoiseParam::Variance => Self::law(x),
        }
    }
}

/// 498 noisy points on `[2.5, 7.5]` followed by the noiseless isolated points
/// at `x = 0.5` and `x = 9.5`.
pub fn generate_sine_dataset(seed: u64, noise: NoiseParam) -> (Dataset, SineTruth) {
    let truth = SineTruth { noise };
    let mut rng = seed::rng(seed, &[seed::tag::DATA]);
    let mut xs = Vec::with_capacity(SINE_SAMPLED + 2);
    let mut ys = Vec::with_capacity(SINE_SAMPLED + 2);
    for _ in 0..SINE_SAMPLED {
        let x = rng.random_range(SINE_RANGE.0..SINE_RANGE.1);
        let z: f64 = StandardNormal.sample(&mut rng);
        xs.push(x);
        ys.push(truth.mean(x) + truth.noise_std(x) * z);
    }
    for x in SINE_ISOLATED {
        xs.push(x);
        ys.push(truth.mean(x));
    }
    let ds = Dataset::new(Tensor::column(&xs), Tensor::column(&ys), format!("sine(seed={seed})"))
        .expect("finite by construction");
    (ds, truth)
}

/// Clean targets `E[y|x]` and noisy targets on identical covariates
/// `x ~ U(range)`.
pub fn generate_decomposition_pair(
    seed: u64,
    n: usize,
    range: (f64, f64),
    mean: impl Fn(f64) -> f64,
    noise_scale: impl Fn(f64) -> f64,
) -> Result<(Dataset, Dataset)> {
    if !(range.0 < range.1) {
        return Err(Error::InvalidArgument(format!("empty range {range:?}")));
    }
    let mut rng = seed::rng(seed, &[seed::tag::DATA]);
    let mut xs = Vec::with_capacity(n);
    let mut clean = Vec::with_capacity(n);
    let mut noisy = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.random_range(range.0..range.1);
        let s = noise_scale(x);
        if !(s >= 0.0) {
            return Err(Error::Domain(format!("noise scale {s} at x = {x}")));
        }
        let z: f64 = StandardNormal.sample(&mut rng);
        let m = mean(x);
        xs.push(x);
        clean.push(m);
        noisy.push(m + s * z);
    }
    let x = Tensor::column(&xs);
    Ok((
        Dataset::new(x.clone(), Tensor::column(&clean), format!("decomposition-clean(seed={seed})"))?,
        Dataset::new(x, Tensor::column(&noisy), format!("decomposition-noisy(seed={seed})"))?,
    ))
}

/// Reads a headed CSV. `targets` name the target columns; `group` optionally
/// names an integer replicate-group column. Every other column is a feature.
pub fn load_csv_dataset(path: &Path, targets: &[String], group: Option<&str>) -> Result<Dataset> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = reader.headers().map_err(csv_err)?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    if targets.is_empty() {
        return Err(Error::InvalidArgument("no target columns named".into()));
    }
    let target_idx = targets.iter().map(|t| find(t)).collect::<Result<Vec<_>>>()?;
    let group_idx = group.map(find).transpose()?;
    let feature_idx: Vec<usize> = (0..header.len())
        .filter(|i| !target_idx.contains(i) && Some(*i) != group_idx)
        .collect();

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut groups = Vec::new();
    let mut rows = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let cell = |c: usize| -> Result<f64> {
            let raw = record.get(c).unwrap_or("").trim();
            raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::NonNumeric {
                row: r + 1,
                column: header[c].clone(),
                value: raw.to_string(),
            })
        };
        for &c in &feature_idx {
            xs.push(cell(c)?);
        }
        for &c in &target_idx {
            ys.push(cell(c)?);
        }
        if let Some(g) = group_idx {
            let raw = record.get(g).unwrap_or("").trim();
            groups.push(raw.parse::<u64>().map_err(|_| Error::NonNumeric {
                row: r + 1,
                column: header[g].clone(),
                value: raw.to_string(),
            })?);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Empty("CSV data rows"));
    }
    let ds = Dataset {
        x: Tensor::matrix(rows, feature_idx.len(), xs)?,
        y: Tensor::matrix(rows, target_idx.len(), ys)?,
        groups: group_idx.map(|_| groups),
        feature_names: feature_idx.iter().map(|&i| header[i].clone()).collect(),
        target_names: targets.to_vec(),
        provenance: path.display().to_string(),
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes features, then targets, then the group column if present.
pub fn write_csv_dataset(path: &Path, ds: &Dataset, group_column: &str) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header: Vec<String> = ds.feature_names.iter().chain(&ds.target_names).cloned().collect();
    if ds.groups.is_some() {
        header.push(group_column.to_string());
    }
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.x.row(i).iter().chain(ds.y.row(i)).map(|v| v.to_string()).collect();
        if let Some(g) = &ds.groups {
            rec.push(g[i].to_string());
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-column affine map `(v - mean) / scale` with population statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScaling {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl ColumnScaling {
    /// Constant columns keep a unit divisor.
    pub fn fit(t: &Tensor) -> Result<Self> {
        let (n, c) = (t.rows(), t.cols());
        if n == 0 {
            return Err(Error::Empty("standardization source"));
        }
        let mut mean = vec![0.0; c];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(t.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(t.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn identity(cols: usize) -> Self {
        Self {
            mean: vec![0.0; cols],
            scale: vec![1.0; cols],
        }
    }

    fn map(&self, t: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let c = self.mean.len();
        let mut out = t.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let j = k % c;
            *v = f(*v, self.mean[j], self.scale[j]);
        }
        out
    }

    pub fn apply(&self, t: &Tensor) -> Tensor {
        self.map(t, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, t: &Tensor) -> Tensor {
        self.map(t, |v, m, s| v * s + m)
    }

    /// Maps variances from standardized units back to original units.
    pub fn invert_variance(&self, t: &Tensor) -> Tensor {
        self.map(t, |v, _, s| v * s * s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub x: ColumnScaling,
    pub y: ColumnScaling,
}

impl Standardizer {
    /// Fits target statistics on `source`, and feature statistics too when `features` is set.
    pub fn fit(source: &Dataset, features: bool) -> Result<Self> {
        Ok(Self {
            x: if features {
                ColumnScaling::fit(&source.x)?
            } else {
                ColumnScaling::identity(source.input_dim())
            },
            y: ColumnScaling::fit(&source.y)?,
        })
    }

    pub fn apply(&self, ds: &Dataset) -> Dataset {
        Dataset {
            x: self.x.apply(&ds.x),
            y: self.y.apply(&ds.y),
            ..ds.clone()
        }
    }

    pub fn invert(&self, ds: &Dataset) -> Dataset {
        Dataset {
            x: self.x.invert(&ds.x),
            y: self.y.invert(&ds.y),
            ..ds.clone()
        }
    }
}

/// Standardizes `ds` with statistics from `source`.
pub fn standardize(ds: &Dataset, source: &Dataset, features: bool) -> Result<(Dataset, Standardizer)> {
    let s = Standardizer::fit(source, features)?;
    Ok((s.apply(ds), s))
}

/// Row-to-fold assignment for k-fold cross-validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignment: Vec<usize>,
}

/// Folds from a seeded permutation: the row at permuted position `i` joins fold `i % k`.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 || k > n {
        return Err(Error::InvalidArgument(format!("cannot split {n} rows into {k} folds")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seed::rng(seed, &[seed::tag::FOLDS]));
    let mut assignment = vec![0; n];
    for (i, &row) in perm.iter().enumerate() {
        assignment[row] = i % k;
    }
    Ok(FoldPlan { k, seed, assignment })
}

impl FoldPlan {
    pub fn test_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&r| self.assignment[r] == fold).collect()
    }

    pub fn train_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&r| self.assignment[r] != fold).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &f in &self.assignment {
            s[f] += 1;
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["row_id", "fold"]).map_err(csv_err)?;
        for (r, f) in self.assignment.iter().enumerate() {
            w.write_record([r.to_string(), f.to_string()]).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sine_layout() {
        let (ds, truth) = generate_sine_dataset(0, NoiseParam::StdDev);
        assert_eq!(ds.len(), 500);
        assert_eq!(ds.x.data()[498], 0.5);
        assert_eq!(ds.y.data()[498], 0.5 * 0.5f64.sin());
        assert!((ds.y.data()[499] + 0.713_936).abs() < 1e-5);
        assert!(ds.x.data()[..498].iter().all(|&x| (2.5..7.5).contains(&x)));
        assert_eq!(truth.noise_std(5.0), 2.6);
        assert_eq!(SineTruth { noise: NoiseParam::Variance }.noise_variance(5.0), 2.6);
        let (again, _) = generate_sine_dataset(0, NoiseParam::StdDev);
        assert_eq!(ds, again);
    }

    #[test]
    fn zero_noise_pair_is_identical() {
        let (c, n) = generate_decomposition_pair(1, 50, (3.0, 7.0), |x| x.sin(), |_| 0.0).unwrap();
        assert!(c.x.bitwise_eq(&n.x));
        assert!(c.y.bitwise_eq(&n.y));
        assert!(generate_decomposition_pair(1, 5, (3.0, 7.0), |x| x, |_| -1.0).is_err());
    }

    #[test]
    fn standardization_examples() {
        let ds = Dataset::new(Tensor::column(&[5.0, 5.0]), Tensor::column(&[0.0, 2.0]), "t").unwrap();
        let (s, tr) = standardize(&ds, &ds, true).unwrap();
        assert_eq!(s.y.data(), &[-1.0, 1.0]);
        assert_eq!(s.x.data(), &[0.0, 0.0]);
        assert_eq!(tr.x.scale, vec![1.0]);
        assert_eq!(tr.invert(&s).y.data(), ds.y.data());
    }

    #[test]
    fn fold_sizes() {
        let p = kfold_split(103, 10, 4).unwrap();
        let mut sizes = p.sizes();
        sizes.sort();
        assert_eq!(sizes, [vec![10; 7], vec![11; 3]].concat());
        assert_eq!(p, kfold_split(103, 10, 4).unwrap());
        assert!(kfold_split(10, 10, 0).unwrap().sizes().iter().all(|&s| s == 1));
        assert!(kfold_split(5, 6, 0).is_err());
    }
}
