//! Synthetic generators, CSV ingestion and export, scaling, PCA and
//! train/test splitting.
//!
//! Class labels are stored as nonnegative integer-valued floats and are
//! 0-based.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::symmetric_eigen;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DatasetMeta {
    pub source: String,
    pub seed: Option<u64>,
    pub columns: Vec<String>,
    pub scaler: Option<MinMaxScaler>,
    /// Rows dropped at ingestion because they held NaN or infinite values.
    pub rejected_rows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Option<Vec<f64>>,
    pub meta: DatasetMeta,
}

fn default_columns(d: usize) -> Vec<String> {
    (0..d).map(|j| format!("x{j}")).collect()
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Option<Vec<f64>>, source: impl Into<String>) -> Result<Self> {
        if let Some(l) = &labels {
            check_dim(features.nrows(), l.len())?;
        }
        let columns = default_columns(features.ncols());
        Ok(Dataset {
            features,
            labels,
            meta: DatasetMeta {
                source: source.into(),
                columns,
                ..DatasetMeta::default()
            },
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn targets(&self) -> Result<&[f64]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Data("dataset has no label column".into()))
    }

    /// Labels as class indices; fails on negative or fractional values.
    pub fn class_labels(&self) -> Result<Vec<usize>> {
        self.targets()?
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v >= 0.0 && v.fract() == 0.0 && v.is_finite() {
                    Ok(v as usize)
                } else {
                    Err(Error::Data(format!("row {i}: label {v} is not a class index")))
                }
            })
            .collect()
    }

    /// Number of classes implied by the largest label.
    pub fn class_count(&self) -> Result<usize> {
        Ok(self.class_labels()?.into_iter().max().map_or(0, |m| m + 1))
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), rows),
            labels: self.labels.as_ref().map(|l| rows.iter().map(|&i| l[i]).collect()),
            meta: self.meta.clone(),
        }
    }
}

/// Weights, means and unit spreads of the 1-D benchmark mixture.
const MIXTURE: [(f64, f64); 2] = [(0.3, 0.0), (0.7, 5.0)];

fn normal_pdf(x: f64, mean: f64) -> f64 {
    (-(x - mean).powi(2) / 2.0).exp() / (2.0 * PI).sqrt()
}

/// Density of `0.3·N(0, 1) + 0.7·N(5, 1)`.
pub fn mixture_pdf(x: f64) -> f64 {
    MIXTURE.iter().map(|&(w, m)| w * normal_pdf(x, m)).sum()
}

/// `n` draws from the 1-D mixture; see [`mixture_pdf`].
pub fn gen_mixture_1d(n: usize, seed_value: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    let mut rng = seed::rng(seed::derive(seed_value, seed::STREAM_DATA));
    let features = Array2::from_shape_simple_fn((n, 1), || {
        let mean = if rng.random::<f64>() < MIXTURE[0].0 { MIXTURE[0].1 } else { MIXTURE[1].1 };
        mean + rng.sample::<f64, _>(StandardNormal)
    });
    let mut ds = Dataset::new(features, None, "mixture1d")?;
    ds.meta.seed = Some(seed_value);
    Ok(ds)
}

pub const SPIRAL_ARMS: usize = 3;
pub const SPIRAL_T_MIN: f64 = 0.25;
pub const SPIRAL_T_MAX: f64 = 2.5;
pub const SPIRAL_NOISE: f64 = 0.05;

/// Three Archimedean arms `t·(cos θ, sin θ)` with `θ = π t + 2πk/3`,
/// `t ~ U[0.25, 2.5]`, isotropic noise of spread 0.05, and sample `i` on
/// arm `i mod 3`.
pub fn gen_spirals_2d(n: usize, seed_value: u64) -> Result<Dataset> {
    spirals(n, seed_value, SPIRAL_NOISE)
}

/// [`gen_spirals_2d`] without the additive noise.
pub fn gen_spirals_2d_noise_free(n: usize, seed_value: u64) -> Result<Dataset> {
    spirals(n, seed_value, 0.0)
}

fn spirals(n: usize, seed_value: u64, noise: f64) -> Result<Dataset> {
    if n < SPIRAL_ARMS {
        return Err(Error::invalid(format!("need at least {SPIRAL_ARMS} samples")));
    }
    let mut rng = seed::rng(seed::derive(seed_value, seed::STREAM_DATA));
    let mut features = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let arm = i % SPIRAL_ARMS;
        let t = rng.random_range(SPIRAL_T_MIN..SPIRAL_T_MAX);
        let theta = PI * t + 2.0 * PI * arm as f64 / SPIRAL_ARMS as f64;
        let ex: f64 = rng.sample(StandardNormal);
        let ey: f64 = rng.sample(StandardNormal);
        features[[i, 0]] = t * theta.cos() + noise * ex;
        features[[i, 1]] = t * theta.sin() + noise * ey;
        labels.push(arm as f64);
    }
    let mut ds = Dataset::new(features, Some(labels), "spirals")?;
    ds.meta.seed = Some(seed_value);
    Ok(ds)
}

/// Which CSV column holds the labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelColumn {
    Index(usize),
    Name(String),
}

impl std::str::FromStr for LabelColumn {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s.parse::<usize>() {
            Ok(i) => LabelColumn::Index(i),
            Err(_) => LabelColumn::Name(s.to_string()),
        })
    }
}

/// Reads a comma-separated numeric file. Rows with NaN or infinite values
/// are dropped and counted in `meta.rejected_rows`.
pub fn load_csv(path: &Path, label: Option<&LabelColumn>, has_header: bool) -> Result<Dataset> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io_err)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let header: Option<Vec<String>> = if has_header {
        Some(reader.headers()?.iter().map(str::to_string).collect())
    } else {
        None
    };
    let mut width = header.as_ref().map(Vec::len);
    let mut values = Vec::new();
    let mut rows = 0usize;
    let mut rejected = 0usize;
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() == 1 && record.get(0) == Some("") {
            continue;
        }
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(Error::RaggedRow {
                line,
                expected,
                found: record.len(),
            });
        }
        let parsed: Vec<f64> = record
            .iter()
            .map(|field| {
                field.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    message: format!("cannot read {field:?} as a number"),
                })
            })
            .collect::<Result<_>>()?;
        if parsed.iter().any(|v| !v.is_finite()) {
            rejected += 1;
            continue;
        }
        values.extend(parsed);
        rows += 1;
    }
    let width = width.unwrap_or(0);
    if rows == 0 {
        return Err(Error::Data(format!("{} holds no usable rows", path.display())));
    }
    if rejected > 0 {
        log::warn!("{}: rejected {rejected} rows with non-finite values", path.display());
    }
    let names = header.unwrap_or_else(|| default_columns(width));
    let label_index = match label {
        None => None,
        Some(LabelColumn::Index(i)) if *i < width => Some(*i),
        Some(LabelColumn::Index(i)) => {
            return Err(Error::Data(format!("label column {i} is out of range for {width} columns")))
        }
        Some(LabelColumn::Name(n)) => Some(
            names
                .iter()
                .position(|c| c == n)
                .ok_or_else(|| Error::Data(format!("no column named {n:?}")))?,
        ),
    };
    let all = Array2::from_shape_vec((rows, width), values).map_err(|e| Error::Data(e.to_string()))?;
    let keep: Vec<usize> = (0..width).filter(|&j| Some(j) != label_index).collect();
    let features = all.select(Axis(1), &keep);
    let labels = label_index.map(|j| all.column(j).to_vec());
    Ok(Dataset {
        features,
        labels,
        meta: DatasetMeta {
            source: path.display().to_string(),
            seed: None,
            columns: keep.iter().map(|&j| names[j].clone()).collect(),
            scaler: None,
            rejected_rows: rejected,
        },
    })
}

/// Writes features and, if present, a trailing `label` column with a header
/// row. Floats use the shortest representation that reads back exactly.
pub fn write_csv<W: std::io::Write>(data: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = data.meta.columns.clone();
    if header.len() != data.dim() {
        header = default_columns(data.dim());
    }
    if data.labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header)?;
    for (i, row) in data.features.rows().into_iter().enumerate() {
        let mut fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        if let Some(l) = &data.labels {
            fields.push(l[i].to_string());
        }
        w.write_record(&fields)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: "<csv output>".into(),
        source,
    })?;
    Ok(())
}

pub fn save_csv(data: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    write_csv(data, std::io::BufWriter::new(file))
}

impl MinMaxScaler {
    pub fn fit(x: ArrayView2<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::invalid("cannot fit a scaler to no rows"));
        }
        let min = x.fold_axis(Axis(0), f64::INFINITY, |a, &b| a.min(b)).to_vec();
        let max = x.fold_axis(Axis(0), f64::NEG_INFINITY, |a, &b| a.max(b)).to_vec();
        for (j, (lo, hi)) in min.iter().zip(&max).enumerate() {
            if lo == hi {
                log::warn!("column {j} is constant; it scales to 0");
            }
        }
        Ok(MinMaxScaler { min, max })
    }

    /// Maps each column onto `[0, 1]`; constant columns map to 0.
    pub fn transform(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_dim(self.min.len(), x.ncols())?;
        let mut out = x.to_owned();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            let (lo, width) = (self.min[j], self.max[j] - self.min[j]);
            col.mapv_inplace(|v| if width > 0.0 { (v - lo) / width } else { 0.0 });
        }
        Ok(out)
    }

    pub fn inverse(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_dim(self.min.len(), x.ncols())?;
        let mut out = x.to_owned();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            let (lo, width) = (self.min[j], self.max[j] - self.min[j]);
            col.mapv_inplace(|v| lo + v * width);
        }
        Ok(out)
    }
}

/// Scales features to `[0, 1]` per column and records the scaler.
pub fn minmax_scale(data: &Dataset) -> Result<Dataset> {
    let scaler = MinMaxScaler::fit(data.features.view())?;
    let features = scaler.transform(data.features.view())?;
    let mut meta = data.meta.clone();
    meta.scaler = Some(scaler);
    Ok(Dataset {
        features,
        labels: data.labels.clone(),
        meta,
    })
}

/// Centering and projection onto the leading covariance eigenvectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    pub mean: Array1<f64>,
    /// `k × d`, one component per row.
    pub components: Array2<f64>,
    /// Variance along each kept component.
    pub variances: Array1<f64>,
}

impl PcaProjection {
    pub fn apply(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_dim(self.mean.len(), x.ncols())?;
        let centered = &x - &self.mean.view().insert_axis(Axis(0));
        Ok(centered.dot(&self.components.t()))
    }

    pub fn reconstruct(&self, reduced: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_dim(self.components.nrows(), reduced.ncols())?;
        Ok(reduced.dot(&self.components) + &self.mean.view().insert_axis(Axis(0)))
    }
}

/// Projects the rows of `x` onto the top `k` principal components of the
/// (population) covariance.
pub fn pca_reduce(x: ArrayView2<f64>, k: usize) -> Result<(Array2<f64>, PcaProjection)> {
    let (n, d) = x.dim();
    if k == 0 || k > d {
        return Err(Error::invalid(format!("cannot keep {k} of {d} components")));
    }
    if n == 0 {
        return Err(Error::invalid("cannot fit PCA to no rows"));
    }
    let mean = x.mean_axis(Axis(0)).expect("nonempty");
    let centered = &x - &mean.view().insert_axis(Axis(0));
    let mut cov = centered.t().dot(&centered) / n as f64;
    let sym = (&cov + &cov.t()) / 2.0;
    cov.assign(&sym);
    let eig = symmetric_eigen(cov.view())?;
    let proj = PcaProjection {
        mean,
        components: eig.vectors.slice(s![..k, ..]).to_owned(),
        variances: eig.values.slice(s![..k]).mapv(|v| v.max(0.0)),
    };
    let reduced = proj.apply(x)?;
    Ok((reduced, proj))
}

/// Shuffled split with `train_fraction` of the rows in the first part. With
/// `stratify`, each class is split separately so proportions are kept to
/// within one sample per class.
pub fn split(data: &Dataset, train_fraction: f64, stratify: bool, seed_value: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!("train fraction must lie in (0, 1), got {train_fraction}")));
    }
    let mut rng = seed::rng(seed::derive(seed_value, seed::STREAM_SPLIT));
    let groups: Vec<Vec<usize>> = if stratify {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, c) in data.class_labels()?.into_iter().enumerate() {
            by_class.entry(c).or_default().push(i);
        }
        by_class.into_values().collect()
    } else {
        vec![(0..data.len()).collect()]
    };
    let mut train = Vec::new();
    let mut test = Vec::new();
    for mut g in groups {
        g.shuffle(&mut rng);
        let cut = (train_fraction * g.len() as f64).round() as usize;
        train.extend_from_slice(&g[..cut]);
        test.extend_from_slice(&g[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((data.select(&train), data.select(&test)))
}

/// Evenly spaced grid of `points` values over `[lo, hi]` as an `points × 1`
/// matrix.
pub fn grid_1d(lo: f64, hi: f64, points: usize) -> Array2<f64> {
    let step = if points > 1 { (hi - lo) / (points - 1) as f64 } else { 0.0 };
    Array2::from_shape_fn((points, 1), |(i, _)| lo + step * i as f64)
}

/// Rotation of 2-D points by `angle` radians.
pub fn rotate_2d(x: ArrayView2<f64>, angle: f64) -> Result<Array2<f64>> {
    check_dim(2, x.ncols())?;
    let (c, s) = (angle.cos(), angle.sin());
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let (a, b) = (row[0], row[1]);
        row[0] = c * a - s * b;
        row[1] = s * a + c * b;
    }
    Ok(out)
}
