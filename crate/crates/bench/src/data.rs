//! Datasets: CSV ingestion, train/test splits and normalization.

use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use ngvi::likelihoods::clip_beta_target;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    Continuous,
    Binary,
    UnitInterval,
    OrdinalIndex,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub name: String,
    pub target_kind: TargetKind,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, name: impl Into<String>, target_kind: TargetKind) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(BenchError::Config(format!("{} input rows for {} targets", x.nrows(), y.len())));
        }
        if x.nrows() == 0 {
            return Err(BenchError::EmptyDataset);
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(BenchError::Config("dataset contains non-finite values".into()));
        }
        Ok(Self {
            x,
            y,
            name: name.into(),
            target_kind,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(rows),
            y: self.y.select_rows(rows),
            name: self.name.clone(),
            target_kind: self.target_kind,
        }
    }

    /// Targets as an `N x 1` matrix.
    pub fn y_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.len(), 1, self.y.as_slice())
    }

    /// Writes the dataset as CSV with header `x0,...,x{D-1},y`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        header.push("y".into());
        w.write_record(&header).map_err(csv_io)?;
        for i in 0..self.len() {
            let mut row: Vec<String> = self.x.row(i).iter().map(|v| format!("{v:e}")).collect();
            row.push(format!("{:e}", self.y[i]));
            w.write_record(&row).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> BenchError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => BenchError::Io(io),
        other => BenchError::Config(format!("{other:?}")),
    }
}

/// Reads a comma-separated file with a header row; the last column is the
/// target. `ordinal` declares the target as ordinal levels.
pub fn load_csv(path: &Path, ordinal: bool) -> Result<Dataset> {
    if !path.exists() {
        return Err(BenchError::FileNotFound(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_io)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            BenchError::Parse {
                line,
                message: e.to_string(),
            }
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let row = record
            .iter()
            .map(|cell| cell.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| BenchError::Parse {
                line,
                message: "unparsable or non-finite field".into(),
            })?;
        if row.len() < 2 {
            return Err(BenchError::Parse {
                line,
                message: "need at least one input column and a target".into(),
            });
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(BenchError::EmptyDataset);
    }
    let d = rows[0].len() - 1;
    let n = rows.len();
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let y = DVector::from_fn(n, |i, _| rows[i][d]);
    let kind = if ordinal {
        TargetKind::OrdinalIndex
    } else if y.iter().all(|&v| v == 0.0 || v == 1.0) {
        TargetKind::Binary
    } else {
        TargetKind::Continuous
    };
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let ds = Dataset::new(x, y, name, kind)?;
    if ds.len() < 2 {
        return Err(BenchError::Config("need at least two rows".into()));
    }
    Ok(ds)
}

/// Shuffled train/test split with `fraction` of the rows in the training set.
pub fn split(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(BenchError::Config(format!("split fraction {fraction} not in (0, 1)")));
    }
    let n = ds.len();
    let n_train = ((n as f64) * fraction).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(BenchError::Config(format!("split of {n} rows at {fraction} leaves a side empty")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((ds.subset(&order[..n_train]), ds.subset(&order[n_train..])))
}

/// How model-space targets relate to the original ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TargetTransform {
    Identity,
    /// `y_model = (y - shift) / scale`.
    Affine { shift: f64, scale: f64 },
    /// Nearest of `bins` evenly spaced levels on `[lo, hi]`, as an index.
    OrdinalGrid { lo: f64, hi: f64, bins: usize },
}

impl TargetTransform {
    pub fn apply(&self, y: f64) -> f64 {
        match *self {
            TargetTransform::Identity => y,
            TargetTransform::Affine { shift, scale } => (y - shift) / scale,
            TargetTransform::OrdinalGrid { lo, hi, bins } => {
                let top = (bins - 1) as f64;
                if hi > lo {
                    ((y - lo) / (hi - lo) * top).round().clamp(0.0, top)
                } else {
                    0.0
                }
            }
        }
    }

    /// `log |dy_model / dy|`, added to model-space log densities to express
    /// them in the original target scale. Zero for discrete targets.
    pub fn log_jacobian(&self) -> f64 {
        match *self {
            TargetTransform::Affine { scale, .. } => -scale.ln(),
            _ => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub target: TargetTransform,
    /// Columns with zero training variance, left as they were.
    pub passthrough: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Fits the normalization on `train` and applies it to both sets. Inputs are
/// standardized per column. Targets are standardized for `gaussian` and
/// `studentt`, mapped to `[0, 1]` for `beta`, and to level indices for
/// `ordinal`.
pub fn normalize(train: &Dataset, test: &Dataset, likelihood: &str, ordinal_bins: usize) -> Result<(Dataset, Dataset, Transform)> {
    if train.is_empty() {
        return Err(BenchError::EmptyDataset);
    }
    if train.dim() != test.dim() {
        return Err(BenchError::Config("train and test have different input dimensions".into()));
    }
    let n = train.len() as f64;
    let mut x_mean = Vec::new();
    let mut x_scale = Vec::new();
    let mut passthrough = Vec::new();
    let mut warnings = Vec::new();
    for j in 0..train.dim() {
        let col = train.x.column(j);
        let mean = col.mean();
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        if sd > 0.0 {
            x_mean.push(mean);
            x_scale.push(sd);
        } else {
            let msg = format!("input column {j} is constant; passed through unscaled");
            warn!("{msg}");
            warnings.push(msg);
            passthrough.push(j);
            x_mean.push(0.0);
            x_scale.push(1.0);
        }
    }
    let y = &train.y;
    let (lo, hi) = (y.min(), y.max());
    let target = match likelihood {
        "gaussian" | "studentt" => {
            let mean = y.mean();
            let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            if sd > 0.0 {
                TargetTransform::Affine { shift: mean, scale: sd }
            } else {
                warnings.push("target is constant; left unscaled".into());
                TargetTransform::Affine { shift: mean, scale: 1.0 }
            }
        }
        "beta" => TargetTransform::Affine {
            shift: lo,
            scale: if hi > lo { hi - lo } else { 1.0 },
        },
        "ordinal" => {
            if ordinal_bins < 2 {
                return Err(BenchError::Config(format!("{ordinal_bins} ordinal bins")));
            }
            TargetTransform::OrdinalGrid { lo, hi, bins: ordinal_bins }
        }
        "bernoulli" => {
            if train.y.iter().chain(test.y.iter()).any(|&v| v != 0.0 && v != 1.0) {
                return Err(BenchError::Config("bernoulli targets must be 0 or 1".into()));
            }
            TargetTransform::Identity
        }
        other => return Err(BenchError::Config(format!("unknown likelihood `{other}`"))),
    };
    let beta = likelihood == "beta";
    let apply = |ds: &Dataset| -> Result<Dataset> {
        let x = DMatrix::from_fn(ds.len(), ds.dim(), |i, j| (ds.x[(i, j)] - x_mean[j]) / x_scale[j]);
        let y = ds.y.map(|v| {
            let t = target.apply(v);
            if beta {
                clip_beta_target(t)
            } else {
                t
            }
        });
        let kind = match likelihood {
            "beta" => TargetKind::UnitInterval,
            "ordinal" => TargetKind::OrdinalIndex,
            _ => ds.target_kind,
        };
        Dataset::new(x, y, ds.name.clone(), kind)
    };
    Ok((
        apply(train)?,
        apply(test)?,
        Transform {
            x_mean,
            x_scale,
            target,
            passthrough,
            warnings,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn loads_small_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "a,b,y\n1,2,0.5\n3,4,1.5\n5,6,2.5\n");
        let ds = load_csv(&p, false).unwrap();
        assert_eq!((ds.len(), ds.dim()), (3, 2));
        assert_eq!(ds.target_kind, TargetKind::Continuous);
        assert_eq!(ds.x[(2, 1)], 6.0);
        assert_eq!(ds.name, "a");
    }

    #[test]
    fn reports_line_of_bad_cell() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "b.csv", "a,y\n1,0\n2,1\n3,0\nfoo,1\n");
        match load_csv(&p, false) {
            Err(BenchError::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn infers_binary_and_ordinal() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "c.csv", "a,y\n1,0\n2,1\n3,0\n");
        assert_eq!(load_csv(&p, false).unwrap().target_kind, TargetKind::Binary);
        assert_eq!(load_csv(&p, true).unwrap().target_kind, TargetKind::OrdinalIndex);
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_csv(&dir.path().join("missing.csv"), false), Err(BenchError::FileNotFound(_))));
        let p = write(&dir, "e.csv", "a,y\n");
        assert!(matches!(load_csv(&p, false), Err(BenchError::EmptyDataset)));
    }

    fn dataset(x: DMatrix<f64>, y: DVector<f64>) -> Dataset {
        Dataset::new(x, y, "t", TargetKind::Continuous).unwrap()
    }

    #[test]
    fn standardized_data_is_unchanged() {
        let x = DMatrix::from_column_slice(4, 1, &[-1.0, 1.0, -1.0, 1.0]);
        let y = DVector::from_row_slice(&[1.0, -1.0, 1.0, -1.0]);
        let ds = dataset(x, y);
        let (a, _, t) = normalize(&ds, &ds, "gaussian", 51).unwrap();
        assert_eq!(a, ds);
        assert_eq!(t.target, TargetTransform::Affine { shift: 0.0, scale: 1.0 });
        assert_eq!(t.target.log_jacobian(), 0.0);
    }

    #[test]
    fn constant_column_passes_through() {
        let x = DMatrix::from_row_slice(3, 2, &[5.0, 1.0, 5.0, 2.0, 5.0, 3.0]);
        let ds = dataset(x, DVector::from_row_slice(&[1.0, 2.0, 3.0]));
        let (a, _, t) = normalize(&ds, &ds, "gaussian", 51).unwrap();
        assert_eq!(t.passthrough, vec![0]);
        assert_eq!(t.warnings.len(), 1);
        assert!(a.x.column(0).iter().all(|&v| v == 5.0));
    }

    #[test]
    fn test_set_uses_training_statistics() {
        let train = dataset(DMatrix::from_column_slice(4, 1, &[0.0, 1.0, 2.0, 3.0]), DVector::from_row_slice(&[1.0, 2.0, 3.0, 4.0]));
        let test = dataset(DMatrix::from_column_slice(3, 1, &[10.0, 11.0, 12.0]), DVector::from_row_slice(&[5.0, 6.0, 7.0]));
        let (a, b, _) = normalize(&train, &test, "studentt", 51).unwrap();
        assert!(a.x.column(0).mean().abs() < 1e-12);
        assert!(b.x.column(0).mean() > 5.0);
        assert!(b.y.mean() > 2.0);
    }

    #[test]
    fn target_maps() {
        let x = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]);
        let ds = dataset(x, DVector::from_row_slice(&[2.0, 3.0, 6.0]));
        let (a, _, t) = normalize(&ds, &ds, "beta", 51).unwrap();
        assert!(a.y.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!((a.y[1] - 0.25).abs() < 1e-15);
        assert!((t.target.log_jacobian() + 4f64.ln()).abs() < 1e-15);
        let (o, _, _) = normalize(&ds, &ds, "ordinal", 5).unwrap();
        assert_eq!(o.y.as_slice(), &[0.0, 1.0, 4.0]);
        assert!(normalize(&ds, &ds, "bernoulli", 5).is_err());
    }

    #[test]
    fn split_is_seeded_partition() {
        let n = 20;
        let ds = dataset(DMatrix::from_fn(n, 1, |i, _| i as f64), DVector::from_fn(n, |i, _| i as f64));
        let (a, b) = split(&ds, 0.9, 3).unwrap();
        let (c, _) = split(&ds, 0.9, 3).unwrap();
        assert_eq!(a, c);
        assert_eq!((a.len(), b.len()), (18, 2));
        let mut all: Vec<f64> = a.y.iter().chain(b.y.iter()).copied().collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..n).map(|i| i as f64).collect::<Vec<_>>());
        assert!(split(&ds, 1.0, 0).is_err());
    }
}
