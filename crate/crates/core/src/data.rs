//! Datasets with two label systems: a coarse approved task (CT1) and a fine
//! private task (CT2). Every CT2 identity belongs to exactly one CT1 class,
//! mirroring the adversarial setup where knowing the identity determines the
//! approved attribute.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{squared_distance, TensorBase};
use crate::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Feature matrix plus aligned CT1/CT2 labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBase<S> {
    x: TensorBase<S>,
    ct1: Vec<usize>,
    ct2: Vec<usize>,
    n_ct1_classes: usize,
    n_ct2_classes: usize,
}

pub type Dataset = DatasetBase<f64>;

impl<S: Real> DatasetBase<S> {
    /// Validates label ranges and the CT2 -> CT1 consistency invariant.
    pub fn new(
        x: TensorBase<S>,
        ct1: Vec<usize>,
        ct2: Vec<usize>,
        n_ct1_classes: usize,
        n_ct2_classes: usize,
    ) -> Result<Self> {
        let n = x.n_rows();
        if n == 0 || x.is_empty() {
            return Err(Error::EmptyInput("dataset"));
        }
        if ct1.len() != n || ct2.len() != n {
            return Err(Error::ShapeMismatch {
                context: "dataset labels".into(),
                expected: format!("{n} labels"),
                got: format!("ct1 {}, ct2 {}", ct1.len(), ct2.len()),
            });
        }
        if let Some(&bad) = ct1.iter().find(|&&l| l >= n_ct1_classes) {
            return Err(Error::LabelRange {
                what: "ct1",
                value: bad,
                count: n_ct1_classes,
            });
        }
        if let Some(&bad) = ct2.iter().find(|&&l| l >= n_ct2_classes) {
            return Err(Error::LabelRange {
                what: "ct2",
                value: bad,
                count: n_ct2_classes,
            });
        }
        // Identity determines the coarse class.
        let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
        for (&fine, &coarse) in ct2.iter().zip(&ct1) {
            match seen.insert(fine, coarse) {
                Some(prev) if prev != coarse => {
                    return Err(Error::InvalidConfig(format!(
                        "CT2 class {fine} maps to both CT1 {prev} and CT1 {coarse}"
                    )));
                }
                _ => {}
            }
        }
        Ok(Self {
            x,
            ct1,
            ct2,
            n_ct1_classes,
            n_ct2_classes,
        })
    }

    pub fn features(&self) -> &TensorBase<S> {
        &self.x
    }

    pub fn ct1(&self) -> &[usize] {
        &self.ct1
    }

    pub fn ct2(&self) -> &[usize] {
        &self.ct2
    }

    pub fn n_samples(&self) -> usize {
        self.x.n_rows()
    }

    pub fn dim(&self) -> usize {
        self.x.n_cols()
    }

    pub fn n_ct1_classes(&self) -> usize {
        self.n_ct1_classes
    }

    pub fn n_ct2_classes(&self) -> usize {
        self.n_ct2_classes
    }

    pub fn row(&self, i: usize) -> &[S] {
        self.x.row(i)
    }

    /// Sub-dataset at the given row indices, preserving order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            self.x.gather_rows(indices),
            indices.iter().map(|&i| self.ct1[i]).collect(),
            indices.iter().map(|&i| self.ct2[i]).collect(),
            self.n_ct1_classes,
            self.n_ct2_classes,
        )
    }

    /// Row indices grouped by CT2 class, in ascending class order.
    pub fn rows_by_ct2(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &c) in self.ct2.iter().enumerate() {
            map.entry(c).or_default().push(i);
        }
        map
    }
}

/// Synthetic Gaussian-mixture benchmark configuration.
///
/// CT2 is the cluster index; CT1 is the cluster index mod 2, so identities
/// balance across the two coarse classes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_identities: usize,
    pub samples_per_identity: usize,
    pub dim: usize,
    pub cluster_spread: f64,
    pub seed: u64,
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.n_identities == 0 || !self.n_identities.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "n_identities must be even and positive, got {}",
                self.n_identities
            )));
        }
        if self.samples_per_identity == 0 {
            return Err(Error::InvalidConfig(
                "samples_per_identity must be > 0".into(),
            ));
        }
        if self.dim == 0 {
            return Err(Error::InvalidConfig("dim must be > 0".into()));
        }
        if !self.cluster_spread.is_finite() || self.cluster_spread < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "cluster_spread must be >= 0, got {}",
                self.cluster_spread
            )));
        }
        Ok(())
    }
}

/// Draws `n_identities` Gaussian clusters with centers uniform in `[-1, 1]^dim`
/// and `samples_per_identity` points per cluster. Deterministic per seed.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers: Vec<Vec<f64>> = (0..cfg.n_identities)
        .map(|_| (0..cfg.dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();

    let n = cfg.n_identities * cfg.samples_per_identity;
    let mut data = Vec::with_capacity(n * cfg.dim);
    let mut ct1 = Vec::with_capacity(n);
    let mut ct2 = Vec::with_capacity(n);
    let noise = Normal::new(0.0, cfg.cluster_spread)
        .map_err(|e| Error::InvalidConfig(format!("cluster_spread: {e}")))?;
    for (identity, center) in centers.iter().enumerate() {
        for _ in 0..cfg.samples_per_identity {
            for &c in center {
                let eps = if cfg.cluster_spread > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                data.push(c + eps);
            }
            ct2.push(identity);
            ct1.push(identity % 2);
        }
    }
    Dataset::new(
        Tensor::new([n, cfg.dim], data)?,
        ct1,
        ct2,
        2,
        cfg.n_identities,
    )
}

/// Nearest-centroid CT2 accuracy; the oracle used to confirm a generated
/// benchmark is separable before training anything on it.
pub fn nearest_centroid_accuracy(data: &Dataset) -> f64 {
    let by_class = data.rows_by_ct2();
    let d = data.dim();
    let centroids: Vec<(usize, Vec<f64>)> = by_class
        .iter()
        .map(|(&c, rows)| {
            let mut centroid = vec![0.0; d];
            for &r in rows {
                for (acc, v) in centroid.iter_mut().zip(data.row(r)) {
                    *acc += v;
                }
            }
            for v in &mut centroid {
                *v /= rows.len() as f64;
            }
            (c, centroid)
        })
        .collect();

    let mut hits = 0usize;
    for i in 0..data.n_samples() {
        let row = data.row(i);
        let best = centroids
            .iter()
            .min_by(|(_, a), (_, b)| {
                squared_distance(row, a)
                    .partial_cmp(&squared_distance(row, b))
                    .expect("finite distances")
            })
            .map(|(c, _)| *c)
            .expect("at least one class");
        if best == data.ct2[i] {
            hits += 1;
        }
    }
    hits as f64 / data.n_samples() as f64
}

/// Writes the CSV schema `f0..f{d-1},ct1,ct2`. Floats use the shortest
/// representation that parses back to the same bits.
pub fn save_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut line = String::new();
    for i in 0..data.dim() {
        if i > 0 {
            line.push(',');
        }
        let _ = write!(line, "f{i}");
    }
    line.push_str(",ct1,ct2");
    writeln!(w, "{line}").map_err(|e| Error::io(format!("write {}", path.display()), e))?;
    for r in 0..data.n_samples() {
        line.clear();
        for (i, v) in data.row(r).iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            let _ = write!(line, "{v}");
        }
        let _ = write!(line, ",{},{}", data.ct1[r], data.ct2[r]);
        writeln!(w, "{line}").map_err(|e| Error::io(format!("write {}", path.display()), e))?;
    }
    Ok(())
}

/// Loads the `f0..f{d-1},ct1,ct2` schema, inferring class counts from the
/// labels present. Row numbers in errors are 1-based file lines.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    load_csv_impl(path.as_ref(), None)
}

/// Like [`load_csv`] but validates labels against declared class counts, so
/// an out-of-range label is a parse error with its row number.
pub fn load_csv_declared(
    path: impl AsRef<Path>,
    n_ct1_classes: usize,
    n_ct2_classes: usize,
) -> Result<Dataset> {
    load_csv_impl(path.as_ref(), Some((n_ct1_classes, n_ct2_classes)))
}

fn load_csv_impl(path: &Path, declared: Option<(usize, usize)>) -> Result<Dataset> {
    let parse_err = |row: usize, message: String| Error::CsvParse {
        path: path.to_path_buf(),
        row,
        message,
    };
    let file =
        std::fs::File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let mut lines = BufReader::new(file).lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header row".into()))?;
    let header = header.map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    if cols.len() < 3 || cols[cols.len() - 2] != "ct1" || cols[cols.len() - 1] != "ct2" {
        return Err(parse_err(
            1,
            "header must be f0..f{d-1},ct1,ct2".into(),
        ));
    }
    let d = cols.len() - 2;
    for (i, col) in cols[..d].iter().enumerate() {
        if *col != format!("f{i}") {
            return Err(parse_err(1, format!("expected column f{i}, found {col:?}")));
        }
    }

    let mut data = Vec::new();
    let mut ct1 = Vec::new();
    let mut ct2 = Vec::new();
    for (idx, line) in lines {
        let row = idx + 1; // 1-based file line
        let line = line.map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != d + 2 {
            return Err(parse_err(
                row,
                format!("expected {} fields, found {}", d + 2, fields.len()),
            ));
        }
        for (c, field) in fields[..d].iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(row, format!("non-numeric value {field:?} in f{c}")))?;
            if !v.is_finite() {
                return Err(parse_err(row, format!("non-finite value in f{c}")));
            }
            data.push(v);
        }
        let parse_label = |name: &str, field: &str| -> Result<usize> {
            field
                .parse::<usize>()
                .map_err(|_| parse_err(row, format!("invalid {name} label {field:?}")))
        };
        let l1 = parse_label("ct1", fields[d])?;
        let l2 = parse_label("ct2", fields[d + 1])?;
        if let Some((c1, t)) = declared {
            if l1 >= c1 {
                return Err(parse_err(row, format!("ct1 label {l1} out of range (C1={c1})")));
            }
            if l2 >= t {
                return Err(parse_err(row, format!("ct2 label {l2} out of range (T={t})")));
            }
        }
        ct1.push(l1);
        ct2.push(l2);
    }
    if ct1.is_empty() {
        return Err(Error::EmptyInput("CSV data section"));
    }
    let n = ct1.len();
    let (c1, t) = declared.unwrap_or_else(|| {
        (
            ct1.iter().max().map_or(0, |m| m + 1),
            ct2.iter().max().map_or(0, |m| m + 1),
        )
    });
    Dataset::new(Tensor::new([n, d], data)?, ct1, ct2, c1, t)
}

/// Stratified train/test split: every CT2 class lands in both halves, with
/// per-class train share within one sample of `fraction`.
pub fn split_train_test(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "split fraction must be in (0, 1), got {fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut rows) in data.rows_by_ct2() {
        if rows.len() < 2 {
            return Err(Error::Stratify {
                class,
                count: rows.len(),
            });
        }
        rows.shuffle(&mut rng);
        let want = (fraction * rows.len() as f64).round() as usize;
        let n_train = want.clamp(1, rows.len() - 1);
        train.extend_from_slice(&rows[..n_train]);
        test.extend_from_slice(&rows[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((data.subset(&train)?, data.subset(&test)?))
}
