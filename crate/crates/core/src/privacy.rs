//! Privacy instruments for the transmitted feature.
//!
//! Two independent measurements:
//!
//! * **Transfer-learning attack**: copy and freeze the client-side layers,
//!   train a fresh head on the fine-grained CT2 labels, and report held-out
//!   CT2 accuracy. High accuracy means the feature still carries identity.
//! * **Likelihood-rank measure**: model the noise mechanism explicitly:
//!   the likelihood of CT2 class `c` given a noisy feature `z` is the sample
//!   mean of isotropic Gaussian kernels centered at that class's clean
//!   features. The privacy of `z` is the number of classes strictly more
//!   likely than the true one, divided by the class count `T`. This is model
//!   independent: no attacker network enters the computation.
//!
//! Likelihoods are accumulated in log space (log-sum-exp) so small sigmas in
//! ten-ish dimensions survive; ranks are invariant under the log transform.

use crate::data::{split_train_test, Dataset};
use crate::embedding::{classify_features, extract_features_batch, EmbeddingSet, Variant};
use crate::error::{Error, Result};
use crate::nn::{train_classifier, TrainConfig};
use crate::tensor::squared_distance;
use crate::{Network, Tensor};
use rayon::prelude::*;
use std::fmt::Write as _;
use std::path::Path;

/// Outcome of a transfer-learning attack.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferResult {
    /// Held-out CT2 accuracy of the attack head.
    pub ct2_accuracy: f64,
    /// Random-guessing level `1 / T`.
    pub chance_level: f64,
    /// Number of frozen (copied) layers, including a PCA layer when present.
    pub frozen_layers: usize,
}

/// Per-point likelihood-rank privacy values and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyReport {
    pub per_point: Vec<f64>,
    pub privacy_total: f64,
    pub sigma: f64,
    pub n_ct2_classes: usize,
    /// CT1 accuracy measured at the same operating point, when a classifier
    /// was run alongside the privacy evaluation.
    pub ct1_accuracy: Option<f64>,
}

impl PrivacyReport {
    pub fn with_ct1_accuracy(mut self, accuracy: f64) -> Self {
        self.ct1_accuracy = Some(accuracy);
        self
    }
}

/// Runs the four-step transfer procedure: copy the front, freeze it, attach
/// a randomly initialized head, train on CT2. The dataset is split 80/20
/// (stratified by CT2, seeded from `cfg.seed`) and accuracy is reported on
/// the held-out part.
pub fn transfer_attack(
    front: &Network,
    data: &Dataset,
    head: Network,
    cfg: &TrainConfig,
) -> Result<TransferResult> {
    let t = data.n_ct2_classes();
    if head.output_dim() != t {
        return Err(Error::ShapeMismatch {
            context: "attack head".into(),
            expected: format!("{t} outputs"),
            got: format!("{}", head.output_dim()),
        });
    }
    let frozen_layers = front.n_layers();
    let combined = Network::concat(front, &head)?.freeze_prefix(frozen_layers)?;

    let (train, test) = split_train_test(data, 0.8, cfg.seed)?;
    let (trained, _) = train_classifier(train.features(), train.ct2(), combined, cfg)?;
    let ct2_accuracy = trained.accuracy(test.features(), test.ct2())?;
    Ok(TransferResult {
        ct2_accuracy,
        chance_level: 1.0 / t as f64,
        frozen_layers,
    })
}

/// Log of the estimated class likelihood
/// `P(z | c) = mean over class members of N(z; x_j, sigma^2 I)`.
pub fn log_likelihood(
    z: &[f64],
    class: usize,
    features: &Tensor,
    ct2_labels: &[usize],
    sigma: f64,
) -> Result<f64> {
    if sigma <= 0.0 {
        return Err(Error::DegenerateKernel);
    }
    let features = features.as_matrix();
    let k = features.n_cols();
    if z.len() != k {
        return Err(Error::ShapeMismatch {
            context: "likelihood query point".into(),
            expected: format!("dim {k}"),
            got: format!("dim {}", z.len()),
        });
    }
    let inv_two_var = 1.0 / (2.0 * sigma * sigma);
    let mut exponents = Vec::new();
    for (r, &label) in ct2_labels.iter().enumerate() {
        if label == class {
            exponents.push(-squared_distance(z, features.row(r)) * inv_two_var);
        }
    }
    if exponents.is_empty() {
        return Err(Error::UndefinedClass(class));
    }
    let n_members = exponents.len() as f64;
    let log_norm = -(k as f64 / 2.0) * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
    Ok(log_sum_exp(&exponents) - n_members.ln() + log_norm)
}

/// Linear-space likelihood; may underflow to zero for small sigma, which is
/// why ranking uses [`log_likelihood`].
pub fn likelihood(
    z: &[f64],
    class: usize,
    features: &Tensor,
    ct2_labels: &[usize],
    sigma: f64,
) -> Result<f64> {
    Ok(log_likelihood(z, class, features, ct2_labels, sigma)?.exp())
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Log likelihood of every class in one pass over the reference rows
/// (`None` for classes with no members). Same math as [`log_likelihood`],
/// shared-scan form.
pub fn class_log_likelihoods(
    z: &[f64],
    features: &Tensor,
    ct2_labels: &[usize],
    sigma: f64,
    t: usize,
) -> Result<Vec<Option<f64>>> {
    if sigma <= 0.0 {
        return Err(Error::DegenerateKernel);
    }
    let features = features.as_matrix();
    let k = features.n_cols();
    if z.len() != k {
        return Err(Error::ShapeMismatch {
            context: "likelihood query point".into(),
            expected: format!("dim {k}"),
            got: format!("dim {}", z.len()),
        });
    }
    if let Some(&bad) = ct2_labels.iter().find(|&&l| l >= t) {
        return Err(Error::LabelRange {
            what: "reference ct2",
            value: bad,
            count: t,
        });
    }
    let inv_two_var = 1.0 / (2.0 * sigma * sigma);
    let log_norm = -(k as f64 / 2.0) * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
    let mut exponents: Vec<Vec<f64>> = vec![Vec::new(); t];
    for (r, &label) in ct2_labels.iter().enumerate() {
        exponents[label].push(-squared_distance(z, features.row(r)) * inv_two_var);
    }
    Ok(exponents
        .into_iter()
        .map(|exps| {
            if exps.is_empty() {
                None
            } else {
                Some(log_sum_exp(&exps) - (exps.len() as f64).ln() + log_norm)
            }
        })
        .collect())
}

/// Likelihood rank of the true class: the count of classes strictly more
/// likely than `correct_class` given `z`, divided by `T`. Ties do not raise
/// the rank. Classes absent from the reference set contribute nothing.
pub fn privacy_of_point(
    z: &[f64],
    correct_class: usize,
    features: &Tensor,
    ct2_labels: &[usize],
    sigma: f64,
    t: usize,
) -> Result<f64> {
    if t == 0 {
        return Err(Error::InvalidConfig("T must be > 0".into()));
    }
    if correct_class >= t {
        return Err(Error::LabelRange {
            what: "correct class",
            value: correct_class,
            count: t,
        });
    }
    let lls = class_log_likelihoods(z, features, ct2_labels, sigma, t)?;
    let own = lls[correct_class].ok_or(Error::UndefinedClass(correct_class))?;
    let rank = lls
        .iter()
        .enumerate()
        .filter(|&(c, ll)| c != correct_class && matches!(ll, Some(v) if *v > own))
        .count();
    Ok(rank as f64 / t as f64)
}

/// Mean likelihood-rank privacy over a batch of noisy points. Per-point
/// evaluation is pure, so rows run in parallel; output order matches input
/// order.
pub fn privacy_total(
    noisy: &Tensor,
    noisy_classes: &[usize],
    features: &Tensor,
    ct2_labels: &[usize],
    sigma: f64,
    t: usize,
) -> Result<PrivacyReport> {
    let noisy = noisy.as_matrix();
    let n = noisy.n_rows();
    if n == 0 {
        return Err(Error::EmptyInput("privacy evaluation points"));
    }
    if noisy_classes.len() != n {
        return Err(Error::ShapeMismatch {
            context: "privacy point classes".into(),
            expected: format!("{n} labels"),
            got: format!("{}", noisy_classes.len()),
        });
    }
    let per_point: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|r| privacy_of_point(noisy.row(r), noisy_classes[r], features, ct2_labels, sigma, t))
        .collect::<Result<_>>()?;
    let privacy_total = per_point.iter().sum::<f64>() / n as f64;
    Ok(PrivacyReport {
        per_point,
        privacy_total,
        sigma,
        n_ct2_classes: t,
        ct1_accuracy: None,
    })
}

/// One operating point of an accuracy-privacy curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub sigma: f64,
    pub privacy_total: f64,
    pub ct1_accuracy: f64,
    pub variant: Variant,
    pub split: usize,
    /// `sigma_zero` on the conventional zero-noise row, empty otherwise.
    pub flag: &'static str,
}

/// Sweeps the sigma grid for one embedding variant, averaging privacy and
/// CT1 accuracy over `n_draws` noise seeds per point. The privacy reference
/// set is the variant's own clean reduced features of `data`; each draw
/// scores the same noisy features it classifies.
///
/// A `sigma = 0` grid entry cannot feed the likelihood kernel; by convention
/// its row reports privacy 0 and is flagged `sigma_zero`.
pub fn accuracy_privacy_curve(
    variant: Variant,
    models: &EmbeddingSet,
    data: &Dataset,
    sigma_grid: &[f64],
    n_draws: usize,
    seed: u64,
    split: usize,
) -> Result<Vec<CurvePoint>> {
    if sigma_grid.is_empty() {
        return Err(Error::EmptyInput("sigma grid"));
    }
    if n_draws == 0 {
        return Err(Error::InvalidConfig("n_draws must be > 0".into()));
    }
    let (sm, pca) = models.select(variant)?;
    let clean = extract_features_batch(&sm.front, pca, 0.0, data.features(), 0)?;
    let t = data.n_ct2_classes();

    let mut points = Vec::with_capacity(sigma_grid.len());
    for (gi, &sigma) in sigma_grid.iter().enumerate() {
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(Error::InvalidConfig(format!("sigma must be >= 0, got {sigma}")));
        }
        if sigma == 0.0 {
            let probs = classify_features(&sm.back, pca, &clean)?;
            let acc = accuracy_against(&probs, data.ct1());
            points.push(CurvePoint {
                sigma,
                privacy_total: 0.0,
                ct1_accuracy: acc,
                variant,
                split,
                flag: "sigma_zero",
            });
            continue;
        }
        let mut privacy_sum = 0.0;
        let mut acc_sum = 0.0;
        for draw in 0..n_draws {
            let draw_seed = seed
                .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(gi as u64 + 1))
                .wrapping_add(draw as u64);
            let noisy = extract_features_batch(&sm.front, pca, sigma, data.features(), draw_seed)?;
            let report = privacy_total(&noisy, data.ct2(), &clean, data.ct2(), sigma, t)?;
            privacy_sum += report.privacy_total;
            let probs = classify_features(&sm.back, pca, &noisy)?;
            acc_sum += accuracy_against(&probs, data.ct1());
        }
        points.push(CurvePoint {
            sigma,
            privacy_total: privacy_sum / n_draws as f64,
            ct1_accuracy: acc_sum / n_draws as f64,
            variant,
            split,
            flag: "",
        });
    }
    Ok(points)
}

fn accuracy_against(probs: &Tensor, labels: &[usize]) -> f64 {
    let hits = (0..probs.n_rows())
        .filter(|&r| crate::tensor::argmax(probs.row(r)) == labels[r])
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// A `transfer_results.csv` row.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferRow {
    pub frozen_layers: usize,
    pub variant: Variant,
    pub ct2_accuracy: f64,
    pub chance: f64,
}

/// Writes `transfer_results.csv`: `frozen_layers,variant,ct2_accuracy,chance`.
pub fn write_transfer_csv(rows: &[TransferRow], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("frozen_layers,variant,ct2_accuracy,chance\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.frozen_layers,
            r.variant.name(),
            r.ct2_accuracy,
            r.chance
        );
    }
    let path = path.as_ref();
    std::fs::write(path, out).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

/// Writes `curve.csv`: `sigma,privacy_total,ct1_accuracy,variant,split,flag`.
pub fn write_curve_csv(points: &[CurvePoint], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("sigma,privacy_total,ct1_accuracy,variant,split,flag\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            p.sigma,
            p.privacy_total,
            p.ct1_accuracy,
            p.variant.name(),
            p.split,
            p.flag
        );
    }
    let path = path.as_ref();
    std::fs::write(path, out).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

/// Reads back a `curve.csv` produced by [`write_curve_csv`].
pub fn read_curve_csv(path: impl AsRef<Path>) -> Result<Vec<CurvePoint>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    let parse_err = |row: usize, message: String| Error::CsvParse {
        path: path.to_path_buf(),
        row,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "sigma,privacy_total,ct1_accuracy,variant,split,flag")) => {}
        other => {
            return Err(parse_err(
                1,
                format!("unexpected curve.csv header: {:?}", other.map(|(_, h)| h)),
            ))
        }
    }
    let mut points = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row = idx + 1;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(parse_err(row, format!("expected 6 fields, got {}", f.len())));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| parse_err(row, format!("bad number {s:?}")))
        };
        points.push(CurvePoint {
            sigma: num(f[0])?,
            privacy_total: num(f[1])?,
            ct1_accuracy: num(f[2])?,
            variant: f[3].parse()?,
            split: f[4]
                .parse()
                .map_err(|_| parse_err(row, format!("bad split {:?}", f[4])))?,
            flag: match f[5] {
                "sigma_zero" => "sigma_zero",
                "" => "",
                other => return Err(parse_err(row, format!("unknown flag {other:?}"))),
            },
        });
    }
    Ok(points)
}
