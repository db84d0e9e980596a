//! PCA over intermediate features: fit on the training set, project on the
//! client, reconstruct on the server.
//!
//! The eigendecomposition is a cyclic Jacobi sweep over the d x d covariance
//! rather than an external SVD: feature dims are small here and the artifact
//! files must come out identical on every platform. The sign of each
//! component is fixed by making its largest-magnitude entry positive.

use crate::error::{Error, Result};
use crate::nn::LayerBase;
use crate::scalar::{real, Real};
use crate::tensor::TensorBase;

/// Mean vector plus top-k principal axes (orthonormal rows, descending
/// eigenvalue order). Immutable after fit; concurrent use is safe.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaTransformBase<S> {
    mean: TensorBase<S>,        // [d]
    components: TensorBase<S>,  // [k, d]
    eigenvalues: TensorBase<S>, // [k]
    total_variance: S,
}

pub type PcaTransform = PcaTransformBase<f64>;

impl<S: Real> PcaTransformBase<S> {
    /// Assembles a transform from parts, validating row orthonormality
    /// (within 1e-8) and the eigenvalue ordering invariant.
    pub fn new(
        mean: TensorBase<S>,
        components: TensorBase<S>,
        eigenvalues: TensorBase<S>,
        total_variance: S,
    ) -> Result<Self> {
        if components.rank() != 2 {
            return Err(Error::ShapeMismatch {
                context: "PCA components".into(),
                expected: "[k, d]".into(),
                got: format!("{:?}", components.shape()),
            });
        }
        let (k, d) = (components.shape()[0], components.shape()[1]);
        if mean.shape() != [d] || eigenvalues.shape() != [k] || k == 0 || k > d {
            return Err(Error::ShapeMismatch {
                context: "PCA transform".into(),
                expected: format!("mean [{d}], eigenvalues [{k}], k <= d"),
                got: format!(
                    "mean {:?}, eigenvalues {:?}",
                    mean.shape(),
                    eigenvalues.shape()
                ),
            });
        }
        // 1e-8 for f64; wider scalars cannot hit that, so scale by epsilon.
        let tol = real::<S>(1e-8).max(S::epsilon() * real::<S>(100.0));
        for i in 0..k {
            for j in i..k {
                let dot = dot(components.row(i), components.row(j));
                let want = if i == j { S::one() } else { S::zero() };
                if (dot - want).abs() > tol {
                    return Err(Error::InvalidConfig(format!(
                        "PCA components not orthonormal: <c{i}, c{j}> = {dot}"
                    )));
                }
            }
        }
        let ev = eigenvalues.data();
        if ev.iter().any(|&l| l < S::zero()) || ev.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::InvalidConfig(
                "PCA eigenvalues must be nonnegative and non-increasing".into(),
            ));
        }
        Ok(Self {
            mean,
            components,
            eigenvalues,
            total_variance,
        })
    }

    pub fn dim(&self) -> usize {
        self.components.shape()[1]
    }

    pub fn k(&self) -> usize {
        self.components.shape()[0]
    }

    pub fn mean(&self) -> &TensorBase<S> {
        &self.mean
    }

    pub fn components(&self) -> &TensorBase<S> {
        &self.components
    }

    pub fn eigenvalues(&self) -> &TensorBase<S> {
        &self.eigenvalues
    }

    /// Sum of all covariance eigenvalues of the fitting data (kept or not).
    pub fn total_variance(&self) -> S {
        self.total_variance
    }

    /// Variance captured by the kept components.
    pub fn explained_variance(&self) -> S {
        self.eigenvalues.data().iter().copied().sum()
    }

    /// `z = components * (x - mean)`.
    pub fn project(&self, x: &TensorBase<S>) -> Result<TensorBase<S>> {
        self.check_dim(x, self.dim(), "project")?;
        let centered: Vec<S> = x
            .data()
            .iter()
            .zip(self.mean.data())
            .map(|(&v, &m)| v - m)
            .collect();
        let z: Vec<S> = (0..self.k())
            .map(|i| dot(self.components.row(i), &centered))
            .collect();
        TensorBase::new([self.k()], z)
    }

    /// Row-wise projection of an `[n, d]` batch to `[n, k]`.
    pub fn project_batch(&self, x: &TensorBase<S>) -> Result<TensorBase<S>> {
        let x = x.as_matrix();
        self.check_dim(&x, self.dim(), "project")?;
        let (n, k) = (x.n_rows(), self.k());
        let mut out = TensorBase::zeros([n, k]);
        let mut centered = vec![S::zero(); self.dim()];
        for r in 0..n {
            for ((c, &v), &m) in centered.iter_mut().zip(x.row(r)).zip(self.mean.data()) {
                *c = v - m;
            }
            let row = out.row_mut(r);
            for (i, slot) in row.iter_mut().enumerate() {
                *slot = dot(self.components.row(i), &centered);
            }
        }
        Ok(out)
    }

    /// `x_hat = components^T * z + mean`.
    pub fn reconstruct(&self, z: &TensorBase<S>) -> Result<TensorBase<S>> {
        self.check_dim(z, self.k(), "reconstruct")?;
        let mut out = self.mean.data().to_vec();
        for (i, &zi) in z.data().iter().enumerate() {
            for (o, &c) in out.iter_mut().zip(self.components.row(i)) {
                *o += zi * c;
            }
        }
        TensorBase::new([self.dim()], out)
    }

    /// Row-wise reconstruction of an `[n, k]` batch to `[n, d]`.
    pub fn reconstruct_batch(&self, z: &TensorBase<S>) -> Result<TensorBase<S>> {
        let z = z.as_matrix();
        self.check_dim(&z, self.k(), "reconstruct")?;
        let (n, d) = (z.n_rows(), self.dim());
        let mut out = TensorBase::zeros([n, d]);
        for r in 0..n {
            let row = out.row_mut(r);
            row.copy_from_slice(self.mean.data());
            for (i, &zi) in z.row(r).iter().enumerate() {
                for (o, &c) in row.iter_mut().zip(self.components.row(i)) {
                    *o += zi * c;
                }
            }
        }
        Ok(out)
    }

    /// The projection as a frozen dense layer (`W = components`,
    /// `b = -components * mean`), so a PCA step can sit inside a network
    /// stack for transfer-attack evaluation.
    pub fn to_dense_layer(&self) -> LayerBase<S> {
        let bias: Vec<S> = (0..self.k())
            .map(|i| -dot(self.components.row(i), self.mean.data()))
            .collect();
        let mut layer = LayerBase::dense(
            self.components.clone(),
            TensorBase::new([self.k()], bias).expect("k-length bias"),
        )
        .expect("validated shapes");
        layer = LayerBase {
            trainable: false,
            ..layer
        };
        layer
    }

    fn check_dim(&self, t: &TensorBase<S>, want: usize, op: &str) -> Result<()> {
        if t.n_cols() != want {
            return Err(Error::ShapeMismatch {
                context: format!("PCA {op}"),
                expected: format!("dim {want}"),
                got: format!("dim {}", t.n_cols()),
            });
        }
        Ok(())
    }
}

/// Fits PCA on `[n, d]` features: mean = column means, components = top-k
/// eigenvectors of the sample covariance (divisor `n - 1`).
pub fn fit_pca<S: Real>(features: &TensorBase<S>, k: usize) -> Result<PcaTransformBase<S>> {
    let x = features.as_matrix();
    let (n, d) = (x.n_rows(), x.n_cols());
    if n < 2 {
        return Err(Error::InvalidConfig(format!(
            "PCA needs at least 2 samples, got {n}"
        )));
    }
    let max_k = n.min(d);
    if k == 0 || k > max_k {
        return Err(Error::PcaDim {
            requested: k,
            max: max_k,
        });
    }

    let inv_n = real::<S>(1.0 / n as f64);
    let mut mean = vec![S::zero(); d];
    for r in 0..n {
        for (m, &v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m *= inv_n;
    }

    // Sample covariance, divisor n - 1.
    let inv_nm1 = real::<S>(1.0 / (n - 1) as f64);
    let mut cov = vec![S::zero(); d * d];
    let mut centered = vec![S::zero(); d];
    for r in 0..n {
        for ((c, &v), &m) in centered.iter_mut().zip(x.row(r)).zip(&mean) {
            *c = v - m;
        }
        for i in 0..d {
            let ci = centered[i];
            for j in i..d {
                cov[i * d + j] += ci * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] * inv_nm1;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    let total_variance = (0..d).map(|i| cov[i * d + i]).sum::<S>();

    let (eigenvalues, vectors) = jacobi_eigen(cov, d);

    // Usable rank by the standard numerical criterion: eigenvalues above
    // lambda_max * eps * d carry signal, the rest are roundoff.
    let lambda_max = eigenvalues.first().copied().unwrap_or_else(S::zero);
    let rank_tol = lambda_max * S::epsilon() * real::<S>(d as f64);
    let usable = eigenvalues.iter().filter(|&&l| l > rank_tol).count();
    if k > usable {
        return Err(Error::RankDeficient {
            requested: k,
            usable,
        });
    }

    let mut comp = Vec::with_capacity(k * d);
    for row in vectors.iter().take(k) {
        comp.extend_from_slice(row);
    }
    PcaTransformBase::new(
        TensorBase::new([d], mean)?,
        TensorBase::new([k, d], comp)?,
        TensorBase::new([k], eigenvalues[..k].to_vec())?,
        total_variance,
    )
}

fn dot<S: Real>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Returns eigenvalues in descending order (clamped at zero: the covariance
/// is positive semidefinite, tiny negatives are roundoff) and matching unit
/// eigenvectors as rows with the largest-magnitude entry made positive.
fn jacobi_eigen<S: Real>(mut a: Vec<S>, d: usize) -> (Vec<S>, Vec<Vec<S>>) {
    let mut v = vec![S::zero(); d * d];
    for i in 0..d {
        v[i * d + i] = S::one();
    }

    let frob = a.iter().map(|&x| x * x).sum::<S>().sqrt();
    let tol = frob.max(S::min_positive_value()) * S::epsilon();

    for _sweep in 0..200 {
        let mut off = S::zero();
        for p in 0..d {
            for q in (p + 1)..d {
                off += a[p * d + q] * a[p * d + q];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..d.saturating_sub(1) {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq.abs() <= S::min_positive_value() {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (real::<S>(2.0) * apq);
                let t = {
                    let sign = if theta < S::zero() { -S::one() } else { S::one() };
                    sign / (theta.abs() + (S::one() + theta * theta).sqrt())
                };
                let c = S::one() / (S::one() + t * t).sqrt();
                let s = t * c;

                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| {
        a[j * d + j]
            .partial_cmp(&a[i * d + i])
            .expect("finite eigenvalues")
            .then(i.cmp(&j))
    });

    let eigenvalues: Vec<S> = order
        .iter()
        .map(|&i| a[i * d + i].max(S::zero()))
        .collect();
    let vectors: Vec<Vec<S>> = order
        .iter()
        .map(|&col| {
            let mut row: Vec<S> = (0..d).map(|r| v[r * d + col]).collect();
            let mut pivot = 0;
            for (i, x) in row.iter().enumerate() {
                if x.abs() > row[pivot].abs() {
                    pivot = i;
                }
            }
            if row[pivot] < S::zero() {
                for x in &mut row {
                    *x = -*x;
                }
            }
            row
        })
        .collect();
    (eigenvalues, vectors)
}
