//! Analytic gradients for softmax cross-entropy classifiers.
//!
//! The softmax head is fused with the cross-entropy loss, so the backward
//! walk starts from `probs - onehot` at the softmax input and propagates
//! through the remaining layers. An optional extra gradient can be injected
//! at an activation boundary; the Siamese fine-tuning uses this to mix the
//! contrastive term into the same backward pass.

use super::{LayerKind, NetworkBase};
use crate::error::{Error, Result};
use crate::scalar::{real, Real};
use crate::tensor::TensorBase;

/// Gradient of a dense layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad<S> {
    pub weights: TensorBase<S>,
    pub bias: TensorBase<S>,
}

/// Per-layer parameter gradients, index-aligned with the network's layers;
/// parameterless layers hold `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientsBase<S> {
    layers: Vec<Option<DenseGrad<S>>>,
}

impl<S: Real> GradientsBase<S> {
    pub(crate) fn from_layers(layers: Vec<Option<DenseGrad<S>>>) -> Self {
        Self { layers }
    }

    pub fn dense(&self, layer: usize) -> Option<&DenseGrad<S>> {
        self.layers.get(layer).and_then(|g| g.as_ref())
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Accumulates another gradient set (used to sum the two Siamese branches).
    pub fn accumulate(&mut self, other: &Self) {
        debug_assert_eq!(self.layers.len(), other.layers.len());
        for (mine, theirs) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some(a), Some(b)) = (mine.as_mut(), theirs.as_ref()) {
                for (x, y) in a.weights.data_mut().iter_mut().zip(b.weights.data()) {
                    *x += *y;
                }
                for (x, y) in a.bias.data_mut().iter_mut().zip(b.bias.data()) {
                    *x += *y;
                }
            }
        }
    }
}

/// Extra gradient injected at an activation boundary during backprop.
pub(crate) struct FeatureGrad<'a, S> {
    /// Boundary index: the gradient applies to the output of layer `boundary - 1`.
    pub boundary: usize,
    pub grad: &'a TensorBase<S>,
    pub scale: S,
}

impl<S: Real> NetworkBase<S> {
    /// Mean cross-entropy loss of the softmax output against target classes.
    pub fn loss(&self, x: &TensorBase<S>, targets: &[usize]) -> Result<S> {
        let acts = self.forward(x)?;
        let probs = acts.last().expect("non-empty activations");
        self.cross_entropy(probs, targets)
    }

    /// Gradient of the single-sample cross-entropy loss w.r.t. every weight
    /// and bias. The network must end in a softmax head.
    pub fn backward(&self, x: &TensorBase<S>, target_class: usize) -> Result<GradientsBase<S>> {
        let acts = self.forward(x)?;
        let (grads, _) = self.backprop(&acts, &[target_class], None)?;
        Ok(grads)
    }

    /// Batch variant: gradients of the mean loss plus the loss value.
    pub fn backward_batch(
        &self,
        x: &TensorBase<S>,
        targets: &[usize],
    ) -> Result<(GradientsBase<S>, S)> {
        let acts = self.forward(x)?;
        self.backprop(&acts, targets, None)
    }

    fn cross_entropy(&self, probs: &TensorBase<S>, targets: &[usize]) -> Result<S> {
        let n = probs.n_rows();
        if targets.len() != n {
            return Err(Error::ShapeMismatch {
                context: "cross-entropy targets".into(),
                expected: format!("{n} labels"),
                got: format!("{}", targets.len()),
            });
        }
        let classes = probs.n_cols();
        let tiny = S::min_positive_value();
        let mut total = S::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= classes {
                return Err(Error::LabelRange {
                    what: "target class",
                    value: t,
                    count: classes,
                });
            }
            total -= probs.row(r)[t].max(tiny).ln();
        }
        Ok(total / real::<S>(n as f64))
    }

    /// Shared backward walk over precomputed activations.
    pub(crate) fn backprop(
        &self,
        acts: &[TensorBase<S>],
        targets: &[usize],
        extra: Option<FeatureGrad<'_, S>>,
    ) -> Result<(GradientsBase<S>, S)> {
        if !self.ends_in_softmax() {
            return Err(Error::UnsupportedHead { op: "backward" });
        }
        let n_layers = self.layers.len();
        debug_assert_eq!(acts.len(), n_layers + 1);
        let probs = &acts[n_layers];
        let loss = self.cross_entropy(probs, targets)?;

        let n = probs.n_rows();
        let inv_n = real::<S>(1.0 / n as f64);

        // Fused softmax + cross-entropy: gradient at the softmax input.
        let mut delta = probs.clone();
        for (r, &t) in targets.iter().enumerate() {
            let row = delta.row_mut(r);
            for v in row.iter_mut() {
                *v *= inv_n;
            }
            row[t] -= inv_n;
        }

        let mut grads: Vec<Option<DenseGrad<S>>> = vec![None; n_layers];
        // Walk layers below the softmax head; `delta` holds dL/d acts[j+1].
        for j in (0..n_layers - 1).rev() {
            if let Some(fg) = &extra {
                if fg.boundary == j + 1 {
                    debug_assert_eq!(fg.grad.shape(), delta.shape());
                    for (d, g) in delta.data_mut().iter_mut().zip(fg.grad.data()) {
                        *d += fg.scale * *g;
                    }
                }
            }
            match &self.layers[j].kind {
                LayerKind::Dense { weights, .. } => {
                    let input = &acts[j];
                    let (d_out, d_in) = (weights.shape()[0], weights.shape()[1]);
                    let mut dw = TensorBase::zeros([d_out, d_in]);
                    let mut db = TensorBase::zeros([d_out]);
                    let mut next = TensorBase::zeros([n, d_in]);
                    for r in 0..n {
                        let drow = delta.row(r);
                        let xrow = input.row(r);
                        let nrow = next.row_mut(r);
                        for (o, &dz) in drow.iter().enumerate().take(d_out) {
                            db.data_mut()[o] += dz;
                            let wrow = weights.row(o);
                            let dwrow = dw.row_mut(o);
                            for i in 0..d_in {
                                dwrow[i] += dz * xrow[i];
                                nrow[i] += dz * wrow[i];
                            }
                        }
                    }
                    grads[j] = Some(DenseGrad {
                        weights: dw,
                        bias: db,
                    });
                    delta = next;
                }
                LayerKind::Relu => {
                    let input = &acts[j];
                    for (d, &x) in delta.data_mut().iter_mut().zip(input.data()) {
                        if x <= S::zero() {
                            *d = S::zero();
                        }
                    }
                }
                LayerKind::Softmax => unreachable!("softmax validated as final layer"),
            }
        }
        Ok((GradientsBase::from_layers(grads), loss))
    }

    /// One SGD step; frozen layers are skipped.
    pub(crate) fn apply_sgd(&mut self, grads: &GradientsBase<S>, lr: S) {
        for (layer, grad) in self.layers.iter_mut().zip(&grads.layers) {
            if !layer.trainable {
                continue;
            }
            if let (LayerKind::Dense { weights, bias }, Some(g)) = (&mut layer.kind, grad) {
                for (w, &dw) in weights.data_mut().iter_mut().zip(g.weights.data()) {
                    *w -= lr * dw;
                }
                for (b, &db) in bias.data_mut().iter_mut().zip(g.bias.data()) {
                    *b -= lr * db;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::{Gradients, Layer, Network, Tensor};

    fn fd_gradient(net: &Network, x: &Tensor, target: usize, layer: usize, idx: usize) -> f64 {
        let eps = 1e-5;
        let plus = net.with_nudged_parameter(layer, idx, eps).unwrap();
        let minus = net.with_nudged_parameter(layer, idx, -eps).unwrap();
        (plus.loss(x, &[target]).unwrap() - minus.loss(x, &[target]).unwrap()) / (2.0 * eps)
    }

    fn relative_error(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn zero_weight_bias_gradient_is_softmax_minus_onehot() {
        let net = Network::new(vec![
            Layer::dense(Tensor::zeros([3, 2]), Tensor::zeros([3])).unwrap(),
            Layer::softmax(),
        ])
        .unwrap();
        let x = Tensor::vector(vec![0.7, -1.3]).unwrap();
        let grads = net.backward(&x, 1).unwrap();
        let bias = &grads.dense(0).unwrap().bias;
        let expected = [1.0 / 3.0, 1.0 / 3.0 - 1.0, 1.0 / 3.0];
        for (g, e) in bias.data().iter().zip(expected) {
            assert!((g - e).abs() < 1e-12);
        }
        // Zero input makes every weight gradient vanish as well.
        let grads = net
            .backward(&Tensor::vector(vec![0.0, 0.0]).unwrap(), 2)
            .unwrap();
        assert!(grads.dense(0).unwrap().weights.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_requires_softmax_head() {
        let net = Network::new(vec![Layer::dense(
            Tensor::zeros([2, 2]),
            Tensor::zeros([2]),
        )
        .unwrap()])
        .unwrap();
        let err = net
            .backward(&Tensor::vector(vec![1.0, 0.0]).unwrap(), 0)
            .unwrap_err();
        assert!(matches!(err, crate::Error::UnsupportedHead { .. }));
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let net = Network::mlp(4, &[6, 5], 3, 17).unwrap();
        let x = Tensor::vector(vec![0.4, -0.9, 1.2, 0.3]).unwrap();
        let target = 2;
        let grads = net.backward(&x, target).unwrap();

        let mut checked = 0;
        while checked < 120 {
            let layer = rng.random_range(0..net.n_layers());
            let count = net.layers()[layer].parameter_count();
            if count == 0 {
                continue;
            }
            let idx = rng.random_range(0..count);
            let dense = grads.dense(layer).unwrap();
            let analytic = if idx < dense.weights.len() {
                dense.weights.data()[idx]
            } else {
                dense.bias.data()[idx - dense.weights.len()]
            };
            let numeric = fd_gradient(&net, &x, target, layer, idx);
            assert!(
                relative_error(analytic, numeric) <= 1e-4,
                "layer {layer} idx {idx}: analytic {analytic} vs numeric {numeric}"
            );
            checked += 1;
        }
    }

    #[test]
    fn batch_gradient_is_mean_of_single_sample_gradients() {
        let net = Network::mlp(3, &[4], 2, 5).unwrap();
        let x = Tensor::from_rows(&[vec![0.1, 0.5, -0.2], vec![1.0, -1.0, 0.3]]).unwrap();
        let (batch, _) = net.backward_batch(&x, &[0, 1]).unwrap();

        let g0 = net
            .backward(&Tensor::vector(vec![0.1, 0.5, -0.2]).unwrap(), 0)
            .unwrap();
        let g1 = net
            .backward(&Tensor::vector(vec![1.0, -1.0, 0.3]).unwrap(), 1)
            .unwrap();
        for layer in 0..net.n_layers() {
            let (Some(b), Some(a0), Some(a1)) =
                (batch.dense(layer), g0.dense(layer), g1.dense(layer))
            else {
                continue;
            };
            for ((bw, w0), w1) in b
                .weights
                .data()
                .iter()
                .zip(a0.weights.data())
                .zip(a1.weights.data())
            {
                assert!((bw - 0.5 * (w0 + w1)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn freezing_does_not_change_computed_gradients() {
        let net = Network::mlp(3, &[4], 2, 5).unwrap();
        let frozen = net.freeze_prefix(2).unwrap();
        let x = Tensor::vector(vec![0.3, 0.3, -0.6]).unwrap();
        let a = net.backward(&x, 1).unwrap();
        let b = frozen.backward(&x, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn backward_rejects_out_of_range_target() {
        let net = Network::mlp(2, &[3], 2, 5).unwrap();
        let err = net
            .backward(&Tensor::vector(vec![0.1, 0.2]).unwrap(), 2)
            .unwrap_err();
        assert!(matches!(err, crate::Error::LabelRange { .. }));
    }

    #[test]
    fn accumulate_sums_dense_grads() {
        let net = Network::mlp(2, &[3], 2, 5).unwrap();
        let x = Tensor::vector(vec![0.4, -0.1]).unwrap();
        let g = net.backward(&x, 0).unwrap();
        let mut sum: Gradients = g.clone();
        sum.accumulate(&g);
        let a = g.dense(0).unwrap();
        let b = sum.dense(0).unwrap();
        for (x, y) in a.weights.data().iter().zip(b.weights.data()) {
            assert_eq!(*y, 2.0 * *x);
        }
    }
}
