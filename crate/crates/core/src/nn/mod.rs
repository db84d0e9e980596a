//! Minimal feedforward networks: dense/relu/softmax layers, forward pass,
//! exact analytic gradients and a mini-batch SGD training loop.
//!
//! Networks are immutable once trained; concurrent read-only forward passes
//! are safe. Layers carry a `trainable` flag so a prefix can be frozen for
//! transfer-learning experiments without touching gradient computation.

mod backprop;
mod train;

pub use backprop::{DenseGrad, GradientsBase};
pub(crate) use backprop::FeatureGrad;
pub use train::{train_classifier, TrainConfig, TrainReport};

use crate::error::{Error, Result};
use crate::scalar::{real, Real};
use crate::tensor::TensorBase;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Layer payload: dense affine map, elementwise ReLU, or row softmax.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind<S> {
    /// `y = W x + b` with `W` of shape `[out, in]` and `b` of shape `[out]`.
    Dense {
        weights: TensorBase<S>,
        bias: TensorBase<S>,
    },
    Relu,
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerBase<S> {
    pub(crate) kind: LayerKind<S>,
    pub(crate) trainable: bool,
}

impl<S: Real> LayerBase<S> {
    pub fn dense(weights: TensorBase<S>, bias: TensorBase<S>) -> Result<Self> {
        if weights.rank() != 2 {
            return Err(Error::ShapeMismatch {
                context: "dense weights".into(),
                expected: "rank-2 tensor [out, in]".into(),
                got: format!("{:?}", weights.shape()),
            });
        }
        let out = weights.shape()[0];
        if out == 0 || weights.shape()[1] == 0 {
            return Err(Error::InvalidConfig("dense layer dims must be > 0".into()));
        }
        if bias.shape() != [out] {
            return Err(Error::ShapeMismatch {
                context: "dense bias".into(),
                expected: format!("[{out}]"),
                got: format!("{:?}", bias.shape()),
            });
        }
        Ok(Self {
            kind: LayerKind::Dense { weights, bias },
            trainable: true,
        })
    }

    pub fn relu() -> Self {
        Self {
            kind: LayerKind::Relu,
            trainable: true,
        }
    }

    pub fn softmax() -> Self {
        Self {
            kind: LayerKind::Softmax,
            trainable: true,
        }
    }

    pub fn kind(&self) -> &LayerKind<S> {
        &self.kind
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            LayerKind::Dense { .. } => "dense",
            LayerKind::Relu => "relu",
            LayerKind::Softmax => "softmax",
        }
    }

    /// Number of trainable scalars (weights then bias for dense layers).
    pub fn parameter_count(&self) -> usize {
        match &self.kind {
            LayerKind::Dense { weights, bias } => weights.len() + bias.len(),
            _ => 0,
        }
    }
}

/// Ordered layer stack with validated dimension composition.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkBase<S> {
    pub(crate) layers: Vec<LayerBase<S>>,
    pub(crate) input_dim: usize,
    pub(crate) output_dim: usize,
}

impl<S: Real> NetworkBase<S> {
    /// Builds a network, inferring the input dimension from the first dense
    /// layer. Fails when no layer pins the dimensions.
    pub fn new(layers: Vec<LayerBase<S>>) -> Result<Self> {
        let inferred = layers.iter().find_map(|l| match &l.kind {
            LayerKind::Dense { weights, .. } => Some(weights.shape()[1]),
            _ => None,
        });
        match inferred {
            Some(dim) => Self::with_input_dim(layers, dim),
            None => Err(Error::InvalidConfig(
                "cannot infer input dimension: no dense layer present (use with_input_dim)".into(),
            )),
        }
    }

    /// Builds a network with an explicit input dimension (needed when the
    /// stack starts with shapeless layers, e.g. the back half of a split).
    pub fn with_input_dim(layers: Vec<LayerBase<S>>, input_dim: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("network must have at least one layer".into()));
        }
        if input_dim == 0 {
            return Err(Error::InvalidConfig("input dimension must be > 0".into()));
        }
        let mut cur = input_dim;
        let last = layers.len() - 1;
        for (i, layer) in layers.iter().enumerate() {
            match &layer.kind {
                LayerKind::Dense { weights, .. } => {
                    let (out, inp) = (weights.shape()[0], weights.shape()[1]);
                    if inp != cur {
                        return Err(Error::LayerDim {
                            layer: i,
                            kind: "dense",
                            expected: inp,
                            got: cur,
                        });
                    }
                    cur = out;
                }
                LayerKind::Relu => {}
                LayerKind::Softmax => {
                    if i != last {
                        return Err(Error::InvalidConfig(format!(
                            "softmax allowed only as the final layer (found at index {i})"
                        )));
                    }
                }
            }
        }
        Ok(Self {
            layers,
            input_dim,
            output_dim: cur,
        })
    }

    /// Standard classifier stack: dense+relu per hidden width, then a dense
    /// projection to `n_classes` and a softmax head. Weights use seeded
    /// Xavier-uniform init, biases start at zero.
    pub fn mlp(input_dim: usize, hidden: &[usize], n_classes: usize, seed: u64) -> Result<Self> {
        if n_classes == 0 {
            return Err(Error::InvalidConfig("n_classes must be > 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(hidden.len() * 2 + 2);
        let mut cur = input_dim;
        for &h in hidden {
            layers.push(xavier_dense(cur, h, &mut rng)?);
            layers.push(LayerBase::relu());
            cur = h;
        }
        layers.push(xavier_dense(cur, n_classes, &mut rng)?);
        layers.push(LayerBase::softmax());
        Self::with_input_dim(layers, input_dim)
    }

    pub fn layers(&self) -> &[LayerBase<S>] {
        &self.layers
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn ends_in_softmax(&self) -> bool {
        matches!(
            self.layers.last().map(|l| &l.kind),
            Some(LayerKind::Softmax)
        )
    }

    /// Runs the full forward pass.
    ///
    /// Accepts a `[d]` vector or `[n, d]` batch and returns one `[n, d_l]`
    /// activation per layer plus the input, so `out.len() == n_layers() + 1`
    /// and `out[0]` is the (matrix-shaped) input.
    pub fn forward(&self, x: &TensorBase<S>) -> Result<Vec<TensorBase<S>>> {
        let x = x.as_matrix();
        if x.n_cols() != self.input_dim {
            return Err(Error::LayerDim {
                layer: 0,
                kind: self.layers[0].kind_name(),
                expected: self.input_dim,
                got: x.n_cols(),
            });
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x);
        for (i, layer) in self.layers.iter().enumerate() {
            let prev = acts.last().expect("non-empty");
            let next = apply_layer(layer, prev);
            next.check_finite(&format!("output of layer {i} ({})", layer.kind_name()))?;
            acts.push(next);
        }
        Ok(acts)
    }

    /// Network output only; a vector input yields a vector output.
    pub fn predict(&self, x: &TensorBase<S>) -> Result<TensorBase<S>> {
        let out = self.forward(x)?.pop().expect("at least the input");
        if x.rank() == 1 {
            let d = out.n_cols();
            TensorBase::new([d], out.data().to_vec())
        } else {
            Ok(out)
        }
    }

    /// Argmax class per row of the network output.
    pub fn predict_classes(&self, x: &TensorBase<S>) -> Result<Vec<usize>> {
        let out = self.forward(x)?.pop().expect("at least the input");
        Ok((0..out.n_rows())
            .map(|r| crate::tensor::argmax(out.row(r)))
            .collect())
    }

    /// Fraction of rows whose argmax prediction matches `labels`.
    pub fn accuracy(&self, x: &TensorBase<S>, labels: &[usize]) -> Result<f64> {
        let preds = self.predict_classes(x)?;
        let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }

    /// Returns a copy with the first `i` layers marked non-trainable and the
    /// rest trainable; subsequent training never alters frozen parameters.
    pub fn freeze_prefix(&self, i: usize) -> Result<Self> {
        if i > self.layers.len() {
            return Err(Error::IndexRange {
                what: "freeze prefix",
                index: i,
                range: format!("0..={}", self.layers.len()),
            });
        }
        let mut net = self.clone();
        for (idx, layer) in net.layers.iter_mut().enumerate() {
            layer.trainable = idx >= i;
        }
        Ok(net)
    }

    /// Clone with one dense parameter nudged by `delta`; `idx` addresses the
    /// flattened `[weights..., bias...]` vector of that layer. Supports
    /// finite-difference oracles without exposing raw mutable state.
    pub fn with_nudged_parameter(&self, layer: usize, idx: usize, delta: S) -> Result<Self> {
        let mut net = self.clone();
        let l = net.layers.get_mut(layer).ok_or(Error::IndexRange {
            what: "layer",
            index: layer,
            range: format!("0..{}", self.layers.len()),
        })?;
        match &mut l.kind {
            LayerKind::Dense { weights, bias } => {
                let nw = weights.len();
                if idx < nw {
                    weights.data_mut()[idx] += delta;
                } else if idx - nw < bias.len() {
                    bias.data_mut()[idx - nw] += delta;
                } else {
                    return Err(Error::IndexRange {
                        what: "dense parameter",
                        index: idx,
                        range: format!("0..{}", nw + bias.len()),
                    });
                }
            }
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "layer {layer} has no parameters"
                )))
            }
        }
        Ok(net)
    }

    /// Concatenates two validated stacks (used to reassemble splits and to
    /// put an attack head on a frozen front).
    pub fn concat(front: &Self, back: &Self) -> Result<Self> {
        let mut layers = front.layers.clone();
        layers.extend(back.layers.iter().cloned());
        Self::with_input_dim(layers, front.input_dim)
    }

    /// Dimension of the activation crossing boundary `b` (output of layer
    /// `b-1`; `b = 0` is the network input).
    pub fn activation_dim(&self, boundary: usize) -> Result<usize> {
        if boundary > self.layers.len() {
            return Err(Error::IndexRange {
                what: "activation boundary",
                index: boundary,
                range: format!("0..={}", self.layers.len()),
            });
        }
        let mut cur = self.input_dim;
        for layer in &self.layers[..boundary] {
            if let LayerKind::Dense { weights, .. } = &layer.kind {
                cur = weights.shape()[0];
            }
        }
        Ok(cur)
    }
}

fn apply_layer<S: Real>(layer: &LayerBase<S>, x: &TensorBase<S>) -> TensorBase<S> {
    match &layer.kind {
        LayerKind::Dense { weights, bias } => {
            let (n, d_in) = (x.n_rows(), x.n_cols());
            let d_out = weights.shape()[0];
            debug_assert_eq!(d_in, weights.shape()[1]);
            let mut out = TensorBase::zeros([n, d_out]);
            for r in 0..n {
                let xr = x.row(r);
                let or = out.row_mut(r);
                for (o, v) in or.iter_mut().enumerate() {
                    let wr = weights.row(o);
                    let mut acc = bias.data()[o];
                    for i in 0..d_in {
                        acc += wr[i] * xr[i];
                    }
                    *v = acc;
                }
            }
            out
        }
        LayerKind::Relu => {
            let mut out = x.clone();
            for v in out.data_mut() {
                if *v < S::zero() {
                    *v = S::zero();
                }
            }
            out
        }
        LayerKind::Softmax => {
            let mut out = x.clone();
            let n = out.n_rows();
            for r in 0..n {
                let row = out.row_mut(r);
                let max = row.iter().copied().fold(S::neg_infinity(), S::max);
                let mut sum = S::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            out
        }
    }
}

fn xavier_dense<S: Real>(
    in_dim: usize,
    out_dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LayerBase<S>> {
    use rand::Rng;
    if in_dim == 0 || out_dim == 0 {
        return Err(Error::InvalidConfig("dense layer dims must be > 0".into()));
    }
    let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
    let data: Vec<S> = (0..in_dim * out_dim)
        .map(|_| real::<S>(a * (2.0 * rng.random::<f64>() - 1.0)))
        .collect();
    let weights = TensorBase::new([out_dim, in_dim], data)?;
    let bias = TensorBase::zeros([out_dim]);
    LayerBase::dense(weights, bias)
}
