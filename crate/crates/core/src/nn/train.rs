//! Mini-batch SGD training for softmax classifiers.

use super::NetworkBase;
use crate::error::{Error, Result};
use crate::scalar::{real, to_f64, Real};
use crate::tensor::TensorBase;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Plain SGD hyperparameters. With a fixed seed the result is
/// bit-reproducible: the seed drives only the batch shuffling here, weight
/// init is seeded at network construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    fn validate(&self, n_samples: usize) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be > 0".into()));
        }
        if self.batch_size > n_samples {
            return Err(Error::InvalidConfig(format!(
                "batch_size {} exceeds dataset size {}",
                self.batch_size, n_samples
            )));
        }
        Ok(())
    }
}

/// Training loss per epoch (mean cross-entropy over the epoch's batches).
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
}

/// Trains `net` on `(x, labels)` with mini-batch SGD and returns the trained
/// network plus the recorded loss curve. `epochs = 0` returns the network
/// unchanged. Frozen layers are never updated.
pub fn train_classifier<S: Real>(
    x: &TensorBase<S>,
    labels: &[usize],
    mut net: NetworkBase<S>,
    cfg: &TrainConfig,
) -> Result<(NetworkBase<S>, TrainReport)> {
    let n = x.n_rows();
    if x.is_empty() || labels.is_empty() {
        return Err(Error::EmptyInput("training dataset"));
    }
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            context: "training labels".into(),
            expected: format!("{n} labels"),
            got: format!("{}", labels.len()),
        });
    }
    if x.n_cols() != net.input_dim() {
        return Err(Error::ShapeMismatch {
            context: "training features".into(),
            expected: format!("dim {}", net.input_dim()),
            got: format!("dim {}", x.n_cols()),
        });
    }
    if !net.ends_in_softmax() {
        return Err(Error::UnsupportedHead {
            op: "train_classifier",
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= net.output_dim()) {
        return Err(Error::LabelRange {
            what: "training label",
            value: bad,
            count: net.output_dim(),
        });
    }
    cfg.validate(n)?;

    let lr = real::<S>(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut report = TrainReport::default();

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let bx = x.gather_rows(chunk);
            let bl: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let acts = net.forward(&bx)?;
            let (grads, loss) = net.backprop(&acts, &bl, None)?;
            net.apply_sgd(&grads, lr);
            total += to_f64(loss) * chunk.len() as f64;
        }
        let epoch_loss = total / n as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        report.epoch_loss.push(epoch_loss);
    }
    Ok((net, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Network, Tensor};

    /// Two linearly separable blobs with a wide margin.
    fn blobs(n_per: usize, seed: u64) -> (Tensor, Vec<usize>) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..2usize {
            let center = if c == 0 { -2.0 } else { 2.0 };
            for _ in 0..n_per {
                rows.push(vec![
                    center + 0.1 * (rng.random::<f64>() - 0.5),
                    center + 0.1 * (rng.random::<f64>() - 0.5),
                ]);
                labels.push(c);
            }
        }
        (Tensor::from_rows(&rows).unwrap(), labels)
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: 0.1,
            epochs,
            batch_size: 8,
            seed: 3,
        }
    }

    #[test]
    fn separable_blobs_reach_high_accuracy() {
        let (x, labels) = blobs(40, 1);
        let net = Network::mlp(2, &[8], 2, 2).unwrap();
        let (trained, report) = train_classifier(&x, &labels, net, &cfg(30)).unwrap();
        assert!(trained.accuracy(&x, &labels).unwrap() >= 0.99);
        assert_eq!(report.epoch_loss.len(), 30);
    }

    #[test]
    fn zero_epochs_returns_network_unchanged() {
        let (x, labels) = blobs(10, 1);
        let net = Network::mlp(2, &[4], 2, 2).unwrap();
        let (out, report) = train_classifier(&x, &labels, net.clone(), &cfg(0)).unwrap();
        assert_eq!(out, net);
        assert!(report.epoch_loss.is_empty());
    }

    #[test]
    fn same_seed_gives_bit_identical_parameters() {
        let (x, labels) = blobs(20, 7);
        let a = train_classifier(&x, &labels, Network::mlp(2, &[8], 2, 4).unwrap(), &cfg(5))
            .unwrap()
            .0;
        let b = train_classifier(&x, &labels, Network::mlp(2, &[8], 2, 4).unwrap(), &cfg(5))
            .unwrap()
            .0;
        assert_eq!(a, b);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let x = Tensor::zeros([0, 2]);
        let err =
            train_classifier(&x, &[], Network::mlp(2, &[4], 2, 2).unwrap(), &cfg(1)).unwrap_err();
        assert!(matches!(err, Error::EmptyInput(_)));
    }

    #[test]
    fn oversized_batch_is_rejected() {
        let (x, labels) = blobs(2, 1); // 4 samples
        let mut c = cfg(1);
        c.batch_size = 5;
        let err =
            train_classifier(&x, &labels, Network::mlp(2, &[4], 2, 2).unwrap(), &c).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }

    #[test]
    fn frozen_prefix_parameters_survive_training_bit_exactly() {
        let (x, labels) = blobs(20, 5);
        let net = Network::mlp(2, &[8, 4], 2, 9).unwrap().freeze_prefix(2).unwrap();
        let before = net.layers()[0].clone();
        let mut c = cfg(10);
        c.epochs = 10;
        let (trained, _) = train_classifier(&x, &labels, net, &c).unwrap();
        assert_eq!(trained.layers()[0], before);
        // Unfrozen tail did move.
        assert!(trained.layers()[2..].iter().any(|l| l.parameter_count() > 0));
    }

    #[test]
    fn loss_is_non_increasing_over_first_epoch_at_small_lr() {
        // Smoke property: full-batch gradient descent at lr = 1e-3 on
        // normalized data cannot increase the loss it just descended.
        let (x, labels) = blobs(30, 11);
        let net = Network::mlp(2, &[8], 2, 6).unwrap();
        let before = net.loss(&x, &labels).unwrap();
        let c = TrainConfig {
            learning_rate: 1e-3,
            epochs: 1,
            batch_size: 60,
            seed: 1,
        };
        let (trained, _) = train_classifier(&x, &labels, net, &c).unwrap();
        let after = trained.loss(&x, &labels).unwrap();
        assert!(after <= before, "loss rose from {before} to {after}");
    }
}
