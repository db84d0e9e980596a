//! Siamese fine-tuning of a trained CT1 classifier.
//!
//! Pairs are labeled similar/dissimilar by their CT1 class and are always
//! cross-identity, so the contrastive term pulls features of *different*
//! identities with the same coarse class together, the many-to-one mapping
//! that erodes CT2 decision borders. The total loss per pair is the CT1
//! classification loss of both elements plus `lambda` times the contrastive
//! loss at the chosen intermediate layer; both branches share one parameter
//! set and their gradients are summed.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::FeatureGrad;
use crate::scalar::{real, to_f64, Real};
use crate::tensor::TensorBase;
use crate::{Network, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// A sampled training pair of dataset rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    /// Same CT1 class. Generated pairs always differ in CT2.
    pub similar: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SiameseConfig {
    /// Contrastive margin, in units of the pre-fine-tuning mean feature norm.
    pub margin: f64,
    /// Weight of the contrastive term; 0 reduces to plain classification
    /// fine-tuning and the contrastive loss is never computed.
    pub lambda_contrastive: f64,
    /// Boundary index of the intermediate layer: the contrastive loss acts on
    /// the output of layer `split_layer - 1`, matching the split index used
    /// when the network is divided between client and server.
    pub split_layer: usize,
    pub pairs_per_epoch: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl SiameseConfig {
    fn validate(&self, net: &Network) -> Result<()> {
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "margin must be > 0, got {}",
                self.margin
            )));
        }
        if !self.lambda_contrastive.is_finite() || self.lambda_contrastive < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "lambda_contrastive must be >= 0, got {}",
                self.lambda_contrastive
            )));
        }
        if self.split_layer >= net.n_layers() {
            return Err(Error::IndexRange {
                what: "split_layer",
                index: self.split_layer,
                range: format!("0..{}", net.n_layers()),
            });
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.pairs_per_epoch == 0 {
            return Err(Error::InvalidConfig("pairs_per_epoch must be > 0".into()));
        }
        Ok(())
    }
}

/// Contrastive loss of a feature pair plus its exact gradients.
///
/// Similar pairs pay the squared distance; dissimilar pairs pay
/// `max(0, margin - distance)^2`. The subgradient at the hinge corner (and at
/// coincident dissimilar points, where the distance direction is undefined)
/// is zero.
pub fn contrastive_loss<S: Real>(
    f1: &TensorBase<S>,
    f2: &TensorBase<S>,
    similar: bool,
    margin: S,
) -> Result<(S, TensorBase<S>, TensorBase<S>)> {
    if f1.shape() != f2.shape() {
        return Err(Error::ShapeMismatch {
            context: "contrastive features".into(),
            expected: format!("{:?}", f1.shape()),
            got: format!("{:?}", f2.shape()),
        });
    }
    let diff: Vec<S> = f1
        .data()
        .iter()
        .zip(f2.data())
        .map(|(&a, &b)| a - b)
        .collect();
    let dist_sq: S = diff.iter().map(|&v| v * v).sum();
    let two = real::<S>(2.0);

    let (loss, coeff) = if similar {
        // L = ||f1 - f2||^2, dL/df1 = 2 (f1 - f2).
        (dist_sq, two)
    } else {
        let dist = dist_sq.sqrt();
        let slack = margin - dist;
        if slack <= S::zero() || dist == S::zero() {
            (slack.max(S::zero()) * slack.max(S::zero()), S::zero())
        } else {
            // L = (margin - dist)^2, dL/df1 = -2 (margin - dist)/dist (f1 - f2).
            (slack * slack, -two * slack / dist)
        }
    };

    let g1: Vec<S> = diff.iter().map(|&v| coeff * v).collect();
    let g2: Vec<S> = g1.iter().map(|&v| -v).collect();
    Ok((
        loss,
        TensorBase::new(f1.shape(), g1)?,
        TensorBase::new(f1.shape(), g2)?,
    ))
}

/// Samples a deterministic 50/50 mix of similar and dissimilar cross-identity
/// pairs, alternating similar/dissimilar in the output.
pub fn sample_pairs(data: &Dataset, n_pairs: usize, seed: u64) -> Result<Vec<Pair>> {
    // Identities per CT1 class; similar pairs need two identities to cross.
    let mut identities_by_ct1: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (&fine, &coarse) in data.ct2().iter().zip(data.ct1()) {
        let ids = identities_by_ct1.entry(coarse).or_default();
        if !ids.contains(&fine) {
            ids.push(fine);
        }
    }
    if n_pairs == 0 {
        return Ok(Vec::new());
    }
    if let Some((&class, ids)) = identities_by_ct1.iter().find(|(_, ids)| ids.len() < 2) {
        return Err(Error::PairSampling(format!(
            "CT1 class {class} has {} identit{}; similar cross-identity pairs need at least 2",
            ids.len(),
            if ids.len() == 1 { "y" } else { "ies" },
        )));
    }
    if identities_by_ct1.len() < 2 {
        return Err(Error::PairSampling(
            "dissimilar pairs need at least 2 CT1 classes".into(),
        ));
    }

    let n = data.n_samples();
    let ct1 = data.ct1();
    let ct2 = data.ct2();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows_by_ct1: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in ct1.iter().enumerate() {
        rows_by_ct1.entry(c).or_default().push(i);
    }

    let n_similar = n_pairs / 2;
    let mut pairs = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let similar = i < 2 * n_similar && i % 2 == 0;
        let a = rng.random_range(0..n);
        let b = if similar {
            let peers = &rows_by_ct1[&ct1[a]];
            draw_until(&mut rng, peers, |row| ct2[row] != ct2[a])
        } else {
            draw_until(&mut rng, &(0..n).collect::<Vec<_>>(), |row| {
                ct1[row] != ct1[a]
            })
        };
        pairs.push(Pair { a, b, similar });
    }
    Ok(pairs)
}

/// Rejection-samples from `pool` until `accept` holds; falls back to a
/// deterministic scan if the cap is hit (possible only under extreme class
/// imbalance).
fn draw_until(rng: &mut ChaCha8Rng, pool: &[usize], accept: impl Fn(usize) -> bool) -> usize {
    for _ in 0..10_000 {
        let cand = pool[rng.random_range(0..pool.len())];
        if accept(cand) {
            return cand;
        }
    }
    let start = rng.random_range(0..pool.len());
    for off in 0..pool.len() {
        let cand = pool[(start + off) % pool.len()];
        if accept(cand) {
            return cand;
        }
    }
    unreachable!("pair sampling preconditions guarantee an acceptable candidate");
}

/// Mean intermediate-feature norm at the boundary, used to make the margin
/// scale-free.
pub fn mean_feature_norm(net: &Network, data: &Dataset, boundary: usize) -> Result<f64> {
    let acts = net.forward(data.features())?;
    let feats = &acts[boundary];
    let n = feats.n_rows();
    let total: f64 = (0..n)
        .map(|r| to_f64(feats.row(r).iter().map(|&v| v * v).sum::<f64>().sqrt()))
        .sum();
    Ok(total / n as f64)
}

/// Fine-tunes a trained CT1 network with the joint classification +
/// contrastive objective. Returns a network of identical architecture.
pub fn finetune_siamese(net: Network, data: &Dataset, cfg: &SiameseConfig) -> Result<Network> {
    cfg.validate(&net)?;
    if data.n_ct1_classes() != net.output_dim() {
        return Err(Error::ShapeMismatch {
            context: "siamese fine-tuning".into(),
            expected: format!("network with {} outputs", data.n_ct1_classes()),
            got: format!("{}", net.output_dim()),
        });
    }

    // Margin is stated relative to the pre-fine-tuning feature scale.
    let scale = mean_feature_norm(&net, data, cfg.split_layer)?;
    let margin = if scale > 0.0 {
        cfg.margin * scale
    } else {
        cfg.margin
    };

    let mut net = net;
    let lr = cfg.learning_rate;
    let lambda = cfg.lambda_contrastive;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.epochs {
        let pair_seed = rng.random::<u64>();
        let pairs = sample_pairs(data, cfg.pairs_per_epoch, pair_seed)?;
        for pair in pairs {
            let (grads, _) = pair_gradients(&net, data, &pair, cfg.split_layer, lambda, margin)?;
            net.apply_sgd(&grads, lr);
        }
    }
    Ok(net)
}

/// Summed gradients of the joint loss over one pair, plus the loss value.
/// Exposed so tests can verify branch symmetry and the lambda = 0 reduction.
pub fn pair_gradients(
    net: &Network,
    data: &Dataset,
    pair: &Pair,
    split_layer: usize,
    lambda: f64,
    margin: f64,
) -> Result<(crate::Gradients, f64)> {
    let xa = Tensor::new([1, data.dim()], data.row(pair.a).to_vec())?;
    let xb = Tensor::new([1, data.dim()], data.row(pair.b).to_vec())?;
    let acts_a = net.forward(&xa)?;
    let acts_b = net.forward(&xb)?;

    let (closs, ga, gb) = if lambda > 0.0 {
        let (l, ga, gb) = contrastive_loss(
            &acts_a[split_layer],
            &acts_b[split_layer],
            pair.similar,
            margin,
        )?;
        (l, Some(ga), Some(gb))
    } else {
        (0.0, None, None)
    };

    let spec_a = ga.as_ref().map(|g| FeatureGrad {
        boundary: split_layer,
        grad: g,
        scale: lambda,
    });
    let (mut grads, loss_a) = net.backprop(&acts_a, &[data.ct1()[pair.a]], spec_a)?;
    let spec_b = gb.as_ref().map(|g| FeatureGrad {
        boundary: split_layer,
        grad: g,
        scale: lambda,
    });
    let (grads_b, loss_b) = net.backprop(&acts_b, &[data.ct1()[pair.b]], spec_b)?;
    grads.accumulate(&grads_b);
    Ok((grads, loss_a + loss_b + lambda * closs))
}

/// Ratio of mean intra-CT1 to mean inter-CT1 feature distance at the
/// boundary, measured over sampled cross-identity pairs. Siamese fine-tuning
/// should shrink it.
pub fn cluster_ratio(net: &Network, data: &Dataset, boundary: usize, seed: u64) -> Result<f64> {
    let pairs = sample_pairs(data, 400, seed)?;
    let acts = net.forward(data.features())?;
    let feats = &acts[boundary];
    let (mut intra, mut inter) = ((0.0, 0usize), (0.0, 0usize));
    for p in pairs {
        let d = crate::tensor::squared_distance(feats.row(p.a), feats.row(p.b)).sqrt();
        if p.similar {
            intra = (intra.0 + d, intra.1 + 1);
        } else {
            inter = (inter.0 + d, inter.1 + 1);
        }
    }
    Ok((intra.0 / intra.1.max(1) as f64) / (inter.0 / inter.1.max(1) as f64).max(1e-300))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SynthConfig};
    use crate::nn::{train_classifier, TrainConfig};

    fn vec2(a: f64, b: f64) -> Tensor {
        Tensor::vector(vec![a, b]).unwrap()
    }

    #[test]
    fn identical_similar_pair_has_zero_loss_and_gradients() {
        let f = vec2(1.0, -2.0);
        let (loss, g1, g2) = contrastive_loss(&f, &f, true, 1.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g1.data().iter().all(|&v| v == 0.0));
        assert!(g2.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn similar_loss_is_squared_distance() {
        // ||(0,0)-(3,4)|| = 5 so the similar loss is 25.
        let (loss, g1, _) = contrastive_loss(&vec2(0.0, 0.0), &vec2(3.0, 4.0), true, 1.0).unwrap();
        assert_eq!(loss, 25.0);
        assert_eq!(g1.data(), &[-6.0, -8.0]); // 2 (f1 - f2)
    }

    #[test]
    fn dissimilar_loss_is_squared_hinge_on_margin() {
        let f1 = vec2(0.0, 0.0);
        let f2 = vec2(3.0, 4.0);
        let (loss, _, _) = contrastive_loss(&f1, &f2, false, 6.0).unwrap();
        assert!((loss - 1.0).abs() < 1e-12); // (6 - 5)^2
        let (loss, g1, g2) = contrastive_loss(&f1, &f2, false, 5.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g1.data().iter().all(|&v| v == 0.0));
        assert!(g2.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn loss_is_nonnegative_and_zero_beyond_margin() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let f1 = vec2(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let f2 = vec2(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let similar = rng.random::<bool>();
            let margin = rng.random_range(0.1..4.0);
            let (loss, _, _) = contrastive_loss(&f1, &f2, similar, margin).unwrap();
            assert!(loss >= 0.0);
            if !similar {
                let dist = crate::tensor::squared_distance(f1.data(), f2.data()).sqrt();
                if dist >= margin {
                    assert_eq!(loss, 0.0);
                }
            }
        }
    }

    #[test]
    fn dissimilar_loss_decreases_with_distance_similar_increases() {
        let margin = 3.0;
        let mut last_dis = f64::INFINITY;
        let mut last_sim = -1.0;
        for step in 1..=10 {
            let x = 0.3 * step as f64;
            let f2 = vec2(x, 0.0);
            let (dis, _, _) = contrastive_loss(&vec2(0.0, 0.0), &f2, false, margin).unwrap();
            let (sim, _, _) = contrastive_loss(&vec2(0.0, 0.0), &f2, true, margin).unwrap();
            assert!(dis <= last_dis);
            assert!(sim > last_sim);
            last_dis = dis;
            last_sim = sim;
        }
    }

    #[test]
    fn contrastive_gradients_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let eps = 1e-6;
        let mut checked = 0;
        while checked < 100 {
            let f1v: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let f2v: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let similar = rng.random::<bool>();
            let margin = rng.random_range(0.5..3.0);
            let dist = crate::tensor::squared_distance(&f1v, &f2v).sqrt();
            if !similar && (dist - margin).abs() <= 1e-3 {
                continue; // hinge corner excluded from the check
            }
            let f1 = Tensor::vector(f1v.clone()).unwrap();
            let f2 = Tensor::vector(f2v.clone()).unwrap();
            let (_, g1, g2) = contrastive_loss(&f1, &f2, similar, margin).unwrap();
            for i in 0..3 {
                let mut plus = f1v.clone();
                plus[i] += eps;
                let mut minus = f1v.clone();
                minus[i] -= eps;
                let lp = contrastive_loss(&Tensor::vector(plus).unwrap(), &f2, similar, margin)
                    .unwrap()
                    .0;
                let lm = contrastive_loss(&Tensor::vector(minus).unwrap(), &f2, similar, margin)
                    .unwrap()
                    .0;
                let numeric = (lp - lm) / (2.0 * eps);
                let analytic = g1.data()[i];
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(rel <= 1e-4, "df1[{i}] analytic {analytic} numeric {numeric}");
            }
            // Gradient w.r.t. f2 is the negation by symmetry of the distance.
            for (a, b) in g1.data().iter().zip(g2.data()) {
                assert_eq!(*a, -*b);
            }
            checked += 1;
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let err = contrastive_loss(
            &vec2(0.0, 0.0),
            &Tensor::vector(vec![1.0]).unwrap(),
            true,
            1.0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    fn four_identity_data() -> Dataset {
        generate(&SynthConfig {
            n_identities: 4,
            samples_per_identity: 6,
            dim: 3,
            cluster_spread: 0.05,
            seed: 2,
        })
        .unwrap()
    }

    #[test]
    fn two_lone_identities_cannot_form_similar_pairs() {
        let data = generate(&SynthConfig {
            n_identities: 2,
            samples_per_identity: 5,
            dim: 2,
            cluster_spread: 0.1,
            seed: 1,
        })
        .unwrap();
        let err = sample_pairs(&data, 10, 3).unwrap_err();
        assert!(matches!(err, Error::PairSampling(_)));
    }

    #[test]
    fn mod2_similar_pairs_cross_identities_within_class() {
        // T=4 with mod-2 CT1: similar pairs can only join identities
        // {0,2} or {1,3}.
        let data = four_identity_data();
        let pairs = sample_pairs(&data, 200, 7).unwrap();
        for p in &pairs {
            assert_ne!(p.a, p.b);
            assert_ne!(data.ct2()[p.a], data.ct2()[p.b], "pairs are cross-identity");
            assert_eq!(p.similar, data.ct1()[p.a] == data.ct1()[p.b]);
            if p.similar {
                let ids = [data.ct2()[p.a], data.ct2()[p.b]];
                assert!(ids == [0, 2] || ids == [2, 0] || ids == [1, 3] || ids == [3, 1]);
            }
        }
    }

    #[test]
    fn pair_mix_is_exactly_half_similar() {
        let data = four_identity_data();
        let pairs = sample_pairs(&data, 1000, 9).unwrap();
        let similar = pairs.iter().filter(|p| p.similar).count();
        assert_eq!(similar, 500);
        assert_eq!(pairs.len(), 1000);
        // Deterministic per seed.
        assert_eq!(pairs, sample_pairs(&data, 1000, 9).unwrap());
        assert_ne!(pairs, sample_pairs(&data, 1000, 10).unwrap());
    }

    fn trained_ct1_net(data: &Dataset, seed: u64) -> Network {
        let net = Network::mlp(data.dim(), &[8, 6], data.n_ct1_classes(), seed).unwrap();
        train_classifier(
            data.features(),
            data.ct1(),
            net,
            &TrainConfig {
                learning_rate: 0.1,
                epochs: 15,
                batch_size: 8,
                seed,
            },
        )
        .unwrap()
        .0
    }

    fn siamese_cfg(lambda: f64) -> SiameseConfig {
        SiameseConfig {
            margin: 1.0,
            lambda_contrastive: lambda,
            split_layer: 2,
            pairs_per_epoch: 120,
            epochs: 4,
            learning_rate: 0.02,
            seed: 31,
        }
    }

    #[test]
    fn symmetric_pair_gives_equal_branch_gradients() {
        let data = four_identity_data();
        let net = trained_ct1_net(&data, 5);
        // Force f1 == f2 by pairing a row with itself (test-only probe).
        let pair = Pair {
            a: 0,
            b: 0,
            similar: true,
        };
        let (sum, _) = pair_gradients(&net, &data, &pair, 2, 1.0, 1.0).unwrap();
        let single = net
            .backward(
                &Tensor::new([1, data.dim()], data.row(0).to_vec()).unwrap(),
                data.ct1()[0],
            )
            .unwrap();
        // Contrastive gradients vanish at f1 == f2, so the sum is twice the
        // classification gradient of either branch.
        for layer in 0..net.n_layers() {
            if let (Some(s), Some(g)) = (sum.dense(layer), single.dense(layer)) {
                for (a, b) in s.weights.data().iter().zip(g.weights.data()) {
                    assert!((a - 2.0 * b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn lambda_zero_reduces_to_classification_finetuning() {
        let data = four_identity_data();
        let net = trained_ct1_net(&data, 6);
        let tuned = finetune_siamese(net.clone(), &data, &siamese_cfg(0.0)).unwrap();

        // Replicate the exact update sequence with the contrastive term
        // structurally absent.
        let mut expect = net;
        let cfg = siamese_cfg(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for _ in 0..cfg.epochs {
            let pair_seed = rand::Rng::random::<u64>(&mut rng);
            for pair in sample_pairs(&data, cfg.pairs_per_epoch, pair_seed).unwrap() {
                let xa = Tensor::new([1, data.dim()], data.row(pair.a).to_vec()).unwrap();
                let xb = Tensor::new([1, data.dim()], data.row(pair.b).to_vec()).unwrap();
                let mut g = expect.backward(&xa, data.ct1()[pair.a]).unwrap();
                g.accumulate(&expect.backward(&xb, data.ct1()[pair.b]).unwrap());
                expect.apply_sgd(&g, cfg.learning_rate);
            }
        }
        assert_eq!(tuned, expect);
    }

    #[test]
    fn finetuning_pulls_same_ct1_identities_together() {
        let data = four_identity_data();
        let net = trained_ct1_net(&data, 7);
        let before = cluster_ratio(&net, &data, 2, 99).unwrap();
        let tuned = finetune_siamese(net, &data, &siamese_cfg(1.0)).unwrap();
        let after = cluster_ratio(&tuned, &data, 2, 99).unwrap();
        assert!(
            after < before,
            "intra/inter ratio should shrink: {before} -> {after}"
        );
    }

    #[test]
    fn finetuning_reduces_mean_similar_pair_distance() {
        let data = four_identity_data();
        let holdout = sample_pairs(&data, 200, 1234).unwrap();
        let net = trained_ct1_net(&data, 8);
        let mean_sim_dist = |n: &Network| -> f64 {
            let acts = n.forward(data.features()).unwrap();
            let feats = &acts[2];
            let (mut total, mut count) = (0.0, 0);
            for p in holdout.iter().filter(|p| p.similar) {
                total += crate::tensor::squared_distance(feats.row(p.a), feats.row(p.b)).sqrt();
                count += 1;
            }
            total / count as f64
        };
        let before = mean_sim_dist(&net);
        let tuned = finetune_siamese(net, &data, &siamese_cfg(1.0)).unwrap();
        let after = mean_sim_dist(&tuned);
        assert!(after < before, "similar-pair distance {before} -> {after}");
    }

    #[test]
    fn invalid_split_layer_is_rejected() {
        let data = four_identity_data();
        let net = trained_ct1_net(&data, 9);
        let mut cfg = siamese_cfg(1.0);
        cfg.split_layer = net.n_layers();
        assert!(matches!(
            finetune_siamese(net, &data, &cfg),
            Err(Error::IndexRange { .. })
        ));
    }
}
