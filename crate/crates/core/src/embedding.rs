//! The six embedding variants: a split network plus optional PCA reduction
//! and optional Gaussian noise on the transmitted feature.
//!
//! Noise is always added after the PCA projection, never before; distance
//! comparisons only stay meaningful in the reduced space, and the noisy
//! baseline must follow the same order for curve comparisons to be fair.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::pca::PcaTransform;
use crate::scalar::Real;
use crate::{Network, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// A network divided at a boundary: `front` runs on the client, `back` on
/// the server. Composition reproduces the original network bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitModelBase<S> {
    pub front: crate::nn::NetworkBase<S>,
    pub back: crate::nn::NetworkBase<S>,
    pub split: usize,
}

pub type SplitModel = SplitModelBase<f64>;

/// Divides `net` so the first `split` layers form the client-side front.
pub fn split_network<S: Real>(
    net: &crate::nn::NetworkBase<S>,
    split: usize,
) -> Result<SplitModelBase<S>> {
    if split == 0 || split >= net.n_layers() {
        return Err(Error::IndexRange {
            what: "split",
            index: split,
            range: format!("1..{}", net.n_layers()),
        });
    }
    let layers = net.layers();
    let front = crate::nn::NetworkBase::with_input_dim(layers[..split].to_vec(), net.input_dim())?;
    let back =
        crate::nn::NetworkBase::with_input_dim(layers[split..].to_vec(), front.output_dim())?;
    Ok(SplitModelBase { front, back, split })
}

/// The pipeline variants, from the raw split to the full
/// Siamese + PCA + noise stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Simple,
    ReducedSimple,
    Siamese,
    ReducedSiamese,
    NoisyReducedSimple,
    Advanced,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Simple,
        Variant::ReducedSimple,
        Variant::Siamese,
        Variant::ReducedSiamese,
        Variant::NoisyReducedSimple,
        Variant::Advanced,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Simple => "simple",
            Variant::ReducedSimple => "reduced_simple",
            Variant::Siamese => "siamese",
            Variant::ReducedSiamese => "reduced_siamese",
            Variant::NoisyReducedSimple => "noisy_reduced_simple",
            Variant::Advanced => "advanced",
        }
    }

    /// Front comes from the Siamese fine-tuned network.
    pub fn uses_siamese(self) -> bool {
        matches!(
            self,
            Variant::Siamese | Variant::ReducedSiamese | Variant::Advanced
        )
    }

    /// Feature is PCA-reduced before transmission.
    pub fn reduced(self) -> bool {
        !matches!(self, Variant::Simple | Variant::Siamese)
    }

    /// Gaussian noise is added to the transmitted feature.
    pub fn noisy(self) -> bool {
        matches!(self, Variant::NoisyReducedSimple | Variant::Advanced)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant {s:?}")))
    }
}

/// Variant selector plus its operating point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub variant: Variant,
    /// PCA dimension; required by reduced variants.
    pub k: Option<usize>,
    /// Noise standard deviation; must be positive for noisy variants.
    pub sigma: f64,
    pub seed: u64,
    /// Noisy accuracies are averaged over this many draws.
    pub n_noise_draws: usize,
}

impl EmbeddingConfig {
    pub fn new(variant: Variant, k: Option<usize>, sigma: f64, seed: u64) -> Self {
        Self {
            variant,
            k,
            sigma,
            seed,
            n_noise_draws: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant.reduced() && self.k.is_none() {
            return Err(Error::InvalidConfig(format!(
                "variant {} requires a PCA dimension k",
                self.variant.name()
            )));
        }
        if self.variant.noisy() && !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "variant {} requires sigma > 0, got {}",
                self.variant.name(),
                self.sigma
            )));
        }
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return Err(Error::InvalidConfig(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if self.n_noise_draws == 0 {
            return Err(Error::InvalidConfig("n_noise_draws must be > 0".into()));
        }
        Ok(())
    }
}

/// Trained artifacts an embedding draws from: both splits plus the PCA
/// transforms fitted on each network's own intermediate features.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub baseline: SplitModel,
    pub siamese: SplitModel,
    pub pca_baseline: Option<PcaTransform>,
    pub pca_siamese: Option<PcaTransform>,
}

impl EmbeddingSet {
    /// Picks the split model and transform a variant operates on.
    pub fn select(&self, variant: Variant) -> Result<(&SplitModel, Option<&PcaTransform>)> {
        let (model, pca) = if variant.uses_siamese() {
            (&self.siamese, self.pca_siamese.as_ref())
        } else {
            (&self.baseline, self.pca_baseline.as_ref())
        };
        if variant.reduced() && pca.is_none() {
            return Err(Error::InvalidConfig(format!(
                "variant {} requires a fitted PCA transform",
                variant.name()
            )));
        }
        Ok((model, if variant.reduced() { pca } else { None }))
    }
}

/// Client-side feature extraction: front layers, optional projection,
/// optional seeded Gaussian noise per dimension.
pub fn extract_features(
    front: &Network,
    pca: Option<&PcaTransform>,
    sigma: f64,
    x: &Tensor,
    seed: u64,
) -> Result<Tensor> {
    let batch = extract_features_batch(front, pca, sigma, &x.as_matrix(), seed)?;
    if x.rank() == 1 {
        Tensor::new([batch.n_cols()], batch.data().to_vec())
    } else {
        Ok(batch)
    }
}

/// Batch feature extraction; noise is drawn row-major, so row `i` of a batch
/// sees the same draws regardless of later rows.
pub fn extract_features_batch(
    front: &Network,
    pca: Option<&PcaTransform>,
    sigma: f64,
    x: &Tensor,
    seed: u64,
) -> Result<Tensor> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::InvalidConfig(format!("sigma must be >= 0, got {sigma}")));
    }
    let feats = front
        .forward(x)?
        .pop()
        .expect("forward returns input plus per-layer activations");
    let mut z = match pca {
        Some(t) => t.project_batch(&feats)?,
        None => feats,
    };
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma)
            .map_err(|e| Error::InvalidConfig(format!("noise sigma: {e}")))?;
        for v in z.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(z)
}

/// Server-side classification: optional reconstruction, then the back layers.
pub fn classify_features(
    back: &Network,
    pca: Option<&PcaTransform>,
    z: &Tensor,
) -> Result<Tensor> {
    let z2 = z.as_matrix();
    let expanded = match pca {
        Some(t) => {
            if z2.n_cols() != t.k() {
                return Err(Error::ShapeMismatch {
                    context: "classify_features".into(),
                    expected: format!("k = {}", t.k()),
                    got: format!("{}", z2.n_cols()),
                });
            }
            t.reconstruct_batch(&z2)?
        }
        None => z2,
    };
    let probs = back
        .forward(&expanded)?
        .pop()
        .expect("non-empty activations");
    if z.rank() == 1 {
        Tensor::new([probs.n_cols()], probs.data().to_vec())
    } else {
        Ok(probs)
    }
}

/// CT1 accuracy of an embedding on a dataset. Noisy variants run
/// `n_noise_draws` seeded draws and report the mean accuracy.
pub fn evaluate_embedding(
    cfg: &EmbeddingConfig,
    models: &EmbeddingSet,
    data: &Dataset,
) -> Result<f64> {
    cfg.validate()?;
    let (sm, pca) = models.select(cfg.variant)?;
    if let (Some(t), Some(k)) = (pca, cfg.k) {
        if t.k() != k {
            return Err(Error::InvalidConfig(format!(
                "fitted PCA has k = {}, config wants k = {k}",
                t.k()
            )));
        }
    }
    let draws = if cfg.variant.noisy() { cfg.n_noise_draws } else { 1 };
    let sigma = if cfg.variant.noisy() { cfg.sigma } else { 0.0 };
    let mut total = 0.0;
    for draw in 0..draws {
        let z = extract_features_batch(
            &sm.front,
            pca,
            sigma,
            data.features(),
            cfg.seed.wrapping_add(draw as u64),
        )?;
        let probs = classify_features(&sm.back, pca, &z)?;
        let hits = (0..probs.n_rows())
            .filter(|&r| crate::tensor::argmax(probs.row(r)) == data.ct1()[r])
            .count();
        total += hits as f64 / data.n_samples() as f64;
    }
    Ok(total / draws as f64)
}

/// Everything the client ships: front layers, projection, noise scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientBundle {
    pub front: Network,
    pub pca: Option<PcaTransform>,
    pub sigma: f64,
}

/// Everything the server hosts: back layers plus the shared projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerBundle {
    pub back: Network,
    pub pca: Option<PcaTransform>,
}

impl ServerBundle {
    /// Feature dimension the server expects on the wire.
    pub fn expected_dim(&self) -> usize {
        match &self.pca {
            Some(t) => t.k(),
            None => self.back.input_dim(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SynthConfig};
    use crate::pca::fit_pca;

    fn net6() -> Network {
        Network::mlp(4, &[8, 6], 2, 3).unwrap()
    }

    fn random_inputs(n: usize, d: usize, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new([n, d], (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn composition_is_bit_exact_at_every_split() {
        let net = net6();
        let x = random_inputs(64, 4, 1);
        let full = net.predict(&x).unwrap();
        for split in 1..net.n_layers() {
            let sm = split_network(&net, split).unwrap();
            let mid = sm.front.predict(&x).unwrap();
            let composed = sm.back.predict(&mid).unwrap();
            let same = full
                .data()
                .iter()
                .zip(composed.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "split {split} not bit-exact");
        }
    }

    #[test]
    fn split_one_leaves_one_front_layer() {
        let net = Network::mlp(3, &[5], 2, 1).unwrap(); // dense relu dense softmax
        let sm = split_network(&net, 1).unwrap();
        assert_eq!(sm.front.n_layers(), 1);
        assert_eq!(sm.back.n_layers(), net.n_layers() - 1);
        assert!(split_network(&net, 0).is_err());
        assert!(split_network(&net, net.n_layers()).is_err());
    }

    #[test]
    fn sigma_zero_without_pca_is_the_raw_activation() {
        let net = net6();
        let sm = split_network(&net, 2).unwrap();
        let x = Tensor::vector(vec![0.5, -0.2, 1.0, 0.3]).unwrap();
        let z = extract_features(&sm.front, None, 0.0, &x, 7).unwrap();
        let acts = net.forward(&x).unwrap();
        assert_eq!(z.data(), acts[2].data());
    }

    #[test]
    fn sigma_zero_with_pca_is_the_projection() {
        let net = net6();
        let sm = split_network(&net, 2).unwrap();
        let x = random_inputs(30, 4, 5);
        let feats = sm.front.predict(&x).unwrap();
        let pca = fit_pca(&feats, 3).unwrap();
        let one = Tensor::vector(x.row(4).to_vec()).unwrap();
        let z = extract_features(&sm.front, Some(&pca), 0.0, &one, 0).unwrap();
        let direct = pca.project(&sm.front.predict(&one).unwrap()).unwrap();
        assert_eq!(z.data(), direct.data());
    }

    #[test]
    fn noise_is_seed_deterministic() {
        let net = net6();
        let sm = split_network(&net, 2).unwrap();
        let x = Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let a = extract_features(&sm.front, None, 0.1, &x, 42).unwrap();
        let b = extract_features(&sm.front, None, 0.1, &x, 42).unwrap();
        let c = extract_features(&sm.front, None, 0.1, &x, 43).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn noise_variance_matches_sigma_squared() {
        let net = net6();
        let sm = split_network(&net, 2).unwrap();
        let x = Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let clean = extract_features(&sm.front, None, 0.0, &x, 0).unwrap();
        let sigma = 0.5;
        let mut draws = Vec::new();
        // 10^4 scalar draws across seeds.
        let per_draw = clean.len();
        let n_draws = 10_000usize.div_ceil(per_draw);
        for seed in 0..n_draws as u64 {
            let noisy = extract_features(&sm.front, None, sigma, &x, seed).unwrap();
            for (n, c) in noisy.data().iter().zip(clean.data()) {
                draws.push(n - c);
            }
        }
        let n = draws.len() as f64;
        let mean: f64 = draws.iter().sum::<f64>() / n;
        let var: f64 = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
        let rel = (var - sigma * sigma).abs() / (sigma * sigma);
        assert!(rel < 0.05, "measured variance {var} vs {}", sigma * sigma);
    }

    #[test]
    fn simple_variant_matches_unsplit_network() {
        let net = net6();
        let sm = split_network(&net, 3).unwrap();
        let x = random_inputs(50, 4, 9);
        for r in 0..x.n_rows() {
            let row = Tensor::vector(x.row(r).to_vec()).unwrap();
            let z = extract_features(&sm.front, None, 0.0, &row, 0).unwrap();
            let probs = classify_features(&sm.back, None, &z).unwrap();
            let full = net.predict(&row).unwrap();
            assert_eq!(probs.data(), full.data());
        }
    }

    #[test]
    fn full_dimension_pca_pipeline_is_identity() {
        let net = net6();
        let sm = split_network(&net, 4).unwrap(); // 6-dim boundary
        let x = random_inputs(40, 4, 11);
        let feats = sm.front.predict(&x).unwrap();
        let k = feats.n_cols();
        let pca = fit_pca(&feats, k).unwrap();
        let full = net.predict(&x).unwrap();
        let z = extract_features_batch(&sm.front, Some(&pca), 0.0, &x, 0).unwrap();
        let probs = classify_features(&sm.back, Some(&pca), &z).unwrap();
        for (a, b) in full.data().iter().zip(probs.data()) {
            assert!((a - b).abs() <= 1e-8);
        }
    }

    #[test]
    fn reduced_variant_requires_pca() {
        let net = net6();
        let models = EmbeddingSet {
            baseline: split_network(&net, 2).unwrap(),
            siamese: split_network(&net, 2).unwrap(),
            pca_baseline: None,
            pca_siamese: None,
        };
        let data = generate(&SynthConfig {
            n_identities: 2,
            samples_per_identity: 5,
            dim: 4,
            cluster_spread: 0.1,
            seed: 1,
        })
        .unwrap();
        let cfg = EmbeddingConfig::new(Variant::ReducedSimple, Some(2), 0.0, 0);
        assert!(matches!(
            evaluate_embedding(&cfg, &models, &data),
            Err(Error::InvalidConfig(_))
        ));
        // Noisy variant with sigma = 0 is also a config error.
        let cfg = EmbeddingConfig::new(Variant::Advanced, Some(2), 0.0, 0);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn accuracy_is_a_probability_and_noise_degrades_gracefully() {
        let data = generate(&SynthConfig {
            n_identities: 4,
            samples_per_identity: 20,
            dim: 4,
            cluster_spread: 0.05,
            seed: 21,
        })
        .unwrap();
        let net = crate::nn::train_classifier(
            data.features(),
            data.ct1(),
            Network::mlp(4, &[8, 6], 2, 2).unwrap(),
            &crate::nn::TrainConfig {
                learning_rate: 0.1,
                epochs: 20,
                batch_size: 8,
                seed: 2,
            },
        )
        .unwrap()
        .0;
        let sm = split_network(&net, 4).unwrap();
        let feats = sm.front.predict(data.features()).unwrap();
        let pca = fit_pca(&feats, 3).unwrap();
        let models = EmbeddingSet {
            baseline: sm.clone(),
            siamese: sm,
            pca_baseline: Some(pca.clone()),
            pca_siamese: Some(pca),
        };

        let clean = evaluate_embedding(
            &EmbeddingConfig::new(Variant::ReducedSimple, Some(3), 0.0, 5),
            &models,
            &data,
        )
        .unwrap();
        assert!((0.0..=1.0).contains(&clean));
        assert!(clean > 0.9, "trained net should classify its data: {clean}");

        // A sigma sweep: accuracy should be non-increasing on average,
        // allowing one inversion across the grid.
        let mut last = 1.0f64;
        let mut inversions = 0;
        for (i, sigma) in [0.05, 0.2, 0.8, 3.0, 12.0].iter().enumerate() {
            let acc = evaluate_embedding(
                &EmbeddingConfig::new(Variant::NoisyReducedSimple, Some(3), *sigma, 5),
                &models,
                &data,
            )
            .unwrap();
            if i > 0 && acc > last + 1e-9 {
                inversions += 1;
            }
            last = acc;
        }
        assert!(inversions <= 1, "{inversions} inversions in sigma sweep");
    }

    #[test]
    fn near_perfect_data_gives_exactly_perfect_simple_accuracy() {
        // Degenerate case: clusters collapse onto their centers, training
        // data classified by its own model through the split pipeline.
        let data = generate(&SynthConfig {
            n_identities: 4,
            samples_per_identity: 15,
            dim: 4,
            cluster_spread: 0.001,
            seed: 8,
        })
        .unwrap();
        let net = crate::nn::train_classifier(
            data.features(),
            data.ct1(),
            Network::mlp(4, &[8, 6], 2, 4).unwrap(),
            &crate::nn::TrainConfig {
                learning_rate: 0.1,
                epochs: 25,
                batch_size: 10,
                seed: 3,
            },
        )
        .unwrap()
        .0;
        let sm = split_network(&net, 2).unwrap();
        let models = EmbeddingSet {
            baseline: sm.clone(),
            siamese: sm,
            pca_baseline: None,
            pca_siamese: None,
        };
        let acc = evaluate_embedding(
            &EmbeddingConfig::new(Variant::Simple, None, 0.0, 0),
            &models,
            &data,
        )
        .unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn tiny_noise_advanced_tracks_reduced_siamese() {
        // At sigma = 0.01 the advanced embedding is the reduced Siamese
        // embedding plus negligible noise; accuracies agree within 2 points
        // over the shared seed grid.
        let data = generate(&SynthConfig {
            n_identities: 6,
            samples_per_identity: 20,
            dim: 6,
            cluster_spread: 0.05,
            seed: 31,
        })
        .unwrap();
        let net = crate::nn::train_classifier(
            data.features(),
            data.ct1(),
            Network::mlp(6, &[12, 8], 2, 9).unwrap(),
            &crate::nn::TrainConfig {
                learning_rate: 0.1,
                epochs: 25,
                batch_size: 16,
                seed: 6,
            },
        )
        .unwrap()
        .0;
        let sm = split_network(&net, 2).unwrap();
        let feats = sm.front.predict(data.features()).unwrap();
        let pca = fit_pca(&feats, 4).unwrap();
        let models = EmbeddingSet {
            baseline: sm.clone(),
            siamese: sm,
            pca_baseline: Some(pca.clone()),
            pca_siamese: Some(pca),
        };
        for seed in [1u64, 2, 3] {
            let reduced = evaluate_embedding(
                &EmbeddingConfig::new(Variant::ReducedSiamese, Some(4), 0.0, seed),
                &models,
                &data,
            )
            .unwrap();
            let advanced = evaluate_embedding(
                &EmbeddingConfig::new(Variant::Advanced, Some(4), 0.01, seed),
                &models,
                &data,
            )
            .unwrap();
            assert!(
                (advanced - reduced).abs() <= 0.02,
                "seed {seed}: advanced {advanced} vs reduced_siamese {reduced}"
            );
        }
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
    }
}
