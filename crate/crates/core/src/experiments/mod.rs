//! End-to-end experiment pipeline on synthetic data: train a baseline,
//! Siamese fine-tune per split, fit PCA transforms, evaluate the embedding
//! variants, run transfer attacks and sweep accuracy-privacy curves,
//! emitting CSV artifacts plus ready-to-serve client/server bundles.
//!
//! Everything is derived from one master seed, so a rerun with the same
//! config produces bit-identical artifacts.

mod plot;

pub use plot::plot_curves;

use crate::container;
use crate::data::{generate, split_train_test, Dataset, SynthConfig};
use crate::embedding::{
    evaluate_embedding, split_network, ClientBundle, EmbeddingConfig, EmbeddingSet, ServerBundle,
    SplitModel, Variant,
};
use crate::error::{Error, Result};
use crate::nn::{train_classifier, TrainConfig};
use crate::pca::{fit_pca, PcaTransform};
use crate::privacy::{
    accuracy_privacy_curve, read_curve_csv, transfer_attack, write_curve_csv, write_transfer_csv,
    CurvePoint, TransferRow,
};
use crate::siamese::{finetune_siamese, SiameseConfig};
use crate::{Network, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Flat key-value experiment configuration; every field has a default, so a
/// JSON config may override only what it cares about.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_identities: usize,
    pub samples_per_identity: usize,
    pub dim: usize,
    pub cluster_spread: f64,
    pub hidden_layers: Vec<usize>,
    pub train_epochs: usize,
    pub train_learning_rate: f64,
    pub batch_size: usize,
    pub siamese_margin: f64,
    pub siamese_lambda: f64,
    pub siamese_pairs_per_epoch: usize,
    pub siamese_epochs: usize,
    pub siamese_learning_rate: f64,
    pub split_grid: Vec<usize>,
    pub k_grid: Vec<usize>,
    /// PCA dimension used for attacks, curves and bundles.
    pub curve_k: usize,
    pub sigma_grid: Vec<f64>,
    pub n_noise_draws: usize,
    pub attack_head_hidden: Vec<usize>,
    pub attack_epochs: usize,
    pub attack_learning_rate: f64,
    pub train_fraction: f64,
    /// Noise scale written into the emitted client bundle.
    pub bundle_sigma: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_identities: 100,
            samples_per_identity: 20,
            dim: 16,
            cluster_spread: 0.05,
            hidden_layers: vec![32, 16],
            train_epochs: 30,
            train_learning_rate: 0.1,
            batch_size: 32,
            siamese_margin: 1.0,
            siamese_lambda: 1.0,
            siamese_pairs_per_epoch: 1500,
            siamese_epochs: 8,
            siamese_learning_rate: 0.02,
            split_grid: vec![2, 4],
            k_grid: vec![4, 6, 8, 10],
            curve_k: 6,
            sigma_grid: log_spaced(0.01, 2.0, 10),
            n_noise_draws: 10,
            attack_head_hidden: vec![64],
            attack_epochs: 25,
            attack_learning_rate: 0.1,
            train_fraction: 0.75,
            bundle_sigma: 0.1,
            seed: 42,
            output_dir: PathBuf::from("artifacts"),
        }
    }
}

impl ExperimentConfig {
    /// Tiny configuration for smoke runs: completes in seconds.
    pub fn minimal(output_dir: impl Into<PathBuf>) -> Self {
        Self {
            n_identities: 4,
            samples_per_identity: 10,
            dim: 4,
            cluster_spread: 0.05,
            hidden_layers: vec![8, 6],
            train_epochs: 1,
            train_learning_rate: 0.1,
            batch_size: 8,
            siamese_margin: 1.0,
            siamese_lambda: 1.0,
            siamese_pairs_per_epoch: 40,
            siamese_epochs: 1,
            siamese_learning_rate: 0.05,
            split_grid: vec![2],
            k_grid: vec![2, 3],
            curve_k: 2,
            sigma_grid: vec![0.05, 0.2, 0.8],
            n_noise_draws: 2,
            attack_head_hidden: vec![8],
            attack_epochs: 2,
            attack_learning_rate: 0.1,
            train_fraction: 0.7,
            bundle_sigma: 0.1,
            seed: 7,
            output_dir: output_dir.into(),
        }
    }

    /// Loads a JSON config; missing keys fall back to defaults.
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    fn validate(&self) -> Result<()> {
        if self.split_grid.is_empty() || self.k_grid.is_empty() || self.sigma_grid.is_empty() {
            return Err(Error::InvalidConfig(
                "split_grid, k_grid and sigma_grid must be non-empty".into(),
            ));
        }
        let n_layers = self.hidden_layers.len() * 2 + 2;
        for &s in &self.split_grid {
            if s == 0 || s >= n_layers {
                return Err(Error::InvalidConfig(format!(
                    "split {s} out of range 1..{n_layers} for {} hidden layers",
                    self.hidden_layers.len()
                )));
            }
        }
        Ok(())
    }

    fn synth(&self) -> SynthConfig {
        SynthConfig {
            n_identities: self.n_identities,
            samples_per_identity: self.samples_per_identity,
            dim: self.dim,
            cluster_spread: self.cluster_spread,
            seed: derive_seed(self.seed, 1),
        }
    }

    fn train_cfg(&self, stream: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train_learning_rate,
            epochs: self.train_epochs,
            batch_size: self.batch_size,
            seed: derive_seed(self.seed, stream),
        }
    }

    fn attack_cfg(&self, stream: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.attack_learning_rate,
            epochs: self.attack_epochs,
            batch_size: self.batch_size,
            seed: derive_seed(self.seed, stream),
        }
    }
}

/// Ten log-spaced points from `lo` to `hi` inclusive.
pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (llo, lhi) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (llo + (lhi - llo) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// SplitMix64 stream derivation: independent per-stage seeds from the master.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Everything a pipeline run produced.
#[derive(Debug)]
pub struct PipelineArtifacts {
    pub output_dir: PathBuf,
    pub table_accuracy: Vec<AccuracyRow>,
    pub transfer: Vec<TransferRow>,
    pub curves: Vec<CurvePoint>,
    pub verdicts: Vec<Verdict>,
    /// Grid cells the run skipped (rank-deficient representations).
    pub notes: Vec<String>,
}

/// A `table_accuracy.csv` row; `k` is `None` for unreduced variants.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyRow {
    pub variant: Variant,
    pub split: usize,
    pub k: Option<usize>,
    pub ct1_accuracy: f64,
}

/// One machine-checked claim of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub claim: &'static str,
    pub split: usize,
    pub pass: bool,
    pub detail: String,
}

/// Runs the full pipeline. Any stage failure aborts with the stage name;
/// artifacts written by earlier stages stay on disk.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineArtifacts> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::io(format!("create {}", dir.display()), e))?;

    // Stage: generate.
    let (data, train, test) = (|| {
        let data = generate(&cfg.synth())?;
        let (train, test) = split_train_test(&data, cfg.train_fraction, derive_seed(cfg.seed, 2))?;
        Ok((data, train, test))
    })()
    .map_err(Error::in_stage("generate"))?;

    // Stage: train baseline CT1 classifier.
    let baseline = (|| {
        let net = Network::mlp(
            cfg.dim,
            &cfg.hidden_layers,
            data.n_ct1_classes(),
            derive_seed(cfg.seed, 3),
        )?;
        let (net, _) = train_classifier(train.features(), train.ct1(), net, &cfg.train_cfg(4))?;
        container::save_model(&net, dir.join("baseline_model.psv"))?;
        Ok(net)
    })()
    .map_err(Error::in_stage("train_baseline"))?;

    // Stage: Siamese fine-tune per split.
    let siamese_by_split: BTreeMap<usize, Network> = cfg
        .split_grid
        .par_iter()
        .map(|&split| {
            let tuned = finetune_siamese(
                baseline.clone(),
                &train,
                &SiameseConfig {
                    margin: cfg.siamese_margin,
                    lambda_contrastive: cfg.siamese_lambda,
                    split_layer: split,
                    pairs_per_epoch: cfg.siamese_pairs_per_epoch,
                    epochs: cfg.siamese_epochs,
                    learning_rate: cfg.siamese_learning_rate,
                    seed: derive_seed(cfg.seed, 100 + split as u64),
                },
            )?;
            container::save_model(&tuned, dir.join(format!("siamese_model_split{split}.psv")))?;
            Ok((split, tuned))
        })
        .collect::<Result<BTreeMap<_, _>>>()
        .map_err(Error::in_stage("finetune_siamese"))?;

    // Stage: fit PCA per (network, split, k). A trained representation can
    // collapse below a grid k (Siamese fine-tuning does this by design);
    // such cells are skipped with a note. The curve_k transforms feed the
    // attacks, curves and bundles, so rank deficiency there is fatal.
    let mut ks: Vec<usize> = cfg.k_grid.clone();
    if !ks.contains(&cfg.curve_k) {
        ks.push(cfg.curve_k);
    }
    ks.sort_unstable();
    ks.dedup();
    let mut notes: Vec<String> = Vec::new();
    let pcas: BTreeMap<(bool, usize, usize), PcaTransform> = (|| {
        let mut out = BTreeMap::new();
        for &split in &cfg.split_grid {
            let base_feats = intermediate_features(&baseline, &train, split)?;
            let siam_feats = intermediate_features(&siamese_by_split[&split], &train, split)?;
            for &k in &ks {
                let cells = [(false, &base_feats, "baseline"), (true, &siam_feats, "siamese")];
                for (uses_siamese, feats, label) in cells {
                    match fit_pca(feats, k) {
                        Ok(pca) => {
                            let name = format!("pca_{label}_split{split}_k{k}.psv");
                            container::save_pca(&pca, dir.join(name))?;
                            out.insert((uses_siamese, split, k), pca);
                        }
                        Err(Error::RankDeficient { requested, usable }) if k != cfg.curve_k => {
                            notes.push(format!(
                                "skipped pca_{label}_split{split}_k{k}: usable rank {usable} < requested {requested}"
                            ));
                        }
                        Err(e) => return Err(e),
                    }
                }
            }
        }
        Ok(out)
    })()
    .map_err(Error::in_stage("fit_pca"))?;

    let embedding_set = |split: usize, k: usize| -> EmbeddingSet {
        EmbeddingSet {
            baseline: split_network(&baseline, split).expect("validated split"),
            siamese: split_network(&siamese_by_split[&split], split).expect("validated split"),
            pca_baseline: pcas.get(&(false, split, k)).cloned(),
            pca_siamese: pcas.get(&(true, split, k)).cloned(),
        }
    };

    // Stage: CT1 accuracy table over the embedding variants.
    let table_accuracy = (|| {
        let mut rows = Vec::new();
        for &split in &cfg.split_grid {
            let models = embedding_set(split, *ks.first().expect("non-empty"));
            for variant in [Variant::Simple, Variant::Siamese] {
                let acc = evaluate_embedding(
                    &EmbeddingConfig::new(variant, None, 0.0, derive_seed(cfg.seed, 5)),
                    &models,
                    &test,
                )?;
                rows.push(AccuracyRow {
                    variant,
                    split,
                    k: None,
                    ct1_accuracy: acc,
                });
            }
            for &k in &cfg.k_grid {
                let models = embedding_set(split, k);
                for variant in [Variant::ReducedSimple, Variant::ReducedSiamese] {
                    if !pcas.contains_key(&(variant.uses_siamese(), split, k)) {
                        continue; // cell skipped as rank-deficient
                    }
                    let acc = evaluate_embedding(
                        &EmbeddingConfig::new(variant, Some(k), 0.0, derive_seed(cfg.seed, 5)),
                        &models,
                        &test,
                    )?;
                    rows.push(AccuracyRow {
                        variant,
                        split,
                        k: Some(k),
                        ct1_accuracy: acc,
                    });
                }
            }
        }
        write_accuracy_csv(&rows, dir.join("table_accuracy.csv"))?;
        Ok(rows)
    })()
    .map_err(Error::in_stage("evaluate_embeddings"))?;

    // Stage: transfer-learning attacks (Fig. 8-style bars).
    let transfer = (|| {
        let jobs: Vec<(usize, Variant)> = cfg
            .split_grid
            .iter()
            .flat_map(|&split| {
                [
                    Variant::Simple,
                    Variant::ReducedSimple,
                    Variant::Siamese,
                    Variant::ReducedSiamese,
                ]
                .into_iter()
                .map(move |v| (split, v))
            })
            .collect();
        let rows: Vec<TransferRow> = jobs
            .par_iter()
            .map(|&(split, variant)| {
                let net = if variant.uses_siamese() {
                    &siamese_by_split[&split]
                } else {
                    &baseline
                };
                let pca = variant
                    .reduced()
                    .then(|| &pcas[&(variant.uses_siamese(), split, cfg.curve_k)]);
                let result = run_attack(net, split, pca, &data, cfg, split as u64)?;
                Ok(TransferRow {
                    frozen_layers: result.frozen_layers,
                    variant,
                    ct2_accuracy: result.ct2_accuracy,
                    chance: result.chance_level,
                })
            })
            .collect::<Result<_>>()?;
        write_transfer_csv(&rows, dir.join("transfer_results.csv"))?;
        Ok(rows)
    })()
    .map_err(Error::in_stage("transfer_attacks"))?;

    // Stage: accuracy-privacy curves (Fig. 9/10-style sweeps).
    let curves = (|| {
        let jobs: Vec<(usize, Variant)> = cfg
            .split_grid
            .iter()
            .flat_map(|&split| {
                [Variant::NoisyReducedSimple, Variant::Advanced]
                    .into_iter()
                    .map(move |v| (split, v))
            })
            .collect();
        let per_job: Vec<Vec<CurvePoint>> = jobs
            .par_iter()
            .map(|&(split, variant)| {
                accuracy_privacy_curve(
                    variant,
                    &embedding_set(split, cfg.curve_k),
                    &test,
                    &cfg.sigma_grid,
                    cfg.n_noise_draws,
                    derive_seed(cfg.seed, 200 + split as u64),
                    split,
                )
            })
            .collect::<Result<_>>()?;
        let points: Vec<CurvePoint> = per_job.into_iter().flatten().collect();
        write_curve_csv(&points, dir.join("curve.csv"))?;
        Ok(points)
    })()
    .map_err(Error::in_stage("curves"))?;

    // Stage: verdict table over the emitted artifacts.
    let verdicts = compare_variants(dir).map_err(Error::in_stage("verdicts"))?;

    // Stage: ready-to-serve bundles for the advanced embedding at the
    // deepest split.
    (|| {
        let split = *cfg.split_grid.iter().max().expect("non-empty");
        let sm = split_network(&siamese_by_split[&split], split)?;
        let pca = pcas[&(true, split, cfg.curve_k)].clone();
        container::save_client_bundle(
            &ClientBundle {
                front: sm.front,
                pca: Some(pca.clone()),
                sigma: cfg.bundle_sigma,
            },
            dir.join("client.bundle"),
        )?;
        container::save_server_bundle(
            &ServerBundle {
                back: sm.back,
                pca: Some(pca),
            },
            dir.join("server.bundle"),
        )?;
        Ok(())
    })()
    .map_err(Error::in_stage("bundles"))?;

    Ok(PipelineArtifacts {
        output_dir: dir.clone(),
        table_accuracy,
        transfer,
        curves,
        verdicts,
        notes,
    })
}

fn intermediate_features(net: &Network, data: &Dataset, boundary: usize) -> Result<Tensor> {
    let mut acts = net.forward(data.features())?;
    Ok(acts.swap_remove(boundary))
}

/// Builds the frozen feature extractor for a variant (front layers plus an
/// optional PCA projection layer) and runs the transfer attack on it.
fn run_attack(
    net: &Network,
    split: usize,
    pca: Option<&PcaTransform>,
    data: &Dataset,
    cfg: &ExperimentConfig,
    stream: u64,
) -> Result<crate::privacy::TransferResult> {
    let sm: SplitModel = split_network(net, split)?;
    let front = match pca {
        Some(t) => Network::with_input_dim(
            sm.front
                .layers()
                .iter()
                .cloned()
                .chain([t.to_dense_layer()])
                .collect(),
            net.input_dim(),
        )?,
        None => sm.front,
    };
    let head = Network::mlp(
        front.output_dim(),
        &cfg.attack_head_hidden,
        data.n_ct2_classes(),
        derive_seed(cfg.seed, 300 + stream),
    )?;
    transfer_attack(&front, data, head, &cfg.attack_cfg(400 + stream))
}

fn write_accuracy_csv(rows: &[AccuracyRow], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("variant,split,k,ct1_accuracy\n");
    for r in rows {
        let k = r.k.map(|k| k.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{}", r.variant.name(), r.split, k, r.ct1_accuracy);
    }
    let path = path.as_ref();
    std::fs::write(path, out).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

fn read_accuracy_csv(path: &Path) -> Result<Vec<AccuracyRow>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    let parse_err = |row: usize, message: String| Error::CsvParse {
        path: path.to_path_buf(),
        row,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "variant,split,k,ct1_accuracy")) => {}
        other => {
            return Err(parse_err(
                1,
                format!("unexpected header {:?}", other.map(|(_, h)| h)),
            ))
        }
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row = idx + 1;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(parse_err(row, format!("expected 4 fields, got {}", f.len())));
        }
        rows.push(AccuracyRow {
            variant: f[0].parse()?,
            split: f[1]
                .parse()
                .map_err(|_| parse_err(row, format!("bad split {:?}", f[1])))?,
            k: if f[2].is_empty() {
                None
            } else {
                Some(
                    f[2].parse()
                        .map_err(|_| parse_err(row, format!("bad k {:?}", f[2])))?,
                )
            },
            ct1_accuracy: f[3]
                .parse()
                .map_err(|_| parse_err(row, format!("bad accuracy {:?}", f[3])))?,
        });
    }
    Ok(rows)
}

fn read_transfer_csv(path: &Path) -> Result<Vec<TransferRow>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    let parse_err = |row: usize, message: String| Error::CsvParse {
        path: path.to_path_buf(),
        row,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "frozen_layers,variant,ct2_accuracy,chance")) => {}
        other => {
            return Err(parse_err(
                1,
                format!("unexpected header {:?}", other.map(|(_, h)| h)),
            ))
        }
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row = idx + 1;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(parse_err(row, format!("expected 4 fields, got {}", f.len())));
        }
        rows.push(TransferRow {
            frozen_layers: f[0]
                .parse()
                .map_err(|_| parse_err(row, format!("bad frozen_layers {:?}", f[0])))?,
            variant: f[1].parse()?,
            ct2_accuracy: f[2]
                .parse()
                .map_err(|_| parse_err(row, format!("bad accuracy {:?}", f[2])))?,
            chance: f[3]
                .parse()
                .map_err(|_| parse_err(row, format!("bad chance {:?}", f[3])))?,
        });
    }
    Ok(rows)
}

/// Evaluates the comparison claims over a pipeline's emitted CSV artifacts
/// and writes `verdicts.csv`.
///
/// Transfer rows are paired by the convention that a reduced variant's
/// frozen layer count is its unreduced sibling's plus the PCA layer.
pub fn compare_variants(dir: impl AsRef<Path>) -> Result<Vec<Verdict>> {
    let dir = dir.as_ref();
    let accuracy = read_accuracy_csv(&dir.join("table_accuracy.csv"))?;
    let transfer = read_transfer_csv(&dir.join("transfer_results.csv"))?;
    let curves = read_curve_csv(dir.join("curve.csv"))?;
    if curves.is_empty() {
        return Err(Error::EmptyInput("curve data"));
    }

    let acc_of = |variant: Variant, split: usize| -> Option<f64> {
        accuracy
            .iter()
            .find(|r| r.variant == variant && r.split == split)
            .map(|r| r.ct1_accuracy)
    };
    let attack_of = |variant: Variant, frozen: usize| -> Option<f64> {
        transfer
            .iter()
            .find(|r| r.variant == variant && r.frozen_layers == frozen)
            .map(|r| r.ct2_accuracy)
    };

    let mut splits: Vec<usize> = transfer
        .iter()
        .filter(|r| r.variant == Variant::Simple)
        .map(|r| r.frozen_layers)
        .collect();
    splits.sort_unstable();
    splits.dedup();

    let mut verdicts = Vec::new();
    let missing = |what: String| Error::InvalidConfig(format!("missing artifact row: {what}"));
    for &split in &splits {
        let acc_simple =
            acc_of(Variant::Simple, split).ok_or_else(|| missing(format!("simple accuracy at split {split}")))?;
        let acc_siamese = acc_of(Variant::Siamese, split)
            .ok_or_else(|| missing(format!("siamese accuracy at split {split}")))?;
        let a_pass = acc_siamese >= acc_simple - 0.05;
        verdicts.push(Verdict {
            claim: "siamese_ct1_within_5_points",
            split,
            pass: a_pass,
            detail: format!("simple {acc_simple:.4}, siamese {acc_siamese:.4}"),
        });

        let at_simple = attack_of(Variant::Simple, split)
            .ok_or_else(|| missing(format!("simple attack at split {split}")))?;
        let at_siamese = attack_of(Variant::Siamese, split)
            .ok_or_else(|| missing(format!("siamese attack at split {split}")))?;
        let at_red_simple = attack_of(Variant::ReducedSimple, split + 1)
            .ok_or_else(|| missing(format!("reduced_simple attack at split {split}")))?;
        let at_red_siamese = attack_of(Variant::ReducedSiamese, split + 1)
            .ok_or_else(|| missing(format!("reduced_siamese attack at split {split}")))?;

        verdicts.push(Verdict {
            claim: "siamese_attack_below_simple",
            split,
            pass: at_siamese < at_simple,
            detail: format!("simple {at_simple:.4}, siamese {at_siamese:.4}"),
        });
        verdicts.push(Verdict {
            claim: "reduction_does_not_help_attack",
            split,
            pass: at_red_simple <= at_simple && at_red_siamese <= at_siamese,
            detail: format!(
                "simple {at_simple:.4}>= reduced {at_red_simple:.4}; siamese {at_siamese:.4}>= reduced {at_red_siamese:.4}"
            ),
        });

        let advanced: Vec<CurvePoint> = curves
            .iter()
            .filter(|p| p.split == split && p.variant == Variant::Advanced)
            .cloned()
            .collect();
        let noisy_simple: Vec<CurvePoint> = curves
            .iter()
            .filter(|p| p.split == split && p.variant == Variant::NoisyReducedSimple)
            .cloned()
            .collect();
        let frac = dominance_fraction_at_matched_privacy(&advanced, &noisy_simple);
        verdicts.push(Verdict {
            claim: "advanced_dominates_noisy_simple",
            split,
            pass: frac >= 0.8,
            detail: format!("dominates at {:.0}% of grid points", frac * 100.0),
        });
    }

    write_verdicts_csv(&verdicts, dir.join("verdicts.csv"))?;
    Ok(verdicts)
}

fn write_verdicts_csv(verdicts: &[Verdict], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("claim,split,pass,detail\n");
    for v in verdicts {
        let _ = writeln!(
            out,
            "{},{},{},\"{}\"",
            v.claim, v.split, v.pass, v.detail
        );
    }
    let path = path.as_ref();
    std::fs::write(path, out).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

/// Piecewise-linear interpolation over `(x, y)` knots, clamped at the ends.
/// Duplicate x knots keep the larger y.
fn interpolate(mut knots: Vec<(f64, f64)>, x: f64) -> f64 {
    knots.sort_by(|a, b| a.partial_cmp(b).expect("finite knots"));
    knots.dedup_by(|b, a| {
        if a.0 == b.0 {
            a.1 = a.1.max(b.1);
            true
        } else {
            false
        }
    });
    if x <= knots[0].0 {
        return knots[0].1;
    }
    if x >= knots[knots.len() - 1].0 {
        return knots[knots.len() - 1].1;
    }
    for w in knots.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x >= x0 && x <= x1 {
            let frac = (x - x0) / (x1 - x0);
            return y0 + frac * (y1 - y0);
        }
    }
    knots[knots.len() - 1].1
}

/// Fraction of `upper` grid points whose CT1 accuracy weakly dominates
/// `lower`'s accuracy interpolated at the same privacy level.
pub fn dominance_fraction_at_matched_privacy(upper: &[CurvePoint], lower: &[CurvePoint]) -> f64 {
    if upper.is_empty() || lower.is_empty() {
        return 0.0;
    }
    let knots: Vec<(f64, f64)> = lower
        .iter()
        .map(|p| (p.privacy_total, p.ct1_accuracy))
        .collect();
    let wins = upper
        .iter()
        .filter(|p| p.ct1_accuracy >= interpolate(knots.clone(), p.privacy_total) - 1e-9)
        .count();
    wins as f64 / upper.len() as f64
}

/// Fraction of `deeper` grid points whose privacy weakly dominates
/// `shallower`'s privacy interpolated at the same CT1 accuracy.
pub fn dominance_fraction_at_matched_accuracy(
    deeper: &[CurvePoint],
    shallower: &[CurvePoint],
) -> f64 {
    if deeper.is_empty() || shallower.is_empty() {
        return 0.0;
    }
    let knots: Vec<(f64, f64)> = shallower
        .iter()
        .map(|p| (p.ct1_accuracy, p.privacy_total))
        .collect();
    let wins = deeper
        .iter()
        .filter(|p| p.privacy_total >= interpolate(knots.clone(), p.ct1_accuracy) - 1e-9)
        .count();
    wins as f64 / deeper.len() as f64
}
