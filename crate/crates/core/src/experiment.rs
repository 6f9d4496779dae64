//! Cross-validated evaluation on in-memory datasets.

use crate::bagstore::{stratified_folds, FeatureBag};
use crate::metrics::roc_auc;
use crate::model::Arch;
use crate::synth::{generate_dataset, SynthConfig};
use crate::train::{predict_many, train_ensemble, Ensemble, TrainConfig};
use crate::{par, Error, Result};

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    /// Indices into the dataset of the held-out bags.
    pub test_indices: Vec<usize>,
    pub test_scores: Vec<f64>,
    pub auc: f64,
    pub ensemble: Ensemble,
}

/// Trains on all folds but one and scores the held-out fold, for every fold.
/// Folds run concurrently with the `parallel` feature.
pub fn cross_validate(
    bags: &[FeatureBag],
    folds: &[usize],
    k: usize,
    arch: &Arch,
    cfg: &TrainConfig,
) -> Result<Vec<FoldResult>> {
    if folds.len() != bags.len() {
        return Err(Error::Dimension("one fold index per bag required".into()));
    }
    par::try_map_range(k, |fold| {
        let train: Vec<&FeatureBag> = bags
            .iter()
            .zip(folds)
            .filter(|(_, &f)| f != fold)
            .map(|(b, _)| b)
            .collect();
        let test_indices: Vec<usize> = (0..bags.len()).filter(|&i| folds[i] == fold).collect();
        let test: Vec<&FeatureBag> = test_indices.iter().map(|&i| &bags[i]).collect();
        let ensemble = train_ensemble(&train, arch, cfg)?.ensemble;
        let test_scores = predict_many(&ensemble, &test)?;
        let labels = test
            .iter()
            .map(|b| b.label.ok_or_else(|| Error::invalid("unlabeled test bag")))
            .collect::<Result<Vec<u8>>>()?;
        let auc = roc_auc(&test_scores, &labels)?;
        Ok(FoldResult {
            fold,
            test_indices,
            test_scores,
            auc,
            ensemble,
        })
    })
}

pub fn mean_auc(results: &[FoldResult]) -> f64 {
    results.iter().map(|r| r.auc).sum::<f64>() / results.len() as f64
}

/// Outcome of [`synthetic_study`] for one dataset seed.
#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub mean_auc: f64,
    /// Per positive test slide, the tile-level AUC of the ensemble's
    /// first-kernel embedding against the planted tiles. Empty for the
    /// pooling baselines.
    pub tile_aucs: Vec<f64>,
}

/// Generates one dataset per seed with `synth(seed)`, runs `k`-fold
/// stratified CV (folds drawn with the dataset seed, training seeded with
/// `1000 * seed`) and records bag and tile AUCs.
pub fn synthetic_study(
    seeds: &[u64],
    synth: impl Fn(u64) -> SynthConfig,
    k: usize,
    arch: &Arch,
    cfg: &TrainConfig,
) -> Result<Vec<SeedResult>> {
    seeds
        .iter()
        .map(|&seed| {
            let data = generate_dataset(&synth(seed))?;
            let folds = stratified_folds(&data.labels(), k, seed)?;
            let cfg = TrainConfig {
                seed: seed * 1000,
                ..cfg.clone()
            };
            let results = cross_validate(&data.bags, &folds, k, arch, &cfg)?;
            let mut tile_aucs = Vec::new();
            if arch.uses_embeddings() {
                for r in &results {
                    for &i in &r.test_indices {
                        let t = &data.truth[i];
                        if t.label == 1 {
                            let s = r.ensemble.tile_scores(&data.bags[i], 0)?;
                            tile_aucs.push(roc_auc(&s, &t.tile_labels(s.len()))?);
                        }
                    }
                }
            }
            Ok(SeedResult {
                seed,
                mean_auc: mean_auc(&results),
                tile_aucs,
            })
        })
        .collect()
}
