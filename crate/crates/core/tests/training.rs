//! Training behaviour on synthetic data.

use chowder::bagstore::{stratified_folds, FeatureBag};
use chowder::experiment::cross_validate;
use chowder::metrics::roc_auc;
use chowder::synth::{generate_dataset, SynthConfig};
use chowder::train::{train, train_ensemble};
use chowder::{Arch, TrainConfig};

#[test]
fn separable_set_is_fit_within_30_epochs() {
    // Half of every positive bag is shifted by 6 noise standard deviations,
    // so bag means are linearly separable.
    let data = generate_dataset(&SynthConfig::diffuse(21)).unwrap();
    let refs: Vec<&FeatureBag> = data.bags.iter().collect();
    let cfg = TrainConfig {
        epochs: 30,
        seed: 4,
        ..TrainConfig::default()
    };
    let out = train(&refs, &Arch::chowder(1, 5), &cfg).unwrap();
    let scores: Vec<f64> = refs
        .iter()
        .map(|b| out.model.forward(b).unwrap().score)
        .collect();
    let auc = roc_auc(&scores, &data.labels()).unwrap();
    assert!(auc >= 0.99, "training AUC {auc}");
    assert!(out.history.trending_down());
}

#[test]
fn ensemble_keeps_up_with_its_best_member() {
    let arch = Arch::chowder(1, 5);
    let cfg = TrainConfig::default();
    let mut ensemble_aucs = Vec::new();
    let mut member_aucs = vec![Vec::new(); cfg.ensemble_size];
    for seed in 1..=5u64 {
        let data = generate_dataset(&SynthConfig::localized(seed)).unwrap();
        let folds = stratified_folds(&data.labels(), 3, seed).unwrap();
        let cfg = TrainConfig {
            seed: seed * 1000,
            ..cfg.clone()
        };
        for r in cross_validate(&data.bags, &folds, 3, &arch, &cfg).unwrap() {
            ensemble_aucs.push(r.auc);
            let test: Vec<&FeatureBag> = r.test_indices.iter().map(|&i| &data.bags[i]).collect();
            let labels: Vec<u8> = test.iter().map(|b| b.label.unwrap()).collect();
            for (k, m) in r.ensemble.members.iter().enumerate() {
                let s: Vec<f64> = test.iter().map(|b| m.forward(b).unwrap().score).collect();
                member_aucs[k].push(roc_auc(&s, &labels).unwrap());
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let ensemble = mean(&ensemble_aucs);
    let best = member_aucs.iter().map(|v| mean(v)).fold(f64::MIN, f64::max);
    assert!(
        ensemble >= best - 0.02,
        "ensemble {ensemble:.4} vs best member {best:.4}"
    );
}

#[test]
fn ensemble_members_use_consecutive_seeds() {
    let data = generate_dataset(&SynthConfig {
        n_slides: 20,
        dim: 6,
        min_tiles: 12,
        max_tiles: 20,
        positive_tile_fraction: 0.1,
        ..SynthConfig::localized(5)
    })
    .unwrap();
    let refs: Vec<&FeatureBag> = data.bags.iter().collect();
    let cfg = TrainConfig {
        epochs: 2,
        ensemble_size: 3,
        seed: 40,
        ..TrainConfig::default()
    };
    let arch = Arch::chowder(1, 2);
    let ens = train_ensemble(&refs, &arch, &cfg).unwrap();
    for (k, member) in ens.ensemble.members.iter().enumerate() {
        let single = TrainConfig {
            seed: 40 + k as u64,
            ..cfg.clone()
        };
        assert_eq!(&train(&refs, &arch, &single).unwrap().model, member);
    }
}
