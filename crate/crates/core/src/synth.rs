//! Synthetic bags for the diffuse and localized disease regimes.
//!
//! Background tiles are `noise_scale * N(0, I_P)`. Planted tiles add
//! `signal_shift * u` for one random unit direction `u` shared by the whole
//! dataset. Positive bags plant `round(fraction * M)` tiles (at least one);
//! negative bags plant none. In the localized regime the planted tiles form a
//! single 4-connected blob on the bag's tile grid; in the diffuse regime they
//! are scattered uniformly.
//!
//! Bag `i` draws from ChaCha8 stream `i + 1` of the dataset seed and the
//! direction from stream 0, so bags can be generated in any order.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bagstore::FeatureBag;
use crate::metrics::LesionGroundTruth;
use crate::preprocess::{TileRef, DEFAULT_TILE_SIZE};
use crate::{par, rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Diffuse,
    Localized,
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diffuse" => Ok(Regime::Diffuse),
            "localized" => Ok(Regime::Localized),
            other => Err(Error::invalid(format!(
                "unknown regime {other:?} (diffuse, localized)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_slides: usize,
    pub dim: usize,
    pub min_tiles: usize,
    pub max_tiles: usize,
    pub regime: Regime,
    pub positive_tile_fraction: f64,
    /// Norm of the mean shift applied to planted tiles.
    pub signal_shift: f64,
    pub noise_scale: f64,
    /// Fraction of bags that are positive.
    pub positive_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_slides: 200,
            dim: 32,
            min_tiles: 50,
            max_tiles: 150,
            regime: Regime::Localized,
            positive_tile_fraction: 0.02,
            signal_shift: 6.0,
            noise_scale: 1.0,
            positive_rate: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn localized(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn diffuse(seed: u64) -> Self {
        Self {
            regime: Regime::Diffuse,
            positive_tile_fraction: 0.5,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_slides == 0 || self.dim == 0 {
            return Err(Error::invalid("n_slides and P must be positive"));
        }
        if self.min_tiles == 0 || self.min_tiles > self.max_tiles {
            return Err(Error::invalid("need 1 <= min_tiles <= max_tiles"));
        }
        if !(self.positive_tile_fraction > 0.0 && self.positive_tile_fraction <= 1.0) {
            return Err(Error::invalid("positive_tile_fraction must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.positive_rate) {
            return Err(Error::invalid("positive_rate must lie in [0, 1]"));
        }
        if !(self.noise_scale >= 0.0 && self.signal_shift.is_finite()) {
            return Err(Error::invalid("noise_scale must be >= 0 and shift finite"));
        }
        Ok(())
    }

    /// Planted tile count for a positive bag of `m` tiles.
    pub fn planted_count(&self, m: usize) -> Result<usize> {
        let k = (self.positive_tile_fraction * m as f64).round() as usize;
        if k == 0 {
            return Err(Error::invalid(format!(
                "fraction {} plants no tile in a bag of {m}; raise the fraction or M",
                self.positive_tile_fraction
            )));
        }
        Ok(k.min(m))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthBagTruth {
    pub label: u8,
    /// Row indices into the bag's features.
    pub planted: BTreeSet<usize>,
    pub grid_width: usize,
}

impl SynthBagTruth {
    pub fn lesions(&self, bag: &FeatureBag) -> LesionGroundTruth {
        LesionGroundTruth::from_tiles(
            bag.slide_id.clone(),
            self.planted
                .iter()
                .map(|&i| (bag.tiles[i].grid_x, bag.tiles[i].grid_y)),
        )
    }

    /// 0/1 per tile, 1 for planted.
    pub fn tile_labels(&self, m: usize) -> Vec<u8> {
        (0..m)
            .map(|i| u8::from(self.planted.contains(&i)))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub direction: Array1<f64>,
    pub bags: Vec<FeatureBag>,
    pub truth: Vec<SynthBagTruth>,
}

impl SynthDataset {
    pub fn labels(&self) -> Vec<u8> {
        self.truth.iter().map(|t| t.label).collect()
    }
}

pub fn slide_id(seed: u64, index: usize) -> String {
    format!("synth-{seed}-{index:04}")
}

fn random_direction<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.dot(&v).sqrt();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Grows one 4-connected blob of `k` cells on a `width`-wide grid holding
/// `m` cells in row-major order.
fn grow_blob<R: Rng + ?Sized>(m: usize, width: usize, k: usize, rng: &mut R) -> BTreeSet<usize> {
    let start = rng.random_range(0..m);
    let mut blob = BTreeSet::from([start]);
    let mut frontier: Vec<usize> = Vec::new();
    let neighbors = |i: usize| -> Vec<usize> {
        let (x, y) = (i % width, i / width);
        let mut n = Vec::with_capacity(4);
        if x > 0 {
            n.push(i - 1);
        }
        if x + 1 < width && i + 1 < m {
            n.push(i + 1);
        }
        if y > 0 {
            n.push(i - width);
        }
        if i + width < m {
            n.push(i + width);
        }
        n
    };
    frontier.extend(neighbors(start));
    while blob.len() < k {
        frontier.retain(|c| !blob.contains(c));
        frontier.sort_unstable();
        frontier.dedup();
        let Some(&next) = frontier.choose(rng) else {
            break;
        };
        blob.insert(next);
        frontier.extend(neighbors(next));
    }
    blob
}

fn generate_bag(
    cfg: &SynthConfig,
    direction: &Array1<f64>,
    index: usize,
    label: u8,
) -> Result<(FeatureBag, SynthBagTruth)> {
    let mut rng = rng::stream(cfg.seed, index as u64 + 1);
    let m = rng.random_range(cfg.min_tiles..=cfg.max_tiles);
    let width = (m as f64).sqrt().ceil() as usize;
    let planted = if label == 1 {
        let k = cfg.planted_count(m)?;
        match cfg.regime {
            Regime::Localized => grow_blob(m, width, k, &mut rng),
            Regime::Diffuse => index::sample(&mut rng, m, k).into_iter().collect(),
        }
    } else {
        BTreeSet::new()
    };
    let id = slide_id(cfg.seed, index);
    let mut features = Array2::<f32>::zeros((m, cfg.dim));
    for (t, mut row) in features.outer_iter_mut().enumerate() {
        let shift = planted.contains(&t);
        for (k, v) in row.iter_mut().enumerate() {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let mut x = cfg.noise_scale * noise;
            if shift {
                x += cfg.signal_shift * direction[k];
            }
            *v = x as f32;
        }
    }
    let tiles = (0..m)
        .map(|i| {
            TileRef::at_grid(
                &id,
                0,
                (i % width) as i32,
                (i / width) as i32,
                DEFAULT_TILE_SIZE,
            )
        })
        .collect();
    let bag = FeatureBag::new(id, 0, 0.5, Some(label), tiles, features)?;
    Ok((
        bag,
        SynthBagTruth {
            label,
            planted,
            grid_width: width,
        },
    ))
}

pub fn generate_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    if cfg.planted_count(cfg.min_tiles).is_err() {
        return Err(Error::invalid(format!(
            "fraction {} plants no tile in the smallest bag (M={})",
            cfg.positive_tile_fraction, cfg.min_tiles
        )));
    }
    let mut head = rng::stream(cfg.seed, 0);
    let direction = random_direction(cfg.dim, &mut head);
    let n_pos = (cfg.positive_rate * cfg.n_slides as f64).round() as usize;
    let mut labels: Vec<u8> = (0..cfg.n_slides).map(|i| u8::from(i < n_pos)).collect();
    labels.shuffle(&mut head);

    let generated = par::try_map_range(cfg.n_slides, |i| {
        generate_bag(cfg, &direction, i, labels[i])
    })?;
    let (bags, truth) = generated.into_iter().unzip();
    Ok(SynthDataset {
        config: cfg.clone(),
        direction,
        bags,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::roc_auc;

    fn small(regime: Regime, fraction: f64, seed: u64) -> SynthConfig {
        SynthConfig {
            n_slides: 40,
            dim: 8,
            min_tiles: 30,
            max_tiles: 60,
            regime,
            positive_tile_fraction: fraction,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn infeasible_fraction_errors() {
        let cfg = small(Regime::Localized, 0.01, 1);
        assert!(generate_dataset(&cfg).is_err());
        assert!(cfg.planted_count(20).is_err());
        assert_eq!(cfg.planted_count(50).unwrap(), 1);
    }

    #[test]
    fn labels_match_planted_sets() {
        for regime in [Regime::Localized, Regime::Diffuse] {
            let d = generate_dataset(&small(regime, 0.1, 2)).unwrap();
            assert_eq!(d.labels().iter().filter(|&&l| l == 1).count(), 20);
            for (bag, t) in d.bags.iter().zip(&d.truth) {
                assert_eq!(bag.label, Some(t.label));
                assert_eq!(t.label == 1, !t.planted.is_empty());
                if t.label == 1 {
                    let k = (0.1 * bag.n_tiles() as f64).round() as usize;
                    assert_eq!(t.planted.len(), k);
                }
            }
        }
    }

    #[test]
    fn localized_blob_is_one_component() {
        let d = generate_dataset(&small(Regime::Localized, 0.15, 3)).unwrap();
        for (bag, t) in d.bags.iter().zip(&d.truth) {
            if t.label == 1 {
                assert_eq!(t.lesions(bag).lesions.len(), 1, "{}", bag.slide_id);
            }
        }
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let cfg = small(Regime::Diffuse, 0.5, 4);
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        for (x, y) in a.bags.iter().zip(&b.bags) {
            assert_eq!(x.to_bytes().unwrap(), y.to_bytes().unwrap());
        }
        assert_eq!(a.truth, b.truth);
        let c = generate_dataset(&SynthConfig { seed: 5, ..cfg }).unwrap();
        assert_ne!(a.bags[0].features, c.bags[0].features);
    }

    /// Max projection onto the planted direction, an oracle bag classifier.
    fn oracle_scores(d: &SynthDataset) -> Vec<f64> {
        d.bags
            .iter()
            .map(|b| {
                b.features
                    .outer_iter()
                    .map(|r| {
                        r.iter()
                            .zip(&d.direction)
                            .map(|(&x, &u)| f64::from(x) * u)
                            .sum::<f64>()
                    })
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()
    }

    #[test]
    fn oracle_separates_localized() {
        let cfg = SynthConfig {
            n_slides: 100,
            ..SynthConfig::localized(7)
        };
        let d = generate_dataset(&cfg).unwrap();
        let auc = roc_auc(&oracle_scores(&d), &d.labels()).unwrap();
        assert!(auc >= 0.95, "oracle AUC {auc}");
    }

    #[test]
    fn zero_shift_is_uninformative() {
        let aucs: Vec<f64> = (0..8)
            .map(|s| {
                let cfg = SynthConfig {
                    n_slides: 100,
                    signal_shift: 0.0,
                    ..SynthConfig::localized(100 + s)
                };
                let d = generate_dataset(&cfg).unwrap();
                roc_auc(&oracle_scores(&d), &d.labels()).unwrap()
            })
            .collect();
        let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
        // Sd of a single AUC with 50/50 classes is about 0.058.
        assert!((mean - 0.5).abs() < 0.07, "{aucs:?}");
    }
}
