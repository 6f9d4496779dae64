//! Weakly-supervised multiple-instance learning over whole-slide tile features.
//!
//! A slide is a bag of tile feature vectors with a single slide-level label.
//! This crate covers the full desk-scale pipeline:
//!
//! * [`preprocess`]: tissue detection, color normalization, grid tiling and
//!   per-slide tile sampling.
//! * [`bagstore`]: the binary bag file, dataset manifests and stratified folds.
//! * [`model`]: forward passes for CHOWDER (embedding, MinMax selection, MLP),
//!   WELDON (summed selection) and MaxPool/MeanPool logistic baselines.
//! * [`train`]: hand-written backpropagation, BCE loss, Adam and ensembles.
//! * [`metrics`]: ROC AUC, FROC and per-tile localization maps.
//! * [`synth`]: synthetic bag generator for the diffuse and localized regimes.
//!
//! Data-parallel loops (ensemble members, batch prediction, bag generation)
//! run on rayon when the `parallel` feature is enabled and fall back to plain
//! iterators otherwise. Results are identical either way.

pub mod bagstore;
pub mod checkpoint;
mod error;
pub mod experiment;
pub mod io;
pub mod metrics;
pub mod model;
pub mod par;
pub mod preprocess;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

pub use bagstore::{FeatureBag, Manifest, ManifestEntry};
pub use model::{Arch, ChowderParams, Model, ModelOutput, PoolMode, WeldonParams};
pub use preprocess::TileRef;
pub use train::{Ensemble, TrainConfig};
