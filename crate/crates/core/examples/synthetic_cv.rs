//! Cross-validated AUC of every architecture on synthetic datasets.
//!
//! `cargo run --release --example synthetic_cv -- [localized|diffuse] [n_seeds]`

use std::time::Instant;

use chowder::experiment::synthetic_study;
use chowder::model::{Arch, PoolMode};
use chowder::synth::{Regime, SynthConfig};
use chowder::TrainConfig;

fn main() -> chowder::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let regime: Regime = args.get(1).map_or(Ok(Regime::Localized), |s| s.parse())?;
    let n_seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let seeds: Vec<u64> = (1..=n_seeds).collect();
    let archs = [
        Arch::chowder(1, 5),
        Arch::Weldon { j: 1, r: 5 },
        Arch::Baseline {
            pool: PoolMode::Max,
        },
        Arch::Baseline {
            pool: PoolMode::Mean,
        },
    ];
    let synth = |seed| match regime {
        Regime::Diffuse => SynthConfig::diffuse(seed),
        Regime::Localized => SynthConfig::localized(seed),
    };
    for arch in archs {
        let start = Instant::now();
        let runs = synthetic_study(&seeds, synth, 3, &arch, &TrainConfig::default())?;
        let aucs: Vec<f64> = runs.iter().map(|r| r.mean_auc).collect();
        let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
        print!("{arch:<22} {regime:?} mean AUC {mean:.4}  per-seed {aucs:.3?}");
        let tiles: Vec<f64> = runs.iter().flat_map(|r| r.tile_aucs.clone()).collect();
        if !tiles.is_empty() {
            print!(
                "  tile AUC {:.4}",
                tiles.iter().sum::<f64>() / tiles.len() as f64
            );
        }
        println!("  ({:.1}s)", start.elapsed().as_secs_f64());
    }
    Ok(())
}
