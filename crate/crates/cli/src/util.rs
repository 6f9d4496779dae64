//! File plumbing shared by the subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use chowder::bagstore::{FeatureBag, Manifest};
use chowder::train::Ensemble;
use chowder::{checkpoint, io};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{invalid, CliError, CliResult};

pub const CONFIG_FILE: &str = "config.json";

pub fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Reads a JSON config. `required` lists top-level keys that must be present
/// (seeds have no default).
pub fn read_config<T: DeserializeOwned>(path: &Path, required: &[&str]) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    for key in required {
        if value.get(key).is_none() {
            return invalid(format!("{}: missing required key `{key}`", path.display()));
        }
    }
    serde_json::from_value(value).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

pub fn write_config<T: Serialize>(path: &Path, config: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(config).expect("config serializes");
    text.push('\n');
    Ok(io::write_atomic_str(path, &text)?)
}

/// Resolved-config path for a run whose output is a single file:
/// `scores.csv` -> `scores.config.json`.
pub fn sibling_config(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map_or("out".into(), |s| s.to_string_lossy());
    out.with_file_name(format!("{stem}.{CONFIG_FILE}"))
}

pub fn ensure_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

pub fn member_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("member_{k:02}.chwm"))
}

/// Loads every `member_*.chwm` in `dir`, in name order.
pub fn load_ensemble(dir: &Path) -> CliResult<Ensemble> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            name.starts_with("member_") && name.ends_with(".chwm")
        })
        .collect();
    if paths.is_empty() {
        return Err(CliError::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no member_*.chwm checkpoints"),
        ));
    }
    paths.sort();
    let members = paths
        .iter()
        .map(|p| checkpoint::load(p))
        .collect::<chowder::Result<Vec<_>>>()?;
    Ok(Ensemble::new(members)?)
}

/// Manifest entries restricted to `fold` when given.
pub fn load_manifest(path: &Path, fold: Option<usize>) -> CliResult<Manifest> {
    let manifest = Manifest::load(path)?;
    Ok(match fold {
        Some(_) => {
            if manifest.entries.iter().any(|e| e.fold.is_none()) {
                return invalid(format!("{}: --fold needs a fold column", path.display()));
            }
            manifest.select_fold(fold, true)
        }
        None => manifest,
    })
}

pub fn load_bags(manifest: &Manifest, expected_dim: Option<usize>) -> CliResult<Vec<FeatureBag>> {
    let bags = manifest.load_bags()?;
    if let (Some(p), Some(b)) = (
        expected_dim,
        bags.iter().find(|b| Some(b.dim()) != expected_dim),
    ) {
        return invalid(format!(
            "slide {} has feature width {}, model expects {p}",
            b.slide_id,
            b.dim()
        ));
    }
    Ok(bags)
}
