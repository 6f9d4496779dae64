//! Feature bags on disk and in memory, dataset manifests, and folds.
//!
//! Bag file layout (all integers and floats little-endian):
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0 | 4 | magic `CHW1` |
//! | 4 | 4 | `u32` version = 1 |
//! | 8 | 4 | `u32` P, feature width |
//! | 12 | 4 | `u32` M, tile count |
//! | 16 | 4 | `u32` pyramid level |
//! | 20 | 4 | `f32` microns per pixel |
//! | 24 | 8 | reserved, zero |
//! | 32 | 16·M | tile records `(i32 grid_x, i32 grid_y, i32 px, i32 py)` |
//! | 32+16·M | 4·M·P | `f32` features, row-major, row `i` ↔ tile `i` |
//!
//! The slide id is the file stem; labels live in the manifest.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;

use crate::preprocess::TileRef;
use crate::rng;
use crate::{Error, Result};

pub const BAG_MAGIC: [u8; 4] = *b"CHW1";
pub const BAG_VERSION: u32 = 1;
pub const BAG_HEADER_BYTES: usize = 32;
pub const TILE_RECORD_BYTES: usize = 16;
pub const BAG_EXTENSION: &str = "chw";

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBag {
    pub slide_id: String,
    pub level: u32,
    pub mpp: f32,
    pub label: Option<u8>,
    pub tiles: Vec<TileRef>,
    /// `M × P`, row `i` belongs to `tiles[i]`.
    pub features: Array2<f32>,
}

impl FeatureBag {
    pub fn new(
        slide_id: impl Into<String>,
        level: u32,
        mpp: f32,
        label: Option<u8>,
        tiles: Vec<TileRef>,
        features: Array2<f32>,
    ) -> Result<Self> {
        let bag = Self {
            slide_id: slide_id.into(),
            level,
            mpp,
            label,
            tiles,
            features,
        };
        bag.validate()?;
        Ok(bag)
    }

    pub fn validate(&self) -> Result<()> {
        let (m, p) = self.features.dim();
        if m == 0 || p == 0 {
            return Err(Error::invalid(format!(
                "bag {} must have M >= 1 and P >= 1, got {m}x{p}",
                self.slide_id
            )));
        }
        if self.tiles.len() != m {
            return Err(Error::Dimension(format!(
                "bag {}: {} tile refs for {m} feature rows",
                self.slide_id,
                self.tiles.len()
            )));
        }
        if let Some(label) = self.label {
            if label > 1 {
                return Err(Error::invalid(format!("label {label} is not 0/1")));
            }
        }
        if let Some(pos) = self.features.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "bag {}: non-finite feature at row {}, column {}",
                self.slide_id,
                pos / p,
                pos % p
            )));
        }
        Ok(())
    }

    pub fn n_tiles(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn with_label(mut self, label: Option<u8>) -> Self {
        self.label = label;
        self
    }

    /// Serialized size in bytes.
    pub fn encoded_len(&self) -> usize {
        BAG_HEADER_BYTES + self.n_tiles() * (TILE_RECORD_BYTES + 4 * self.dim())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&BAG_MAGIC);
        out.extend_from_slice(&BAG_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_tiles() as u32).to_le_bytes());
        out.extend_from_slice(&self.level.to_le_bytes());
        out.extend_from_slice(&self.mpp.to_le_bytes());
        out.extend_from_slice(&[0u8; 8]);
        for t in &self.tiles {
            for v in [t.grid_x, t.grid_y, t.px, t.py] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for v in self.features.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    /// Decodes a bag. `path` is used for the slide id and error messages;
    /// `expected_dim` rejects bags of the wrong feature width.
    pub fn from_bytes(bytes: &[u8], path: &Path, expected_dim: Option<usize>) -> Result<Self> {
        let truncated = |expected: usize| Error::Truncated {
            path: path.to_path_buf(),
            expected: expected as u64,
            actual: bytes.len() as u64,
        };
        if bytes.len() < BAG_HEADER_BYTES {
            return Err(truncated(BAG_HEADER_BYTES));
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != BAG_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: BAG_MAGIC,
                found: magic,
            });
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != BAG_VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: version,
                supported: BAG_VERSION,
            });
        }
        let p = u32_at(8) as usize;
        let m = u32_at(12) as usize;
        let level = u32_at(16);
        let mpp = f32::from_le_bytes(bytes[20..24].try_into().unwrap());
        if let Some(want) = expected_dim {
            if want != p {
                return Err(Error::Dimension(format!(
                    "{}: feature width {p}, expected {want}",
                    path.display()
                )));
            }
        }
        let expected = BAG_HEADER_BYTES + m * (TILE_RECORD_BYTES + 4 * p);
        if bytes.len() < expected {
            return Err(truncated(expected));
        }
        if bytes.len() > expected {
            return Err(Error::invalid(format!(
                "{}: {} trailing bytes after declared payload of {expected}",
                path.display(),
                bytes.len() - expected
            )));
        }
        let slide_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let i32_at = |o: usize| i32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let tiles = (0..m)
            .map(|i| {
                let o = BAG_HEADER_BYTES + i * TILE_RECORD_BYTES;
                TileRef {
                    slide_id: slide_id.clone(),
                    level,
                    grid_x: i32_at(o),
                    grid_y: i32_at(o + 4),
                    px: i32_at(o + 8),
                    py: i32_at(o + 12),
                }
            })
            .collect();
        let start = BAG_HEADER_BYTES + m * TILE_RECORD_BYTES;
        let data: Vec<f32> = bytes[start..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let features =
            Array2::from_shape_vec((m, p), data).map_err(|e| Error::Dimension(e.to_string()))?;
        FeatureBag::new(slide_id, level, mpp, None, tiles, features)
    }
}

pub fn write_bag(bag: &FeatureBag, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &bag.to_bytes()?)
}

pub fn read_bag(path: &Path, expected_dim: Option<usize>) -> Result<FeatureBag> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureBag::from_bytes(&bytes, path, expected_dim)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub slide_id: String,
    pub label: Option<u8>,
    /// As written in the manifest; relative paths resolve against the
    /// manifest's directory.
    pub path: PathBuf,
    pub fold: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
}

#[derive(Debug, serde::Deserialize)]
struct ManifestRow {
    slide_id: String,
    label: Option<u8>,
    path: PathBuf,
    #[serde(default)]
    fold: Option<usize>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = Self {
            entries,
            base_dir: base_dir.into(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.slide_id.as_str()) {
                return Err(Error::invalid(format!("duplicate slide_id {}", e.slide_id)));
            }
            if matches!(e.label, Some(l) if l > 1) {
                return Err(Error::invalid(format!(
                    "slide {}: label must be 0 or 1",
                    e.slide_id
                )));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.base_dir.join(&entry.path)
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
        let headers = rdr.headers().map_err(csv_err)?.clone();
        let names: Vec<&str> = headers.iter().collect();
        if names != ["slide_id", "label", "path"] && names != ["slide_id", "label", "path", "fold"]
        {
            return Err(Error::invalid(format!(
                "{}: manifest header must be slide_id,label,path[,fold], got {}",
                path.display(),
                names.join(",")
            )));
        }
        let mut entries = Vec::new();
        for row in rdr.deserialize::<ManifestRow>() {
            let row = row.map_err(csv_err)?;
            entries.push(ManifestEntry {
                slide_id: row.slide_id,
                label: row.label,
                path: row.path,
                fold: row.fold,
            });
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(entries, base)
    }

    pub fn to_csv(&self) -> String {
        let with_folds = self.entries.iter().any(|e| e.fold.is_some());
        let mut out = String::from(if with_folds {
            "slide_id,label,path,fold\n"
        } else {
            "slide_id,label,path\n"
        });
        for e in &self.entries {
            let label = e.label.map(|l| l.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{}", e.slide_id, label, e.path.display()));
            if with_folds {
                let fold = e.fold.map(|f| f.to_string()).unwrap_or_default();
                out.push_str(&format!(",{fold}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic_str(path, &self.to_csv())
    }

    /// Reads every referenced bag, attaching the manifest label. All bags
    /// must share one feature width.
    pub fn load_bags(&self) -> Result<Vec<FeatureBag>> {
        let paths: Vec<PathBuf> = self.entries.iter().map(|e| self.resolve(e)).collect();
        for p in &paths {
            if !p.is_file() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "bag file missing"),
                ));
            }
        }
        let bags = crate::par::try_map_range(paths.len(), |i| {
            let e = &self.entries[i];
            let mut bag = read_bag(&paths[i], None)?;
            bag.slide_id = e.slide_id.clone();
            for t in &mut bag.tiles {
                t.slide_id = e.slide_id.clone();
            }
            Ok::<_, Error>(bag.with_label(e.label))
        })?;
        if let Some(first) = bags.first() {
            if let Some(b) = bags.iter().find(|b| b.dim() != first.dim()) {
                return Err(Error::Dimension(format!(
                    "bag {} has P={}, bag {} has P={}",
                    first.slide_id,
                    first.dim(),
                    b.slide_id,
                    b.dim()
                )));
            }
        }
        Ok(bags)
    }

    /// Entries with the given fold (`Some`) or all entries (`None`).
    pub fn select_fold(&self, fold: Option<usize>, include: bool) -> Manifest {
        let entries = self
            .entries
            .iter()
            .filter(|e| match fold {
                None => true,
                Some(f) => (e.fold == Some(f)) == include,
            })
            .cloned()
            .collect();
        Manifest {
            entries,
            base_dir: self.base_dir.clone(),
        }
    }
}

/// Stratified `k`-fold assignment.
///
/// Each class is shuffled with `seed` and dealt round-robin; the negatives
/// continue where the positives stopped so fold sizes differ by at most one.
pub fn make_folds(manifest: &Manifest, k: usize, seed: u64) -> Result<Manifest> {
    let labels = manifest
        .entries
        .iter()
        .map(|e| {
            e.label
                .ok_or_else(|| Error::invalid(format!("slide {} has no label", e.slide_id)))
        })
        .collect::<Result<Vec<u8>>>()?;
    let folds = stratified_folds(&labels, k, seed)?;
    let mut out = manifest.clone();
    for (e, f) in out.entries.iter_mut().zip(folds) {
        e.fold = Some(f);
    }
    Ok(out)
}

/// Fold index for each entry of `labels`, as in [`make_folds`].
pub fn stratified_folds(labels: &[u8], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::invalid("need at least 2 folds"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos < k || neg < k {
        return Err(Error::invalid(format!(
            "{k} folds need at least {k} slides per class, have {pos} positive and {neg} negative"
        )));
    }
    let mut rng = rng::seeded(seed);
    let mut out = vec![0; labels.len()];
    let mut next = 0usize;
    for label in [1u8, 0u8] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            out[i] = next % k;
            next += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn bag(m: usize, p: usize) -> FeatureBag {
        let tiles = (0..m)
            .map(|i| TileRef::at_grid("s1", 0, i as i32, 0, 224))
            .collect();
        let feats = Array2::from_shape_fn((m, p), |(i, j)| (i * p + j) as f32 * 0.5 - 1.0);
        FeatureBag::new("s1", 0, 0.5, None, tiles, feats).unwrap()
    }

    #[test]
    fn layout_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s1.chw");
        let b = bag(1, 4);
        write_bag(&b, &path).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 32 + 16 + 16);
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"CHW1");
        assert_eq!(&bytes[24..32], &[0u8; 8]);
        assert_eq!(read_bag(&path, Some(4)).unwrap(), b);
    }

    #[test]
    fn rejects_nan() {
        let mut b = bag(2, 3);
        b.features[[1, 2]] = f32::NAN;
        let dir = tempfile::tempdir().unwrap();
        let err = write_bag(&b, &dir.path().join("x.chw")).unwrap_err();
        assert!(matches!(err, Error::Invalid(_)), "{err}");
        assert!(!dir.path().join("x.chw").exists());
    }

    #[test]
    fn read_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s1.chw");
        let bytes = bag(3, 5).to_bytes().unwrap();

        fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        match read_bag(&path, None).unwrap_err() {
            Error::Truncated {
                expected, actual, ..
            } => {
                assert_eq!(expected, bytes.len() as u64);
                assert_eq!(actual, bytes.len() as u64 - 7);
            }
            e => panic!("unexpected {e}"),
        }
        fs::write(&path, &bytes[..10]).unwrap();
        assert!(matches!(
            read_bag(&path, None),
            Err(Error::Truncated { .. })
        ));

        let mut v2 = bytes.clone();
        v2[4..8].copy_from_slice(&2u32.to_le_bytes());
        fs::write(&path, &v2).unwrap();
        assert!(matches!(
            read_bag(&path, None),
            Err(Error::Version { found: 2, .. })
        ));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(read_bag(&path, None), Err(Error::BadMagic { .. })));

        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_bag(&path, Some(6)), Err(Error::Dimension(_))));
    }

    fn manifest(labels: &[u8]) -> Manifest {
        let entries = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| ManifestEntry {
                slide_id: format!("s{i:03}"),
                label: Some(l),
                path: PathBuf::from(format!("bags/s{i:03}.chw")),
                fold: None,
            })
            .collect();
        Manifest::new(entries, "").unwrap()
    }

    #[test]
    fn folds_exact_stratification() {
        let m = make_folds(&manifest(&[1, 1, 1, 0, 0, 0]), 3, 9).unwrap();
        for f in 0..3 {
            let members: Vec<_> = m.entries.iter().filter(|e| e.fold == Some(f)).collect();
            assert_eq!(members.len(), 2);
            assert_eq!(members.iter().filter(|e| e.label == Some(1)).count(), 1);
        }
    }

    #[test]
    fn folds_single_class_errors() {
        assert!(make_folds(&manifest(&[1, 1, 1, 1]), 2, 0).is_err());
        assert!(make_folds(&manifest(&[1, 0, 1, 0]), 1, 0).is_err());
    }

    #[test]
    fn folds_270() {
        let labels: Vec<u8> = (0..270).map(|i| u8::from(i % 5 < 2)).collect();
        let m = make_folds(&manifest(&labels), 3, 4).unwrap();
        let pos_total = labels.iter().filter(|&&l| l == 1).count() as f64;
        for f in 0..3 {
            let members: Vec<_> = m.entries.iter().filter(|e| e.fold == Some(f)).collect();
            assert_eq!(members.len(), 90);
            let pos = members.iter().filter(|e| e.label == Some(1)).count() as f64;
            assert!((pos - pos_total / 3.0).abs() <= 1.0);
        }
        assert_eq!(m, make_folds(&manifest(&labels), 3, 4).unwrap());
    }

    #[test]
    fn manifest_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = make_folds(&manifest(&[1, 0, 1, 0, 1, 0]), 2, 1).unwrap();
        m.save(&path).unwrap();
        let back = Manifest::load(&path).unwrap();
        assert_eq!(back.entries, m.entries);
        assert_eq!(
            back.resolve(&back.entries[0]),
            dir.path().join("bags/s000.chw")
        );

        fs::write(&path, "slide_id,label,path\na,1,x\na,0,y\n").unwrap();
        assert!(Manifest::load(&path).is_err());
        fs::write(&path, "id,label,path\na,1,x\n").unwrap();
        assert!(Manifest::load(&path).is_err());
        fs::write(&path, "slide_id,label,path\na,,x\n").unwrap();
        assert_eq!(Manifest::load(&path).unwrap().entries[0].label, None);
    }

    #[test]
    fn load_bags_attaches_labels() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("bags")).unwrap();
        let m = manifest(&[1, 0]);
        for e in &m.entries {
            let mut b = bag(3, 2);
            b.slide_id = e.slide_id.clone();
            write_bag(&b, &dir.path().join(&e.path)).unwrap();
        }
        let m = Manifest::new(m.entries, dir.path()).unwrap();
        let bags = m.load_bags().unwrap();
        assert_eq!(bags[0].label, Some(1));
        assert_eq!(bags[1].slide_id, "s001");
        assert_eq!(bags[1].tiles[0].slide_id, "s001");

        let missing = Manifest::new(manifest(&[1, 0, 1]).entries, dir.path()).unwrap();
        assert!(missing.load_bags().unwrap_err().is_io());
    }

    proptest! {
        #[test]
        fn bag_round_trip(
            m in 1usize..20,
            p in 1usize..12,
            level in 0u32..4,
            mpp in 0.1f32..4.0,
            seed: u64,
        ) {
            use rand::Rng;
            let mut r = crate::rng::seeded(seed);
            let tiles = (0..m)
                .map(|_| TileRef::at_grid("rt", level, r.random_range(-50..50), r.random_range(0..50), 224))
                .collect();
            let feats = Array2::from_shape_fn((m, p), |_| r.random_range(-1e6f32..1e6));
            let b = FeatureBag::new("rt", level, mpp, None, tiles, feats).unwrap();
            let bytes = b.to_bytes().unwrap();
            prop_assert_eq!(bytes.len(), b.encoded_len());
            let back = FeatureBag::from_bytes(&bytes, Path::new("dir/rt.chw"), Some(p)).unwrap();
            prop_assert_eq!(&back, &b);
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }
}
