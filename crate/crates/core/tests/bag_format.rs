//! Bag files written by hand, the way an external feature extractor would,
//! must load through the reader unchanged.

use std::path::Path;

use chowder::bagstore::{read_bag, write_bag, FeatureBag, Manifest};
use chowder::Error;

const P: usize = 2048;
const M: usize = 8;

fn feature(i: usize, j: usize) -> f32 {
    // Distinct, exactly representable values.
    (i * P + j) as f32 / 64.0 - 100.0
}

fn extractor_bytes() -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(b"CHW1");
    b.extend_from_slice(&1u32.to_le_bytes());
    b.extend_from_slice(&(P as u32).to_le_bytes());
    b.extend_from_slice(&(M as u32).to_le_bytes());
    b.extend_from_slice(&1u32.to_le_bytes());
    b.extend_from_slice(&0.5f32.to_le_bytes());
    b.extend_from_slice(&[0; 8]);
    for i in 0..M as i32 {
        let (gx, gy) = (i % 4, i / 4);
        for v in [gx, gy, gx * 224, gy * 224] {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    for i in 0..M {
        for j in 0..P {
            b.extend_from_slice(&feature(i, j).to_le_bytes());
        }
    }
    b
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, bytes).unwrap();
    path
}

#[test]
fn extractor_bag_loads_field_for_field() {
    let dir = tempfile::tempdir().unwrap();
    let bytes = extractor_bytes();
    assert_eq!(bytes.len(), 32 + 16 * M + 4 * M * P);
    let path = write(dir.path(), "slide_007.chw", &bytes);

    let bag = read_bag(&path, Some(P)).unwrap();
    assert_eq!(bag.slide_id, "slide_007");
    assert_eq!(bag.level, 1);
    assert_eq!(bag.mpp, 0.5);
    assert_eq!(bag.label, None);
    assert_eq!(bag.features.dim(), (M, P));
    for (i, t) in bag.tiles.iter().enumerate() {
        let (gx, gy) = (i as i32 % 4, i as i32 / 4);
        assert_eq!(
            (t.grid_x, t.grid_y, t.px, t.py),
            (gx, gy, gx * 224, gy * 224)
        );
        assert_eq!(t.slide_id, "slide_007");
        assert_eq!(t.level, 1);
    }
    for ((i, j), &v) in bag.features.indexed_iter() {
        assert_eq!(v, feature(i, j));
    }

    // Writing it back reproduces the original bytes.
    let out = dir.path().join("copy").join("slide_007.chw");
    std::fs::create_dir_all(out.parent().unwrap()).unwrap();
    write_bag(&bag, &out).unwrap();
    assert_eq!(std::fs::read(&out).unwrap(), bytes);
}

#[test]
fn manifest_attaches_labels_to_extractor_bags() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("bags")).unwrap();
    write(&dir.path().join("bags"), "a.chw", &extractor_bytes());
    write(&dir.path().join("bags"), "b.chw", &extractor_bytes());
    let manifest = write(
        dir.path(),
        "manifest.csv",
        b"slide_id,label,path\na,1,bags/a.chw\nb,,bags/b.chw\n",
    );
    let bags: Vec<FeatureBag> = Manifest::load(&manifest).unwrap().load_bags().unwrap();
    assert_eq!(bags[0].label, Some(1));
    assert_eq!(bags[1].label, None);
    assert_eq!(bags[1].slide_id, "b");
}

#[test]
fn truncated_extractor_bag_reports_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = extractor_bytes();
    bytes.truncate(bytes.len() - 3);
    let path = write(dir.path(), "short.chw", &bytes);
    match read_bag(&path, Some(P)) {
        Err(Error::Truncated {
            expected, actual, ..
        }) => {
            assert_eq!(expected, (32 + 16 * M + 4 * M * P) as u64);
            assert_eq!(actual, expected - 3);
        }
        other => panic!("expected truncation error, got {other:?}"),
    }
}

#[test]
fn width_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "wide.chw", &extractor_bytes());
    assert!(matches!(
        read_bag(&path, Some(1024)),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn missing_bag_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = read_bag(&dir.path().join("nope.chw"), None).unwrap_err();
    assert!(err.is_io());
}
