//! Model checkpoint files.
//!
//! Layout (little-endian):
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0 | 4 | magic `CHWM` |
//! | 4 | 4 | `u32` version = 1 |
//! | 8 | 4 | `u32` architecture: 0 chowder, 1 weldon, 2 maxpool, 3 meanpool |
//! | 12 | 4 | `u32` J (0 for the baselines) |
//! | 16 | 4 | `u32` R (0 for the baselines) |
//! | 20 | 4 | `u32` P |
//! | 24 | … | `f32` tensors in declared order |
//!
//! Tensor order: CHOWDER `kernels[J×P]`, `w1[200×2RJ]`, `b1[200]`,
//! `w2[100×200]`, `b2[100]`, `w3[100]`, `b3[1]`; WELDON `kernels[J×P]`;
//! baselines `weights[P]`, `bias[1]`. Matrices are row-major.
//!
//! Parameters train in f64 and are stored rounded to f32.

use std::fs;
use std::path::Path;

use crate::model::{Arch, Model, PoolMode, Tensors};
use crate::{Error, Result};

pub const MODEL_MAGIC: [u8; 4] = *b"CHWM";
pub const MODEL_VERSION: u32 = 1;
const HEADER_BYTES: usize = 24;

fn arch_tag(arch: &Arch) -> (u32, u32, u32) {
    match *arch {
        Arch::Chowder { j, r } => (0, j as u32, r as u32),
        Arch::Weldon { j, r } => (1, j as u32, r as u32),
        Arch::Baseline {
            pool: PoolMode::Max,
        } => (2, 0, 0),
        Arch::Baseline {
            pool: PoolMode::Mean,
        } => (3, 0, 0),
    }
}

pub fn encode(model: &Model) -> Vec<u8> {
    let (tag, j, r) = arch_tag(&model.arch());
    let mut out = Vec::with_capacity(HEADER_BYTES + 4 * model.n_params());
    out.extend_from_slice(&MODEL_MAGIC);
    for v in [MODEL_VERSION, tag, j, r, model.dim() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for t in model.tensors() {
        for &v in t {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Model> {
    if bytes.len() < HEADER_BYTES {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_BYTES as u64,
            actual: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MODEL_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: MODEL_MAGIC,
            found: magic,
        });
    }
    let u = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let (version, tag, j, r, p) = (u(0), u(1), u(2) as usize, u(3) as usize, u(4) as usize);
    if version != MODEL_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            supported: MODEL_VERSION,
        });
    }
    let arch = match tag {
        0 => Arch::Chowder { j, r },
        1 => Arch::Weldon { j, r },
        2 => Arch::Baseline {
            pool: PoolMode::Max,
        },
        3 => Arch::Baseline {
            pool: PoolMode::Mean,
        },
        other => {
            return Err(Error::invalid(format!(
                "{}: unknown architecture tag {other}",
                path.display()
            )))
        }
    };
    arch.validate()?;
    if p == 0 {
        return Err(Error::invalid(format!(
            "{}: P must be positive",
            path.display()
        )));
    }
    let mut model = Model::init(&arch, p, &mut crate::rng::seeded(0))?.zeros_like();
    let expected = HEADER_BYTES + 4 * model.n_params();
    if bytes.len() != expected {
        if bytes.len() < expected {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                expected: expected as u64,
                actual: bytes.len() as u64,
            });
        }
        return Err(Error::invalid(format!(
            "{}: {} bytes, expected {expected}",
            path.display(),
            bytes.len()
        )));
    }
    let mut vals = bytes[HEADER_BYTES..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())));
    for t in model.tensors_mut() {
        for v in t {
            *v = vals.next().expect("length checked");
        }
    }
    if !model.all_finite() {
        return Err(Error::invalid(format!(
            "{}: non-finite parameter",
            path.display()
        )));
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &encode(model))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// The model with every parameter rounded through f32, i.e. what a
/// save/load cycle yields.
pub fn round_trip(model: &Model) -> Model {
    decode(&encode(model), Path::new("<memory>")).expect("encoded model decodes")
}
