//! Forward passes for CHOWDER, WELDON and the pooling baselines.
//!
//! All three consume a [`FeatureBag`] of `M` tiles with `P` features each.
//! CHOWDER and WELDON project every tile onto `J` learned kernels, keep the
//! `R` largest and `R` smallest projections per kernel (MinMax selection) and
//! score the concatenated `2RJ` vector, with an MLP or a plain sum. The
//! baselines pool features over tiles and apply logistic regression.

use std::cmp::Ordering;
use std::fmt;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::bagstore::FeatureBag;
use crate::{Error, Result};

pub const HIDDEN1: usize = 200;
pub const HIDDEN2: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Mean,
}

/// Architecture and its shape hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "lowercase")]
pub enum Arch {
    Chowder { j: usize, r: usize },
    Weldon { j: usize, r: usize },
    Baseline { pool: PoolMode },
}

impl Arch {
    pub fn chowder(j: usize, r: usize) -> Self {
        Arch::Chowder { j, r }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Arch::Chowder { .. } => "chowder",
            Arch::Weldon { .. } => "weldon",
            Arch::Baseline {
                pool: PoolMode::Max,
            } => "maxpool",
            Arch::Baseline {
                pool: PoolMode::Mean,
            } => "meanpool",
        }
    }

    /// Builds an architecture from its name; `j` and `r` are ignored for
    /// the baselines.
    pub fn from_name(name: &str, j: usize, r: usize) -> Result<Self> {
        let arch = match name {
            "chowder" => Arch::Chowder { j, r },
            "weldon" => Arch::Weldon { j, r },
            "maxpool" => Arch::Baseline {
                pool: PoolMode::Max,
            },
            "meanpool" => Arch::Baseline {
                pool: PoolMode::Mean,
            },
            other => {
                return Err(Error::invalid(format!(
                    "unknown architecture {other:?} (chowder, weldon, maxpool, meanpool)"
                )))
            }
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if let Arch::Chowder { j, r } | Arch::Weldon { j, r } = *self {
            if j == 0 || r == 0 {
                return Err(Error::invalid("J and R must be at least 1"));
            }
        }
        Ok(())
    }

    /// Smallest bag the architecture accepts.
    /// Whether the model produces per-tile embeddings.
    pub fn uses_embeddings(&self) -> bool {
        !matches!(self, Arch::Baseline { .. })
    }

    pub fn min_tiles(&self) -> usize {
        match *self {
            Arch::Chowder { r, .. } | Arch::Weldon { r, .. } => 2 * r,
            Arch::Baseline { .. } => 1,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arch::Chowder { j, r } | Arch::Weldon { j, r } => {
                write!(f, "{}(J={j}, R={r})", self.name())
            }
            Arch::Baseline { .. } => f.write_str(self.name()),
        }
    }
}

/// Flat views over every trainable tensor, in a fixed declared order.
pub trait Tensors {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

fn uniform_fill<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize), fan_in: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_simple_fn(shape, || dist.sample(rng))
}

/// Two sigmoid hidden layers followed by one sigmoid output unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array1<f64>,
    pub b3: Array1<f64>,
}

impl Mlp {
    pub fn zeros(n_in: usize) -> Self {
        Self {
            w1: Array2::zeros((HIDDEN1, n_in)),
            b1: Array1::zeros(HIDDEN1),
            w2: Array2::zeros((HIDDEN2, HIDDEN1)),
            b2: Array1::zeros(HIDDEN2),
            w3: Array1::zeros(HIDDEN2),
            b3: Array1::zeros(1),
        }
    }

    pub fn init<R: Rng + ?Sized>(n_in: usize, rng: &mut R) -> Self {
        Self {
            w1: uniform_fill(rng, (HIDDEN1, n_in), n_in),
            b1: Array1::zeros(HIDDEN1),
            w2: uniform_fill(rng, (HIDDEN2, HIDDEN1), HIDDEN1),
            b2: Array1::zeros(HIDDEN2),
            w3: uniform_fill(rng, (1, HIDDEN2), HIDDEN2)
                .into_shape_with_order(HIDDEN2)
                .unwrap(),
            b3: Array1::zeros(1),
        }
    }

    pub fn n_in(&self) -> usize {
        self.w1.ncols()
    }
}

impl Tensors for Mlp {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            self.b2.as_slice().unwrap(),
            self.w3.as_slice().unwrap(),
            self.b3.as_slice().unwrap(),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
            self.w3.as_slice_mut().unwrap(),
            self.b3.as_slice_mut().unwrap(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChowderParams {
    pub r: usize,
    /// `J × P` embedding kernels.
    pub kernels: Array2<f64>,
    pub mlp: Mlp,
}

impl ChowderParams {
    pub fn zeros(j: usize, r: usize, p: usize) -> Self {
        Self {
            r,
            kernels: Array2::zeros((j, p)),
            mlp: Mlp::zeros(2 * r * j),
        }
    }

    pub fn init<R: Rng + ?Sized>(j: usize, r: usize, p: usize, rng: &mut R) -> Self {
        let kernels = uniform_fill(rng, (j, p), p);
        Self {
            r,
            kernels,
            mlp: Mlp::init(2 * r * j, rng),
        }
    }

    pub fn j(&self) -> usize {
        self.kernels.nrows()
    }

    pub fn dim(&self) -> usize {
        self.kernels.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 || self.j() == 0 {
            return Err(Error::invalid("J and R must be at least 1"));
        }
        if self.mlp.n_in() != 2 * self.r * self.j() {
            return Err(Error::Dimension(format!(
                "MLP input width {} != 2RJ = {}",
                self.mlp.n_in(),
                2 * self.r * self.j()
            )));
        }
        if !self.all_finite() {
            return Err(Error::invalid("non-finite CHOWDER parameter"));
        }
        Ok(())
    }
}

impl Tensors for ChowderParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = vec![self.kernels.as_slice().unwrap()];
        v.extend(self.mlp.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = vec![self.kernels.as_slice_mut().unwrap()];
        v.extend(self.mlp.tensors_mut());
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeldonParams {
    pub r: usize,
    pub kernels: Array2<f64>,
}

impl WeldonParams {
    pub fn zeros(j: usize, r: usize, p: usize) -> Self {
        Self {
            r,
            kernels: Array2::zeros((j, p)),
        }
    }

    pub fn init<R: Rng + ?Sized>(j: usize, r: usize, p: usize, rng: &mut R) -> Self {
        Self {
            r,
            kernels: uniform_fill(rng, (j, p), p),
        }
    }
}

impl Tensors for WeldonParams {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.kernels.as_slice().unwrap()]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.kernels.as_slice_mut().unwrap()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineParams {
    pub mode: PoolMode,
    pub weights: Array1<f64>,
    /// Length-1 tensor so it shares the flat-tensor machinery.
    pub bias: Array1<f64>,
}

impl BaselineParams {
    pub fn zeros(mode: PoolMode, p: usize) -> Self {
        Self {
            mode,
            weights: Array1::zeros(p),
            bias: Array1::zeros(1),
        }
    }

    pub fn init<R: Rng + ?Sized>(mode: PoolMode, p: usize, rng: &mut R) -> Self {
        Self {
            mode,
            weights: uniform_fill(rng, (1, p), p)
                .into_shape_with_order(p)
                .unwrap(),
            bias: Array1::zeros(1),
        }
    }
}

impl Tensors for BaselineParams {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![
            self.weights.as_slice().unwrap(),
            self.bias.as_slice().unwrap(),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.weights.as_slice_mut().unwrap(),
            self.bias.as_slice_mut().unwrap(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Model {
    Chowder(ChowderParams),
    Weldon(WeldonParams),
    Baseline(BaselineParams),
}

impl Model {
    pub fn init<R: Rng + ?Sized>(arch: &Arch, p: usize, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        if p == 0 {
            return Err(Error::invalid("feature width must be positive"));
        }
        Ok(match *arch {
            Arch::Chowder { j, r } => Model::Chowder(ChowderParams::init(j, r, p, rng)),
            Arch::Weldon { j, r } => Model::Weldon(WeldonParams::init(j, r, p, rng)),
            Arch::Baseline { pool } => Model::Baseline(BaselineParams::init(pool, p, rng)),
        })
    }

    /// A model of the same shape with every parameter zero.
    pub fn zeros_like(&self) -> Self {
        match self {
            Model::Chowder(c) => Model::Chowder(ChowderParams::zeros(c.j(), c.r, c.dim())),
            Model::Weldon(w) => Model::Weldon(WeldonParams::zeros(
                w.kernels.nrows(),
                w.r,
                w.kernels.ncols(),
            )),
            Model::Baseline(b) => Model::Baseline(BaselineParams::zeros(b.mode, b.weights.len())),
        }
    }

    pub fn arch(&self) -> Arch {
        match self {
            Model::Chowder(c) => Arch::Chowder { j: c.j(), r: c.r },
            Model::Weldon(w) => Arch::Weldon {
                j: w.kernels.nrows(),
                r: w.r,
            },
            Model::Baseline(b) => Arch::Baseline { pool: b.mode },
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Model::Chowder(c) => c.dim(),
            Model::Weldon(w) => w.kernels.ncols(),
            Model::Baseline(b) => b.weights.len(),
        }
    }

    /// Inference-mode forward pass (no dropout).
    pub fn forward(&self, bag: &FeatureBag) -> Result<ModelOutput> {
        match self {
            Model::Chowder(c) => chowder_forward(bag, c),
            Model::Weldon(w) => weldon_forward(bag, w),
            Model::Baseline(b) => baseline_forward(bag, b),
        }
    }
}

impl Tensors for Model {
    fn tensors(&self) -> Vec<&[f64]> {
        match self {
            Model::Chowder(c) => c.tensors(),
            Model::Weldon(w) => w.tensors(),
            Model::Baseline(b) => b.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Model::Chowder(c) => c.tensors_mut(),
            Model::Weldon(w) => w.tensors_mut(),
            Model::Baseline(b) => b.tensors_mut(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub score: f64,
    /// `M × J` tile projections; `M × 0` for the baselines.
    pub tile_embeddings: Array2<f64>,
    /// Per kernel, the `2R` selected tile indices (top `R` then bottom `R`).
    pub selected_indices: Option<Vec<Vec<usize>>>,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `e[t][j] = <kernels[j], features[t]>`, accumulated in f64.
pub fn embed(features: ArrayView2<f32>, kernels: ArrayView2<f64>) -> Result<Array2<f64>> {
    let (m, p) = features.dim();
    let (j, pk) = kernels.dim();
    if p != pk {
        return Err(Error::Dimension(format!(
            "features have P={p}, kernels have P={pk}"
        )));
    }
    let mut out = Array2::zeros((m, j));
    for (t, row) in features.outer_iter().enumerate() {
        for (k, w) in kernels.outer_iter().enumerate() {
            out[[t, k]] = row
                .iter()
                .zip(w.iter())
                .map(|(&x, &w)| f64::from(x) * w)
                .sum();
        }
    }
    Ok(out)
}

/// Result of MinMax selection for one kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// `R` largest then `R` smallest, all in descending order.
    pub values: Vec<f64>,
    pub indices: Vec<usize>,
}

/// Keeps the `r` largest and `r` smallest values. Ties sort by ascending
/// index, so the selection is deterministic.
pub fn minmax_select(values: &[f64], r: usize) -> Result<Selection> {
    let m = values.len();
    if r == 0 {
        return Err(Error::invalid("R must be at least 1"));
    }
    if m < 2 * r {
        return Err(Error::Dimension(format!(
            "MinMax with R={r} needs at least {} instances, got {m}",
            2 * r
        )));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let indices: Vec<usize> = order[..r].iter().chain(&order[m - r..]).copied().collect();
    let values = indices.iter().map(|&i| values[i]).collect();
    Ok(Selection { values, indices })
}

/// Dropout multipliers for the two hidden layers: each entry is 0 or
/// `1 / (1 - rate)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub hidden1: Vec<f64>,
    pub hidden2: Vec<f64>,
}

impl DropoutMask {
    pub fn identity() -> Self {
        Self {
            hidden1: vec![1.0; HIDDEN1],
            hidden2: vec![1.0; HIDDEN2],
        }
    }

    pub fn sample<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> Self {
        if rate <= 0.0 {
            return Self::identity();
        }
        let keep = 1.0 / (1.0 - rate);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    if rng.random::<f64>() < rate {
                        0.0
                    } else {
                        keep
                    }
                })
                .collect()
        };
        let hidden1 = draw(HIDDEN1);
        let hidden2 = draw(HIDDEN2);
        Self { hidden1, hidden2 }
    }
}

/// Intermediate activations of one MLP evaluation.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    /// Post-sigmoid, pre-dropout.
    pub a1: Array1<f64>,
    pub a2: Array1<f64>,
    /// Post-dropout inputs to the next layer.
    pub d1: Array1<f64>,
    pub d2: Array1<f64>,
    pub score: f64,
}

pub fn mlp_trace(x: &[f64], mlp: &Mlp, dropout: Option<&DropoutMask>) -> Result<MlpTrace> {
    if x.len() != mlp.n_in() {
        return Err(Error::Dimension(format!(
            "MLP expects {} inputs, got {}",
            mlp.n_in(),
            x.len()
        )));
    }
    let x = ndarray::ArrayView1::from(x);
    let a1 = (mlp.w1.dot(&x) + &mlp.b1).mapv(sigmoid);
    let d1 = match dropout {
        Some(m) => &a1 * &ndarray::ArrayView1::from(&m.hidden1[..]),
        None => a1.clone(),
    };
    let a2 = (mlp.w2.dot(&d1) + &mlp.b2).mapv(sigmoid);
    let d2 = match dropout {
        Some(m) => &a2 * &ndarray::ArrayView1::from(&m.hidden2[..]),
        None => a2.clone(),
    };
    let score = sigmoid(mlp.w3.dot(&d2) + mlp.b3[0]);
    Ok(MlpTrace {
        a1,
        a2,
        d1,
        d2,
        score,
    })
}

pub fn mlp_forward(x: &[f64], mlp: &Mlp) -> Result<f64> {
    Ok(mlp_trace(x, mlp, None)?.score)
}

fn check_bag(bag: &FeatureBag, r: usize, p: usize) -> Result<()> {
    if bag.n_tiles() < 2 * r {
        return Err(Error::BagTooSmall {
            slide_id: bag.slide_id.clone(),
            tiles: bag.n_tiles(),
            needed: 2 * r,
        });
    }
    if bag.dim() != p {
        return Err(Error::Dimension(format!(
            "bag {} has P={}, model expects {p}",
            bag.slide_id,
            bag.dim()
        )));
    }
    Ok(())
}

/// Embedding plus per-kernel selection, concatenated kernel-major.
#[derive(Debug, Clone)]
pub struct SelectionTrace {
    pub embeddings: Array2<f64>,
    pub selections: Vec<Selection>,
    /// `2RJ` selected values, kernel-major.
    pub selected: Vec<f64>,
}

pub fn select_all(bag: &FeatureBag, kernels: &Array2<f64>, r: usize) -> Result<SelectionTrace> {
    check_bag(bag, r, kernels.ncols())?;
    let embeddings = embed(bag.features.view(), kernels.view())?;
    let selections = embeddings
        .columns()
        .into_iter()
        .map(|col| minmax_select(&col.to_vec(), r))
        .collect::<Result<Vec<_>>>()?;
    let selected = selections
        .iter()
        .flat_map(|s| s.values.iter().copied())
        .collect();
    Ok(SelectionTrace {
        embeddings,
        selections,
        selected,
    })
}

#[derive(Debug, Clone)]
pub struct ChowderTrace {
    pub selection: SelectionTrace,
    pub mlp: MlpTrace,
}

pub fn chowder_trace(
    bag: &FeatureBag,
    params: &ChowderParams,
    dropout: Option<&DropoutMask>,
) -> Result<ChowderTrace> {
    let selection = select_all(bag, &params.kernels, params.r)?;
    let mlp = mlp_trace(&selection.selected, &params.mlp, dropout)?;
    Ok(ChowderTrace { selection, mlp })
}

fn into_output(score: f64, sel: SelectionTrace) -> ModelOutput {
    ModelOutput {
        score,
        selected_indices: Some(sel.selections.into_iter().map(|s| s.indices).collect()),
        tile_embeddings: sel.embeddings,
    }
}

pub fn chowder_forward(bag: &FeatureBag, params: &ChowderParams) -> Result<ModelOutput> {
    let trace = chowder_trace(bag, params, None)?;
    Ok(into_output(trace.mlp.score, trace.selection))
}

pub fn weldon_forward(bag: &FeatureBag, params: &WeldonParams) -> Result<ModelOutput> {
    let sel = select_all(bag, &params.kernels, params.r)?;
    let score = sigmoid(sel.selected.iter().sum());
    Ok(into_output(score, sel))
}

/// Elementwise max or mean over the tile axis.
pub fn pool(bag: &FeatureBag, mode: PoolMode) -> Array1<f64> {
    let f = bag.features.mapv(f64::from);
    match mode {
        PoolMode::Max => f.fold_axis(ndarray::Axis(0), f64::NEG_INFINITY, |&a, &b| a.max(b)),
        PoolMode::Mean => f.mean_axis(ndarray::Axis(0)).expect("bags are non-empty"),
    }
}

pub fn baseline_forward(bag: &FeatureBag, params: &BaselineParams) -> Result<ModelOutput> {
    check_bag(bag, 0, params.weights.len())?;
    let agg = pool(bag, params.mode);
    let score = sigmoid(params.weights.dot(&agg) + params.bias[0]);
    Ok(ModelOutput {
        score,
        tile_embeddings: Array2::zeros((bag.n_tiles(), 0)),
        selected_indices: None,
    })
}
