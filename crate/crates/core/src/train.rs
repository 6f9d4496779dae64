//! Training: reverse-mode gradients, BCE loss, Adam and ensembles.
//!
//! Gradients are derived by hand for each architecture. For CHOWDER and
//! WELDON only the `2R` selected tiles per kernel receive gradient; every
//! other tile's embedding gradient is exactly zero. The objective per bag is
//! `BCE(score, label) + l2_embedding * sum_j ||w_j||^2`, averaged over the
//! bags of a mini-batch.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bagstore::FeatureBag;
use crate::model::{
    baseline_forward, chowder_trace, pool, select_all, sigmoid, Arch, BaselineParams,
    ChowderParams, DropoutMask, Mlp, MlpTrace, Model, ModelOutput, Tensors, WeldonParams,
};
use crate::{par, rng, Error, Result};

/// Scores are clamped to `[BCE_EPS, 1 - BCE_EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Coefficient on the squared norm of the embedding kernels.
    pub l2_embedding: f64,
    pub dropout_rate: f64,
    pub ensemble_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            epochs: 30,
            batch_size: 10,
            l2_embedding: 0.5,
            dropout_rate: 0.5,
            ensemble_size: 10,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_owned()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        if self.ensemble_size == 0 {
            return bad("ensemble_size must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.l2_embedding.is_nan() || self.l2_embedding < 0.0 {
            return bad("l2_embedding must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        Ok(())
    }
}

pub fn bce_loss(score: f64, label: u8) -> f64 {
    let p = score.clamp(BCE_EPS, 1.0 - BCE_EPS);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Derivative of [`bce_loss`] with respect to the pre-sigmoid logit.
/// Zero where the clamp is active.
fn bce_logit_grad(score: f64, label: u8) -> f64 {
    if score > BCE_EPS && score < 1.0 - BCE_EPS {
        score - f64::from(label)
    } else {
        0.0
    }
}

fn l2_penalty(kernels: &Array2<f64>, coef: f64) -> f64 {
    coef * kernels.iter().map(|w| w * w).sum::<f64>()
}

/// Gradients of the per-bag objective.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// Same shape as the model; each entry is a partial derivative.
    pub params: Model,
    /// `M × J` gradient with respect to tile embeddings (absent for the
    /// baselines).
    pub embeddings: Option<Array2<f64>>,
    pub loss: f64,
    pub score: f64,
}

/// Routes `d_selected` (one entry per selected value, kernel-major) back to
/// the embeddings and kernels.
fn scatter_selected(
    bag: &FeatureBag,
    selections: &[crate::model::Selection],
    d_selected: &[f64],
    m: usize,
    grad_kernels: &mut Array2<f64>,
) -> Array2<f64> {
    let j = selections.len();
    let mut d_emb = Array2::zeros((m, j));
    let mut pos = 0;
    for (k, sel) in selections.iter().enumerate() {
        for &t in &sel.indices {
            let g = d_selected[pos];
            pos += 1;
            d_emb[[t, k]] += g;
            let row = bag.features.row(t);
            for (gw, &x) in grad_kernels.row_mut(k).iter_mut().zip(row.iter()) {
                *gw += g * f64::from(x);
            }
        }
    }
    d_emb
}

/// Backpropagates `dz3` (derivative at the output logit) through the MLP.
/// Returns the parameter gradients and the gradient at the MLP input.
fn mlp_backward(
    mlp: &Mlp,
    trace: &MlpTrace,
    x: &[f64],
    dropout: &DropoutMask,
    dz3: f64,
) -> (Mlp, Array1<f64>) {
    let mut g = Mlp::zeros(mlp.n_in());
    g.w3 = &trace.d2 * dz3;
    g.b3[0] = dz3;

    let mask2 = ndarray::ArrayView1::from(&dropout.hidden2[..]);
    let mask1 = ndarray::ArrayView1::from(&dropout.hidden1[..]);
    let dz2: Array1<f64> = &mlp.w3 * dz3 * mask2 * &trace.a2.mapv(|a| a * (1.0 - a));
    g.w2 = outer(&dz2, &trace.d1.view());
    let dz1: Array1<f64> = mlp.w2.t().dot(&dz2) * mask1 * &trace.a1.mapv(|a| a * (1.0 - a));
    g.w1 = outer(&dz1, &ndarray::ArrayView1::from(x));
    let dx = mlp.w1.t().dot(&dz1);
    g.b2 = dz2;
    g.b1 = dz1;
    (g, dx)
}

pub fn chowder_backward(
    bag: &FeatureBag,
    params: &ChowderParams,
    label: u8,
    dropout: &DropoutMask,
    l2_embedding: f64,
) -> Result<Gradients> {
    let trace = chowder_trace(bag, params, Some(dropout))?;
    let score = trace.mlp.score;
    let x = &trace.selection.selected;
    let (g_mlp, dx) = mlp_backward(
        &params.mlp,
        &trace.mlp,
        x,
        dropout,
        bce_logit_grad(score, label),
    );

    let mut g = ChowderParams::zeros(params.j(), params.r, params.dim());
    g.mlp = g_mlp;
    let d_emb = scatter_selected(
        bag,
        &trace.selection.selections,
        dx.as_slice().unwrap(),
        bag.n_tiles(),
        &mut g.kernels,
    );
    g.kernels.scaled_add(2.0 * l2_embedding, &params.kernels);

    Ok(Gradients {
        params: Model::Chowder(g),
        embeddings: Some(d_emb),
        loss: bce_loss(score, label) + l2_penalty(&params.kernels, l2_embedding),
        score,
    })
}

/// Per kernel, the summed inference-mode sensitivity of the score to a
/// uniform upward shift of that kernel's selected values, over `bags`.
pub fn kernel_orientation(params: &ChowderParams, bags: &[&FeatureBag]) -> Result<Vec<f64>> {
    let two_r = 2 * params.r;
    let mut acc = vec![0.0; params.j()];
    let id = DropoutMask::identity();
    for bag in bags {
        let trace = chowder_trace(bag, params, None)?;
        let p = trace.mlp.score;
        let (_, dx) = mlp_backward(
            &params.mlp,
            &trace.mlp,
            &trace.selection.selected,
            &id,
            p * (1.0 - p),
        );
        for (k, a) in acc.iter_mut().enumerate() {
            *a += dx.slice(ndarray::s![k * two_r..(k + 1) * two_r]).sum();
        }
    }
    Ok(acc)
}

/// Negates kernel `k` and rewires the first MLP layer so the network
/// computes the same score: negating a kernel reverses its sorted selection,
/// so input slot `s` of the block takes the negated weights of slot
/// `2R - 1 - s`.
pub fn flip_kernel(params: &mut ChowderParams, k: usize) {
    let two_r = 2 * params.r;
    params.kernels.row_mut(k).mapv_inplace(|w| -w);
    let block = params
        .mlp
        .w1
        .slice(ndarray::s![.., k * two_r..(k + 1) * two_r])
        .to_owned();
    for s in 0..two_r {
        let src = block.column(two_r - 1 - s).mapv(|w| -w);
        params.mlp.w1.column_mut(k * two_r + s).assign(&src);
    }
}

/// Orients every kernel so that larger embeddings push the score up on
/// `bags`. The score function is unchanged up to rounding; only the sign
/// convention of the tile embeddings is fixed.
pub fn orient_kernels(params: &mut ChowderParams, bags: &[&FeatureBag]) -> Result<()> {
    for (k, o) in kernel_orientation(params, bags)?.into_iter().enumerate() {
        if o < 0.0 {
            flip_kernel(params, k);
        }
    }
    Ok(())
}

pub fn weldon_backward(
    bag: &FeatureBag,
    params: &WeldonParams,
    label: u8,
    l2_embedding: f64,
) -> Result<Gradients> {
    let sel = select_all(bag, &params.kernels, params.r)?;
    let score = sigmoid(sel.selected.iter().sum());
    let dz = bce_logit_grad(score, label);
    let mut g = WeldonParams::zeros(params.kernels.nrows(), params.r, params.kernels.ncols());
    let d_sel = vec![dz; sel.selected.len()];
    let d_emb = scatter_selected(bag, &sel.selections, &d_sel, bag.n_tiles(), &mut g.kernels);
    g.kernels.scaled_add(2.0 * l2_embedding, &params.kernels);
    Ok(Gradients {
        params: Model::Weldon(g),
        embeddings: Some(d_emb),
        loss: bce_loss(score, label) + l2_penalty(&params.kernels, l2_embedding),
        score,
    })
}

pub fn baseline_backward(
    bag: &FeatureBag,
    params: &BaselineParams,
    label: u8,
) -> Result<Gradients> {
    let score = baseline_forward(bag, params)?.score;
    let dz = bce_logit_grad(score, label);
    let mut g = BaselineParams::zeros(params.mode, params.weights.len());
    g.weights = pool(bag, params.mode) * dz;
    g.bias[0] = dz;
    Ok(Gradients {
        params: Model::Baseline(g),
        embeddings: None,
        loss: bce_loss(score, label),
        score,
    })
}

/// Gradient of the per-bag objective for any architecture. `dropout` only
/// affects CHOWDER; `None` means no dropout.
pub fn backward(
    model: &Model,
    bag: &FeatureBag,
    label: u8,
    dropout: Option<&DropoutMask>,
    l2_embedding: f64,
) -> Result<Gradients> {
    match model {
        Model::Chowder(c) => {
            let id;
            let mask = match dropout {
                Some(m) => m,
                None => {
                    id = DropoutMask::identity();
                    &id
                }
            };
            chowder_backward(bag, c, label, mask, l2_embedding)
        }
        Model::Weldon(w) => weldon_backward(bag, w, label, l2_embedding),
        Model::Baseline(b) => baseline_backward(bag, b, label),
    }
}

/// Objective value matching [`backward`], for finite-difference checks.
pub fn objective(
    model: &Model,
    bag: &FeatureBag,
    label: u8,
    dropout: Option<&DropoutMask>,
    l2_embedding: f64,
) -> Result<f64> {
    Ok(match model {
        Model::Chowder(c) => {
            let score = chowder_trace(bag, c, dropout)?.mlp.score;
            bce_loss(score, label) + l2_penalty(&c.kernels, l2_embedding)
        }
        Model::Weldon(w) => {
            let score = crate::model::weldon_forward(bag, w)?.score;
            bce_loss(score, label) + l2_penalty(&w.kernels, l2_embedding)
        }
        Model::Baseline(b) => bce_loss(baseline_forward(bag, b)?.score, label),
    })
}

/// Gradient with respect to the raw tile features, `M × P`, from an
/// embedding gradient and the kernels that produced the embeddings.
pub fn feature_gradients(d_embeddings: &Array2<f64>, kernels: &Array2<f64>) -> Array2<f64> {
    d_embeddings.dot(kernels)
}

fn outer(a: &Array1<f64>, b: &ndarray::ArrayView1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.len(), b.len()));
    for (i, mut row) in out.outer_iter_mut().enumerate() {
        let ai = a[i];
        if ai != 0.0 {
            row.zip_mut_with(b, |o, &bj| *o = ai * bj);
        }
    }
    out
}

/// Adam moment estimates, one flat buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new<T: Tensors + ?Sized>(params: &T) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.len()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Tensors + ?Sized>(
    params: &mut T,
    grads: &T,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    let gs = grads.tensors();
    let ps = params.tensors_mut();
    if ps.len() != gs.len() || ps.len() != state.m.len() {
        return Err(Error::Dimension(
            "parameter/gradient/state tensor counts differ".into(),
        ));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in ps.into_iter().zip(gs).zip(&mut state.m).zip(&mut state.v) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::Dimension(
                "tensor shape mismatch in Adam step".into(),
            ));
        }
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

fn add_scaled<T: Tensors + ?Sized>(acc: &mut T, g: &T, scale: f64) {
    for (a, g) in acc.tensors_mut().into_iter().zip(g.tensors()) {
        for (x, y) in a.iter_mut().zip(g) {
            *x += scale * y;
        }
    }
}

/// Mean training objective per epoch.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossHistory {
    pub epochs: Vec<f64>,
}

impl LossHistory {
    /// True when the mean loss over the last third of epochs is below the
    /// mean over the first third.
    pub fn trending_down(&self) -> bool {
        let n = self.epochs.len();
        if n < 3 {
            return n < 2 || self.epochs[n - 1] < self.epochs[0];
        }
        let k = n / 3;
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        mean(&self.epochs[n - k..]) < mean(&self.epochs[..k])
    }

    pub fn last(&self) -> Option<f64> {
        self.epochs.last().copied()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: LossHistory,
}

fn check_dataset(dataset: &[&FeatureBag], arch: &Arch) -> Result<Vec<u8>> {
    arch.validate()?;
    let labels = dataset
        .iter()
        .map(|b| {
            b.label
                .ok_or_else(|| Error::invalid(format!("bag {} has no label", b.slide_id)))
        })
        .collect::<Result<Vec<u8>>>()?;
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass {
            positives,
            negatives,
        });
    }
    let p = dataset[0].dim();
    for b in dataset {
        if b.n_tiles() < arch.min_tiles() {
            return Err(Error::BagTooSmall {
                slide_id: b.slide_id.clone(),
                tiles: b.n_tiles(),
                needed: arch.min_tiles(),
            });
        }
        if b.dim() != p {
            return Err(Error::Dimension(format!(
                "bag {} has P={}, expected {p}",
                b.slide_id,
                b.dim()
            )));
        }
    }
    Ok(labels)
}

/// Trains one network. Initialization, shuffling and dropout all draw from a
/// single ChaCha8 stream seeded with `cfg.seed`, so the result is a pure
/// function of the inputs. CHOWDER kernels are oriented on the training set
/// afterwards (see [`orient_kernels`]).
pub fn train(dataset: &[&FeatureBag], arch: &Arch, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let labels = check_dataset(dataset, arch)?;
    let mut rng = rng::seeded(cfg.seed);
    let mut model = Model::init(arch, dataset[0].dim(), &mut rng)?;
    let mut adam = AdamState::new(&model);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = LossHistory::default();
    let uses_dropout = matches!(model, Model::Chowder(_));

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = model.zeros_like();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let mask = uses_dropout.then(|| DropoutMask::sample(cfg.dropout_rate, &mut rng));
                let g = backward(
                    &model,
                    dataset[i],
                    labels[i],
                    mask.as_ref(),
                    cfg.l2_embedding,
                )?;
                add_scaled(&mut acc, &g.params, scale);
                epoch_loss += g.loss;
            }
            adam_step(&mut model, &acc, &mut adam, cfg)?;
        }
        let mean = epoch_loss / dataset.len() as f64;
        log::debug!("{} seed {} epoch {epoch}: loss {mean:.6}", arch, cfg.seed);
        history.epochs.push(mean);
        if !model.all_finite() {
            return Err(Error::invalid(format!(
                "training diverged at epoch {epoch}"
            )));
        }
    }
    if let Model::Chowder(c) = &mut model {
        orient_kernels(c, dataset)?;
    }
    Ok(TrainOutcome { model, history })
}

/// `E` networks of one architecture, differing only in their seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub members: Vec<Model>,
}

impl Ensemble {
    pub fn new(members: Vec<Model>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::invalid("an ensemble needs at least one member"))?;
        let (arch, p) = (first.arch(), first.dim());
        if members.iter().any(|m| m.arch() != arch || m.dim() != p) {
            return Err(Error::invalid(
                "ensemble members must share architecture and P",
            ));
        }
        Ok(Self { members })
    }

    pub fn arch(&self) -> Arch {
        self.members[0].arch()
    }

    pub fn dim(&self) -> usize {
        self.members[0].dim()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Inference-mode outputs of every member.
    pub fn forward_all(&self, bag: &FeatureBag) -> Result<Vec<ModelOutput>> {
        self.members.iter().map(|m| m.forward(bag)).collect()
    }

    /// Per-tile embedding for `kernel`, averaged over members.
    pub fn tile_scores(&self, bag: &FeatureBag, kernel: usize) -> Result<Vec<f64>> {
        let outs = self.forward_all(bag)?;
        let mut acc = vec![0.0; bag.n_tiles()];
        for o in &outs {
            if kernel >= o.tile_embeddings.ncols() {
                return Err(Error::invalid(format!(
                    "model has {} embedding kernel(s), asked for index {kernel}",
                    o.tile_embeddings.ncols()
                )));
            }
            for (a, v) in acc.iter_mut().zip(o.tile_embeddings.column(kernel)) {
                *a += v;
            }
        }
        let n = outs.len() as f64;
        Ok(acc.into_iter().map(|v| v / n).collect())
    }
}

pub struct EnsembleOutcome {
    pub ensemble: Ensemble,
    pub histories: Vec<LossHistory>,
}

/// Trains `cfg.ensemble_size` members with seeds `seed, seed+1, ...`.
/// Members train concurrently when the `parallel` feature is on.
pub fn train_ensemble(
    dataset: &[&FeatureBag],
    arch: &Arch,
    cfg: &TrainConfig,
) -> Result<EnsembleOutcome> {
    cfg.validate()?;
    check_dataset(dataset, arch)?;
    let outcomes = par::try_map_range(cfg.ensemble_size, |k| {
        let member_cfg = TrainConfig {
            seed: cfg.seed.wrapping_add(k as u64),
            ..cfg.clone()
        };
        train(dataset, arch, &member_cfg)
    })?;
    let (members, histories) = outcomes.into_iter().map(|o| (o.model, o.history)).unzip();
    Ok(EnsembleOutcome {
        ensemble: Ensemble::new(members)?,
        histories,
    })
}

/// Mean of the members' inference scores.
pub fn predict_ensemble(ensemble: &Ensemble, bag: &FeatureBag) -> Result<f64> {
    let mut sum = 0.0;
    for m in &ensemble.members {
        sum += m.forward(bag)?.score;
    }
    Ok(sum / ensemble.members.len() as f64)
}

/// Ensemble scores for many bags, in input order.
pub fn predict_many(ensemble: &Ensemble, bags: &[&FeatureBag]) -> Result<Vec<f64>> {
    par::try_map_range(bags.len(), |i| predict_ensemble(ensemble, bags[i]))
}
