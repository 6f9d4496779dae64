//! Classification and localization metrics.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::path::Path;

use serde::Serialize;

use crate::model::ModelOutput;
use crate::preprocess::{RgbImage, TileRef};
use crate::{Error, Result};

/// False-positive rates (mean per slide) at which FROC sensitivity is read.
pub const FROC_FP_RATES: [f64; 6] = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

pub const DEFAULT_TAU: f64 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

fn class_counts(labels: &[u8]) -> Result<(u64, u64)> {
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass {
            positives: pos as usize,
            negatives: neg as usize,
        });
    }
    Ok((pos, neg))
}

/// Score-descending order with ties grouped; returns index groups.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Area under the ROC curve as the Mann–Whitney statistic
/// `P(s_pos > s_neg) + P(s_pos = s_neg) / 2`.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let (pos, neg) = class_counts(labels)?;
    // Walk from the lowest score up, counting negatives already passed.
    let mut neg_below: u64 = 0;
    let mut twice_concordant: u128 = 0;
    for g in tie_groups(scores).iter().rev() {
        let gp = g.iter().filter(|&&i| labels[i] == 1).count() as u64;
        let gn = g.len() as u64 - gp;
        twice_concordant += 2 * u128::from(gp) * u128::from(neg_below) + u128::from(gp * gn);
        neg_below += gn;
    }
    Ok(twice_concordant as f64 / 2.0 / (pos as f64 * neg as f64))
}

/// ROC curve from the strictest threshold down; starts at (0, 0).
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<RocPoint>> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(
            "scores and labels differ in length".into(),
        ));
    }
    let (pos, neg) = class_counts(labels)?;
    let mut curve = vec![RocPoint {
        threshold: f64::INFINITY,
        tpr: 0.0,
        fpr: 0.0,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    for g in tie_groups(scores) {
        for &i in &g {
            if labels[i] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        curve.push(RocPoint {
            threshold: scores[g[0]],
            tpr: tp as f64 / pos as f64,
            fpr: fp as f64 / neg as f64,
        });
    }
    Ok(curve)
}

pub fn roc_csv(curve: &[RocPoint]) -> String {
    let mut s = String::from("threshold,fpr,tpr\n");
    for p in curve {
        s.push_str(&format!("{},{:.6},{:.6}\n", p.threshold, p.fpr, p.tpr));
    }
    s
}

pub type GridCoord = (i32, i32);

/// Tumor tiles of one slide, grouped into lesions (4-connected components).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LesionGroundTruth {
    pub slide_id: String,
    pub lesions: Vec<BTreeSet<GridCoord>>,
}

impl LesionGroundTruth {
    pub fn from_tiles(
        slide_id: impl Into<String>,
        tumor: impl IntoIterator<Item = GridCoord>,
    ) -> Self {
        let mut remaining: BTreeSet<GridCoord> = tumor.into_iter().collect();
        let mut lesions = Vec::new();
        while let Some(&start) = remaining.iter().next() {
            remaining.remove(&start);
            let mut comp = BTreeSet::from([start]);
            let mut queue = VecDeque::from([start]);
            while let Some((x, y)) = queue.pop_front() {
                for n in [(x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)] {
                    if remaining.remove(&n) {
                        comp.insert(n);
                        queue.push_back(n);
                    }
                }
            }
            lesions.push(comp);
        }
        Self {
            slide_id: slide_id.into(),
            lesions,
        }
    }

    pub fn negative(slide_id: impl Into<String>) -> Self {
        Self {
            slide_id: slide_id.into(),
            lesions: Vec::new(),
        }
    }

    pub fn tumor_tiles(&self) -> BTreeSet<GridCoord> {
        self.lesions.iter().flatten().copied().collect()
    }

    /// Reads a `grid_x,grid_y` CSV of tumor tiles.
    pub fn load(path: &Path, slide_id: &str) -> Result<Self> {
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
        let headers: Vec<String> = rdr
            .headers()
            .map_err(csv_err)?
            .iter()
            .map(str::to_owned)
            .collect();
        if headers != ["grid_x", "grid_y"] {
            return Err(Error::invalid(format!(
                "{}: ground truth header must be grid_x,grid_y",
                path.display()
            )));
        }
        let mut tiles = Vec::new();
        for row in rdr.deserialize::<(i32, i32)>() {
            tiles.push(row.map_err(csv_err)?);
        }
        Ok(Self::from_tiles(slide_id, tiles))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("grid_x,grid_y\n");
        for (x, y) in self.tumor_tiles() {
            s.push_str(&format!("{x},{y}\n"));
        }
        s
    }
}

/// Per-tile scores of one slide with a flagging threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationMap {
    pub slide_id: String,
    pub tiles: Vec<GridCoord>,
    pub scores: Vec<f64>,
    pub tau: f64,
}

impl LocalizationMap {
    pub fn new(
        slide_id: impl Into<String>,
        tiles: Vec<GridCoord>,
        scores: Vec<f64>,
        tau: f64,
    ) -> Result<Self> {
        if tiles.len() != scores.len() {
            return Err(Error::Dimension(format!(
                "{} tiles but {} scores",
                tiles.len(),
                scores.len()
            )));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::invalid("NaN tile score"));
        }
        Ok(Self {
            slide_id: slide_id.into(),
            tiles,
            scores,
            tau,
        })
    }

    /// Tiles with score strictly above `tau`.
    pub fn flags(&self) -> Vec<bool> {
        self.scores.iter().map(|&s| s > self.tau).collect()
    }

    pub fn n_flagged(&self) -> usize {
        self.scores.iter().filter(|&&s| s > self.tau).count()
    }

    /// `(min_x, min_y, width, height)` of the tile grid covered by the map.
    pub fn extent(&self) -> Option<(i32, i32, u32, u32)> {
        let min_x = self.tiles.iter().map(|t| t.0).min()?;
        let max_x = self.tiles.iter().map(|t| t.0).max()?;
        let min_y = self.tiles.iter().map(|t| t.1).min()?;
        let max_y = self.tiles.iter().map(|t| t.1).max()?;
        Some((
            min_x,
            min_y,
            (max_x - min_x + 1) as u32,
            (max_y - min_y + 1) as u32,
        ))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("grid_x,grid_y,score,flag\n");
        for ((x, y), (&score, flag)) in self.tiles.iter().zip(self.scores.iter().zip(self.flags()))
        {
            s.push_str(&format!("{x},{y},{score:.6},{}\n", u8::from(flag)));
        }
        s
    }

    /// Heatmap with `cell`×`cell` pixels per tile: positive scores shade from
    /// white to red by their share of the largest positive score, other
    /// sampled tiles are white, unsampled grid cells light gray.
    /// Reads a heatmap written by [`LocalizationMap::to_csv`]. The `flag`
    /// column is ignored; flags are recomputed from `tau`.
    pub fn load(path: &Path, slide_id: &str, tau: f64) -> Result<Self> {
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
        let headers: Vec<String> = rdr
            .headers()
            .map_err(csv_err)?
            .iter()
            .map(str::to_owned)
            .collect();
        if headers != ["grid_x", "grid_y", "score", "flag"] {
            return Err(Error::invalid(format!(
                "{}: heatmap header must be grid_x,grid_y,score,flag",
                path.display()
            )));
        }
        let mut tiles = Vec::new();
        let mut scores = Vec::new();
        for row in rdr.deserialize::<(i32, i32, f64, u8)>() {
            let (x, y, s, _) = row.map_err(csv_err)?;
            tiles.push((x, y));
            scores.push(s);
        }
        Self::new(slide_id, tiles, scores, tau)
    }

    pub fn render(&self, cell: u32) -> Result<RgbImage> {
        let cell = cell.max(1);
        let Some((x0, y0, w, h)) = self.extent() else {
            return RgbImage::filled(cell, cell, [220, 220, 220]);
        };
        let max_pos = self.scores.iter().copied().fold(0.0f64, f64::max);
        let mut px = vec![[220u8, 220, 220]; (w * cell * h * cell) as usize];
        let stride = (w * cell) as usize;
        for (&(gx, gy), &s) in self.tiles.iter().zip(&self.scores) {
            let level = if s > 0.0 && max_pos > 0.0 {
                s / max_pos
            } else {
                0.0
            };
            let fade = (255.0 * (1.0 - level)).round() as u8;
            let color = [255, fade, fade];
            let cx = (gx - x0) as u32 * cell;
            let cy = (gy - y0) as u32 * cell;
            for y in cy..cy + cell {
                for x in cx..cx + cell {
                    px[y as usize * stride + x as usize] = color;
                }
            }
        }
        RgbImage::new(w * cell, h * cell, px)
    }
}

/// Builds a map from one model output. `kernel` picks the embedding column
/// and may be omitted only when the model has a single kernel.
pub fn localization_map(
    slide_id: &str,
    output: &ModelOutput,
    tiles: &[TileRef],
    tau: f64,
    kernel: Option<usize>,
) -> Result<LocalizationMap> {
    let j = output.tile_embeddings.ncols();
    let k = match (kernel, j) {
        (_, 0) => return Err(Error::invalid("model exposes no tile embeddings")),
        (Some(k), _) if k < j => k,
        (Some(k), _) => return Err(Error::invalid(format!("kernel {k} out of range for J={j}"))),
        (None, 1) => 0,
        (None, _) => {
            return Err(Error::invalid(format!(
                "J={j}: a kernel index is required for localization"
            )))
        }
    };
    if tiles.len() != output.tile_embeddings.nrows() {
        return Err(Error::Dimension(
            "tile list and embeddings differ in length".into(),
        ));
    }
    LocalizationMap::new(
        slide_id,
        tiles.iter().map(|t| (t.grid_x, t.grid_y)).collect(),
        output.tile_embeddings.column(k).to_vec(),
        tau,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrocPoint {
    pub threshold: f64,
    pub mean_fps: f64,
    pub sensitivity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrocResult {
    pub score: f64,
    /// Sensitivity read at each requested FP rate.
    pub sensitivities: Vec<f64>,
    pub curve: Vec<FrocPoint>,
}

pub fn froc_csv(curve: &[FrocPoint]) -> String {
    let mut s = String::from("threshold,mean_fps,sensitivity\n");
    for p in curve {
        s.push_str(&format!(
            "{},{:.6},{:.6}\n",
            p.threshold, p.mean_fps, p.sensitivity
        ));
    }
    s
}

/// Highest sensitivity reached at or below `rate` mean false positives.
pub fn sensitivity_at(curve: &[FrocPoint], rate: f64) -> f64 {
    curve
        .iter()
        .filter(|p| p.mean_fps <= rate)
        .map(|p| p.sensitivity)
        .fold(0.0, f64::max)
}

/// Free-response ROC over a set of slides.
///
/// The threshold sweeps every distinct tile score from high to low; at each
/// step the tiles scoring at or above it are flagged. A lesion is detected
/// once any of its tiles is flagged; a flagged tile outside every lesion is a
/// false positive. The score averages sensitivity at `fp_rates`.
pub fn froc(
    maps: &[LocalizationMap],
    truth: &[LesionGroundTruth],
    fp_rates: &[f64],
) -> Result<FrocResult> {
    let by_id: HashMap<&str, &LesionGroundTruth> =
        truth.iter().map(|t| (t.slide_id.as_str(), t)).collect();
    if by_id.len() != truth.len() || maps.len() != truth.len() {
        return Err(Error::invalid(
            "maps and ground truth must cover the same slides",
        ));
    }
    let mut lesion_of: Vec<HashMap<GridCoord, usize>> = Vec::with_capacity(maps.len());
    let mut n_lesions = 0usize;
    for m in maps {
        let t = by_id
            .get(m.slide_id.as_str())
            .ok_or_else(|| Error::invalid(format!("no ground truth for slide {}", m.slide_id)))?;
        let mut lookup = HashMap::new();
        for lesion in &t.lesions {
            for &c in lesion {
                lookup.insert(c, n_lesions);
            }
            n_lesions += 1;
        }
        lesion_of.push(lookup);
    }
    if n_lesions == 0 {
        return Err(Error::invalid("ground truth has no lesions"));
    }

    let mut entries: Vec<(f64, usize, usize)> = maps
        .iter()
        .enumerate()
        .flat_map(|(s, m)| m.scores.iter().enumerate().map(move |(i, &v)| (v, s, i)))
        .collect();
    entries.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let n_slides = maps.len() as f64;
    let mut detected = vec![false; n_lesions];
    let (mut hits, mut fps) = (0usize, 0usize);
    let mut curve = vec![FrocPoint {
        threshold: f64::INFINITY,
        mean_fps: 0.0,
        sensitivity: 0.0,
    }];
    let mut i = 0;
    while i < entries.len() {
        let threshold = entries[i].0;
        while i < entries.len() && entries[i].0 == threshold {
            let (_, s, t) = entries[i];
            match lesion_of[s].get(&maps[s].tiles[t]) {
                Some(&l) => {
                    if !detected[l] {
                        detected[l] = true;
                        hits += 1;
                    }
                }
                None => fps += 1,
            }
            i += 1;
        }
        curve.push(FrocPoint {
            threshold,
            mean_fps: fps as f64 / n_slides,
            sensitivity: hits as f64 / n_lesions as f64,
        });
    }
    let sensitivities: Vec<f64> = fp_rates
        .iter()
        .map(|&r| sensitivity_at(&curve, r))
        .collect();
    let score = if sensitivities.is_empty() {
        0.0
    } else {
        sensitivities.iter().sum::<f64>() / sensitivities.len() as f64
    };
    Ok(FrocResult {
        score,
        sensitivities,
        curve,
    })
}
