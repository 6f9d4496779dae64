//! Slide preprocessing: tissue detection, color normalization, tiling and
//! tile sampling.
//!
//! Tissue is detected on a low-resolution thumbnail by thresholding the hue
//! and saturation channels independently with Otsu's method and keeping the
//! pixels that are foreground in both. Tiles come from a fixed, non-overlapping
//! grid of `tile_size` squares; partial edge tiles are dropped.

use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::{Error, Result};

pub const DEFAULT_TILE_SIZE: u32 = 224;

/// 8-bit RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: u32,
    height: u32,
    pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn new(width: u32, height: u32, pixels: Vec<[u8; 3]>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if pixels.len() != width as usize * height as usize {
            return Err(Error::Dimension(format!(
                "{}x{} image needs {} pixels, got {}",
                width,
                height,
                width as usize * height as usize,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self> {
        Self::new(width, height, vec![rgb; width as usize * height as usize])
    }

    /// Reads a PNG or PPM file.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Self::new(w, h, rgb.pixels().map(|p| p.0).collect())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = self.to_image_buffer();
        let mut bytes = Vec::new();
        buf.write_to(
            &mut std::io::Cursor::new(&mut bytes),
            image::ImageFormat::Png,
        )
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        crate::io::write_atomic(path, &bytes)
    }

    fn to_image_buffer(&self) -> image::RgbImage {
        let raw: Vec<u8> = self.pixels.iter().flatten().copied().collect();
        image::RgbImage::from_raw(self.width, self.height, raw).expect("dimensions validated")
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    /// Copies the `w`×`h` window with top-left corner `(x, y)`.
    pub fn crop(&self, x: u32, y: u32, w: u32, h: u32) -> Result<Self> {
        if x + w > self.width || y + h > self.height {
            return Err(Error::Dimension(format!(
                "crop {w}x{h}+{x}+{y} outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut out = Vec::with_capacity(w as usize * h as usize);
        for row in y..y + h {
            let start = row as usize * self.width as usize + x as usize;
            out.extend_from_slice(&self.pixels[start..start + w as usize]);
        }
        Self::new(w, h, out)
    }

    /// Box-filter downsample by an integer factor; trailing partial blocks
    /// are averaged over the pixels they contain.
    pub fn downsample(&self, factor: u32) -> Result<Self> {
        if factor == 0 {
            return Err(Error::invalid("downsample factor must be positive"));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let w = self.width.div_ceil(factor);
        let h = self.height.div_ceil(factor);
        let mut out = Vec::with_capacity(w as usize * h as usize);
        for by in 0..h {
            for bx in 0..w {
                let mut acc = [0u64; 3];
                let mut n = 0u64;
                for y in by * factor..((by + 1) * factor).min(self.height) {
                    for x in bx * factor..((bx + 1) * factor).min(self.width) {
                        let p = self.get(x, y);
                        for c in 0..3 {
                            acc[c] += u64::from(p[c]);
                        }
                        n += 1;
                    }
                }
                out.push(acc.map(|a| ((a + n / 2) / n) as u8));
            }
        }
        Self::new(w, h, out)
    }
}

/// HSV image with all three channels in `[0, 1]`; hue is degrees / 360.
#[derive(Debug, Clone, PartialEq)]
pub struct HsvImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<[f32; 3]>,
}

/// Per-pixel tissue flags at the resolution of the image they came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TissueMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl TissueMask {
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width as usize * height as usize {
            return Err(Error::Dimension(format!(
                "{}x{} mask needs {} bits, got {}",
                width,
                height,
                width as usize * height as usize,
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn filled(width: u32, height: u32, value: bool) -> Self {
        Self {
            width,
            height,
            bits: vec![value; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// One tile on the non-overlapping grid of a slide.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileRef {
    pub slide_id: String,
    pub level: u32,
    pub grid_x: i32,
    pub grid_y: i32,
    pub px: i32,
    pub py: i32,
}

impl TileRef {
    pub fn at_grid(slide_id: &str, level: u32, grid_x: i32, grid_y: i32, tile_size: u32) -> Self {
        let ts = tile_size as i32;
        Self {
            slide_id: slide_id.to_owned(),
            level,
            grid_x,
            grid_y,
            px: grid_x * ts,
            py: grid_y * ts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub tile_size: u32,
    /// Working resolution in microns per pixel.
    pub target_mpp: f32,
    pub min_tissue_fraction: f64,
    pub min_sample_count: u64,
    pub rng_seed: u64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            tile_size: DEFAULT_TILE_SIZE,
            target_mpp: 0.5,
            min_tissue_fraction: 0.8,
            min_sample_count: 100,
            rng_seed: 0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile_size == 0 {
            return Err(Error::invalid("tile_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.min_tissue_fraction) {
            return Err(Error::invalid("min_tissue_fraction must lie in [0, 1]"));
        }
        if self.min_sample_count == 0 {
            return Err(Error::invalid("min_sample_count must be at least 1"));
        }
        Ok(())
    }
}

pub fn rgb_to_hsv(image: &RgbImage) -> HsvImage {
    let pixels = image.pixels.iter().map(|&p| pixel_to_hsv(p)).collect();
    HsvImage {
        width: image.width,
        height: image.height,
        pixels,
    }
}

fn pixel_to_hsv([r, g, b]: [u8; 3]) -> [f32; 3] {
    let (r, g, b) = (
        f32::from(r) / 255.0,
        f32::from(g) / 255.0,
        f32::from(b) / 255.0,
    );
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h_deg = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let h = (h_deg / 360.0).rem_euclid(1.0);
    [h, s, v]
}

/// Otsu's threshold over a 256-bin histogram.
///
/// Values strictly above the returned index are foreground. Among thresholds
/// with equal between-class variance the smallest one wins.
pub fn otsu_threshold(histogram: &[u64; 256]) -> Result<u8> {
    let nonzero = histogram.iter().filter(|&&c| c > 0).count();
    if nonzero < 2 {
        return Err(Error::DegenerateHistogram { nonzero });
    }
    let total: u128 = histogram.iter().map(|&c| u128::from(c)).sum();
    let total_sum: u128 = histogram
        .iter()
        .enumerate()
        .map(|(i, &c)| i as u128 * u128::from(c))
        .sum();

    // Between-class variance is (S0*N - S*n0)^2 / (N^2 n0 n1); the N^2 factor
    // is common to every candidate and dropped.
    let mut best: Option<(u8, f64)> = None;
    let mut n0: u128 = 0;
    let mut s0: u128 = 0;
    for (t, &c) in histogram.iter().enumerate() {
        n0 += u128::from(c);
        s0 += t as u128 * u128::from(c);
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let num = (s0 * total) as i128 - (total_sum * n0) as i128;
        let num = num as f64;
        let score = num * num / (n0 as f64 * n1 as f64);
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((t as u8, score));
        }
    }
    Ok(best.expect("two nonzero bins guarantee a valid split").0)
}

/// Quantizes a `[0, 1]` channel value into one of 256 bins.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 256.0).floor().min(255.0) as u8
}

pub fn channel_histogram(hsv: &HsvImage, channel: usize) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for p in &hsv.pixels {
        hist[quantize(p[channel]) as usize] += 1;
    }
    hist
}

fn threshold_channel(hsv: &HsvImage, channel: usize) -> Result<TissueMask> {
    let t = otsu_threshold(&channel_histogram(hsv, channel))?;
    let bits = hsv
        .pixels
        .iter()
        .map(|p| quantize(p[channel]) > t)
        .collect();
    TissueMask::new(hsv.width, hsv.height, bits)
}

/// Per-pixel logical AND of two masks of equal size.
pub fn combine_masks(a: &TissueMask, b: &TissueMask) -> Result<TissueMask> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Dimension(format!(
            "mask sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let bits = a.bits.iter().zip(&b.bits).map(|(&x, &y)| x && y).collect();
    TissueMask::new(a.width, a.height, bits)
}

pub fn tissue_mask(image: &RgbImage) -> Result<TissueMask> {
    let hsv = rgb_to_hsv(image);
    let hue = threshold_channel(&hsv, 0)?;
    let sat = threshold_channel(&hsv, 1)?;
    combine_masks(&hue, &sat)
}

/// Stretches each RGB channel so its minimum maps to 0 and its maximum to 255.
/// Constant channels become 0.
pub fn color_normalize(image: &RgbImage) -> RgbImage {
    let mut lo = [u8::MAX; 3];
    let mut hi = [u8::MIN; 3];
    for p in &image.pixels {
        for c in 0..3 {
            lo[c] = lo[c].min(p[c]);
            hi[c] = hi[c].max(p[c]);
        }
    }
    let pixels = image
        .pixels
        .iter()
        .map(|p| {
            let mut out = [0u8; 3];
            for c in 0..3 {
                if hi[c] > lo[c] {
                    let span = f64::from(hi[c] - lo[c]);
                    let v = f64::from(p[c] - lo[c]) * 255.0 / span;
                    out[c] = v.round() as u8;
                }
            }
            out
        })
        .collect();
    RgbImage {
        width: image.width,
        height: image.height,
        pixels,
    }
}

/// Fraction of mask pixels inside the slide-space rectangle that are tissue.
/// A mask pixel belongs to the rectangle when its center does; the test is
/// done in integers so pixel centers on a tile edge are classified exactly.
fn mask_overlap(mask: &TissueMask, slide: (u32, u32), x0: u32, y0: u32, size: u32) -> f64 {
    // Mask pixel i has slide-space center (2i + 1) * W / (2 * mw); it lies in
    // [a, b) when ceil((2a*mw - W) / 2W) <= i < ceil((2b*mw - W) / 2W).
    let range = |a: u32, b: u32, full: u32, mw: u32| {
        let first = |v: u32| {
            let num = 2 * i64::from(v) * i64::from(mw) - i64::from(full);
            let den = 2 * i64::from(full);
            (-((-num).div_euclid(den))).clamp(0, i64::from(mw)) as u32
        };
        first(a)..first(b)
    };
    let xs = range(x0, x0 + size, slide.0, mask.width);
    let ys = range(y0, y0 + size, slide.1, mask.height);
    let n = xs.len() * ys.len();
    if n == 0 {
        return 0.0;
    }
    let hit: usize = ys
        .flat_map(|y| xs.clone().map(move |x| (x, y)))
        .filter(|&(x, y)| mask.get(x, y))
        .count();
    hit as f64 / n as f64
}

/// Complete grid tiles whose tissue overlap reaches `min_tissue_fraction`,
/// ordered by `(grid_y, grid_x)`. The mask may be at any downsampled
/// resolution of the slide.
pub fn grid_tiles(
    slide_id: &str,
    slide_width: u32,
    slide_height: u32,
    level: u32,
    mask: &TissueMask,
    cfg: &PreprocessConfig,
) -> Result<Vec<TileRef>> {
    cfg.validate()?;
    if mask.width == 0 || mask.height == 0 {
        return Err(Error::invalid("empty tissue mask"));
    }
    let ts = cfg.tile_size;
    let mut tiles = Vec::new();
    for gy in 0..slide_height / ts {
        for gx in 0..slide_width / ts {
            let frac = mask_overlap(mask, (slide_width, slide_height), gx * ts, gy * ts, ts);
            if frac >= cfg.min_tissue_fraction {
                tiles.push(TileRef::at_grid(slide_id, level, gx as i32, gy as i32, ts));
            }
        }
    }
    Ok(tiles)
}

/// Number of tiles to sample from a slide with `available` candidate tiles,
/// given the dataset mean `mean_available`: `min(available, max(min_count,
/// floor(mean_available / 2)))`.
pub fn sample_count(available: u64, mean_available: f64, min_count: u64) -> u64 {
    let half = (mean_available.max(0.0) / 2.0).floor() as u64;
    available.min(min_count.max(half))
}

/// Uniform sample of `count` tiles without replacement, keeping input order.
pub fn sample_tiles(tiles: &[TileRef], count: usize, seed: u64) -> Result<Vec<TileRef>> {
    if count > tiles.len() {
        return Err(Error::invalid(format!(
            "cannot sample {count} of {} tiles",
            tiles.len()
        )));
    }
    if count == tiles.len() {
        return Ok(tiles.to_vec());
    }
    let mut rng = rng::seeded(seed);
    let mut picked = index::sample(&mut rng, tiles.len(), count).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| tiles[i].clone()).collect())
}

/// Candidate tiles of one slide: the tissue mask is computed on a thumbnail
/// downsampled by `mask_downsample`, then the grid is laid over the full
/// image. A slide whose thumbnail has a single hue or saturation value has
/// no detectable tissue and yields no tiles.
pub fn candidate_tiles(
    slide_id: &str,
    image: &RgbImage,
    level: u32,
    mask_downsample: u32,
    cfg: &PreprocessConfig,
) -> Result<Vec<TileRef>> {
    let thumb = image.downsample(mask_downsample)?;
    let mask = match tissue_mask(&thumb) {
        Ok(m) => m,
        Err(Error::DegenerateHistogram { .. }) => {
            log::warn!("slide {slide_id}: uniform thumbnail, no tissue detected");
            return Ok(Vec::new());
        }
        Err(e) => return Err(e),
    };
    grid_tiles(slide_id, image.width, image.height, level, &mask, cfg)
}

/// Applies the per-slide sample size rule across a dataset. Each slide's
/// subset is drawn with a seed derived from `cfg.rng_seed` and its id, so a
/// slide's tiles do not depend on which other slides are processed, except
/// through the dataset mean.
pub fn sample_dataset(
    candidates: &[Vec<TileRef>],
    cfg: &PreprocessConfig,
) -> Result<Vec<Vec<TileRef>>> {
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    let total: usize = candidates.iter().map(Vec::len).sum();
    let mean = total as f64 / candidates.len() as f64;
    candidates
        .iter()
        .map(|tiles| {
            let Some(first) = tiles.first() else {
                return Ok(Vec::new());
            };
            let n = sample_count(tiles.len() as u64, mean, cfg.min_sample_count) as usize;
            sample_tiles(tiles, n, rng::slide_seed(cfg.rng_seed, &first.slide_id))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn approx_hsv(rgb: [u8; 3], want: [f32; 3]) {
        let img = RgbImage::filled(1, 1, rgb).unwrap();
        let got = rgb_to_hsv(&img).pixels[0];
        for c in 0..3 {
            assert_abs_diff_eq!(got[c], want[c], epsilon = 1e-4);
        }
    }

    #[test]
    fn hsv_examples() {
        approx_hsv([255, 0, 0], [0.0, 1.0, 1.0]);
        approx_hsv([128, 128, 128], [0.0, 0.0, 128.0 / 255.0]);
        approx_hsv([64, 128, 192], [210.0 / 360.0, 2.0 / 3.0, 192.0 / 255.0]);
        approx_hsv([0, 255, 0], [1.0 / 3.0, 1.0, 1.0]);
        approx_hsv([255, 0, 128], [(360.0 - 30.117_647) / 360.0, 1.0, 1.0]);
    }

    #[test]
    fn otsu_two_deltas_picks_smallest() {
        let mut h = [0u64; 256];
        h[10] = 50;
        h[200] = 50;
        assert_eq!(otsu_threshold(&h).unwrap(), 10);
    }

    #[test]
    fn otsu_degenerate() {
        let mut h = [0u64; 256];
        h[42] = 1000;
        assert!(matches!(
            otsu_threshold(&h),
            Err(Error::DegenerateHistogram { nonzero: 1 })
        ));
        assert!(otsu_threshold(&[0; 256]).is_err());
    }

    #[test]
    fn otsu_uniform() {
        assert_eq!(otsu_threshold(&[7; 256]).unwrap(), 127);
    }

    #[test]
    fn mask_marks_colored_square() {
        let (w, h) = (40u32, 30u32);
        let mut px = vec![[255u8, 255, 255]; (w * h) as usize];
        for y in 10..20 {
            for x in 5..15 {
                px[(y * w + x) as usize] = [180, 60, 160];
            }
        }
        let img = RgbImage::new(w, h, px).unwrap();
        let mask = tissue_mask(&img).unwrap();
        for y in 0..h {
            for x in 0..w {
                let inside = (5..15).contains(&x) && (10..20).contains(&y);
                assert_eq!(mask.get(x, y), inside, "pixel {x},{y}");
            }
        }
    }

    #[test]
    fn mask_uniform_image_errors() {
        let img = RgbImage::filled(8, 8, [200, 100, 50]).unwrap();
        assert!(matches!(
            tissue_mask(&img),
            Err(Error::DegenerateHistogram { .. })
        ));
    }

    #[test]
    fn combine_is_and() {
        let a = TissueMask::filled(3, 2, true);
        let b = TissueMask::filled(3, 2, false);
        assert_eq!(combine_masks(&a, &b).unwrap().count(), 0);
        assert_eq!(combine_masks(&a, &a).unwrap().count(), 6);
        assert!(combine_masks(&a, &TissueMask::filled(2, 3, true)).is_err());
    }

    #[test]
    fn candidate_tiles_follow_tissue() {
        // Left half pink tissue, right half white background.
        let px = (0..64 * 32)
            .map(|i| {
                if i % 64 < 32 {
                    [200, 120, 170]
                } else {
                    [250, 250, 250]
                }
            })
            .collect();
        let img = RgbImage::new(64, 32, px).unwrap();
        let cfg = PreprocessConfig {
            tile_size: 16,
            ..PreprocessConfig::default()
        };
        let tiles = candidate_tiles("s", &img, 0, 4, &cfg).unwrap();
        let cells: Vec<(i32, i32)> = tiles.iter().map(|t| (t.grid_x, t.grid_y)).collect();
        assert_eq!(cells, vec![(0, 0), (1, 0), (0, 1), (1, 1)]);
        let blank = RgbImage::filled(64, 32, [255, 255, 255]).unwrap();
        assert!(candidate_tiles("b", &blank, 0, 4, &cfg).unwrap().is_empty());
    }

    #[test]
    fn dataset_sampling_uses_mean_rule() {
        let slide = |id: &str, n: i32| -> Vec<TileRef> {
            (0..n).map(|i| TileRef::at_grid(id, 0, i, 0, 224)).collect()
        };
        let cfg = PreprocessConfig {
            min_sample_count: 2,
            ..PreprocessConfig::default()
        };
        // Mean 10 -> half 5; the 3-tile slide keeps all, the 17-tile slide keeps 5.
        let data = [slide("a", 3), slide("b", 17)];
        let out = sample_dataset(&data, &cfg).unwrap();
        assert_eq!(out.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 5]);
        assert_eq!(sample_dataset(&data, &cfg).unwrap(), out);
        // Empty slides count toward the mean: 20 / 3 -> half 3.
        let out = sample_dataset(&[slide("a", 3), slide("b", 17), Vec::new()], &cfg).unwrap();
        assert_eq!(out.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 0]);
    }

    #[test]
    fn normalize_examples() {
        let img = RgbImage::new(3, 1, vec![[50, 0, 77], [200, 255, 77], [125, 128, 77]]).unwrap();
        let out = color_normalize(&img);
        assert_eq!(out.pixels(), &[[0, 0, 0], [255, 255, 0], [128, 128, 0]]);
    }

    #[test]
    fn grid_examples() {
        let cfg = PreprocessConfig::default();
        let full = TissueMask::filled(448, 448, true);
        let t = grid_tiles("s", 448, 448, 0, &full, &cfg).unwrap();
        let coords: Vec<_> = t.iter().map(|t| (t.grid_x, t.grid_y)).collect();
        assert_eq!(coords, vec![(0, 0), (1, 0), (0, 1), (1, 1)]);
        assert_eq!((t[3].px, t[3].py), (224, 224));

        let wide = TissueMask::filled(500, 448, true);
        assert_eq!(grid_tiles("s", 500, 448, 0, &wide, &cfg).unwrap().len(), 4);

        let bits = (0..448 * 448).map(|i| i % 448 < 224).collect();
        let half = TissueMask::new(448, 448, bits).unwrap();
        let cfg9 = PreprocessConfig {
            min_tissue_fraction: 0.9,
            ..cfg
        };
        let t = grid_tiles("s", 448, 448, 0, &half, &cfg9).unwrap();
        assert_eq!(t.len(), 2);
        assert!(t.iter().all(|t| t.grid_x == 0));
    }

    #[test]
    fn grid_with_downsampled_mask() {
        // 8x downsampled mask: 56x56 for a 448x448 slide, tissue on the top row of tiles.
        let bits = (0..56 * 56).map(|i| i / 56 < 28).collect();
        let mask = TissueMask::new(56, 56, bits).unwrap();
        let t = grid_tiles("s", 448, 448, 1, &mask, &PreprocessConfig::default()).unwrap();
        let coords: Vec<_> = t.iter().map(|t| (t.grid_x, t.grid_y, t.level)).collect();
        assert_eq!(coords, vec![(0, 0, 1), (1, 0, 1)]);
    }

    #[test]
    fn sample_count_examples() {
        assert_eq!(sample_count(300, 400.0, 100), 200);
        assert_eq!(sample_count(50, 400.0, 100), 50);
        assert_eq!(sample_count(500, 100.0, 100), 100);
        assert_eq!(sample_count(500, 401.0, 100), 200);
    }

    fn tiles(n: usize) -> Vec<TileRef> {
        (0..n)
            .map(|i| TileRef::at_grid("s", 0, i as i32 % 4, i as i32 / 4, 224))
            .collect()
    }

    #[test]
    fn sample_tiles_edges() {
        let t = tiles(5);
        assert_eq!(sample_tiles(&t, 5, 1).unwrap(), t);
        assert!(sample_tiles(&t, 0, 1).unwrap().is_empty());
        assert!(sample_tiles(&t, 6, 1).is_err());
    }

    #[test]
    fn sample_tiles_inclusion_frequency() {
        let t = tiles(5);
        let reps = 10_000;
        let mut hits = [0usize; 5];
        for seed in 0..reps {
            for s in sample_tiles(&t, 2, seed as u64).unwrap() {
                hits[s.grid_x as usize + 4 * s.grid_y as usize] += 1;
            }
        }
        // Inclusion probability 2/5; binomial sd over 10k draws.
        let p = 0.4;
        let sd = (reps as f64 * p * (1.0 - p)).sqrt();
        for h in hits {
            assert!((h as f64 - reps as f64 * p).abs() < 3.0 * sd, "{hits:?}");
        }
    }

    proptest! {
        #[test]
        fn normalize_idempotent(px in prop::collection::vec(any::<[u8; 3]>(), 1..64)) {
            let img = RgbImage::new(px.len() as u32, 1, px).unwrap();
            let once = color_normalize(&img);
            let twice = color_normalize(&once);
            for (a, b) in once.pixels().iter().zip(twice.pixels()) {
                for c in 0..3 {
                    prop_assert!((i16::from(a[c]) - i16::from(b[c])).abs() <= 1);
                }
            }
        }

        #[test]
        fn sample_count_bounds(avail in 0u64..100_000, mean in 0.0f64..100_000.0, min in 1u64..10_000) {
            let s = sample_count(avail, mean, min);
            prop_assert!(s <= avail);
            prop_assert!(s >= avail.min(min));
        }

        #[test]
        fn sample_tiles_sorted_and_stable(n in 1usize..60, frac in 0.0f64..1.0, seed: u64) {
            let t = tiles(n);
            let k = (frac * n as f64) as usize;
            let a = sample_tiles(&t, k, seed).unwrap();
            prop_assert_eq!(&a, &sample_tiles(&t, k, seed).unwrap());
            prop_assert_eq!(a.len(), k);
            let key: Vec<_> = a.iter().map(|t| (t.grid_y, t.grid_x)).collect();
            let mut sorted = key.clone();
            sorted.sort();
            sorted.dedup();
            prop_assert_eq!(key, sorted);
        }
    }
}
