//! View generation: two InfoMin-style views and two PatchShuffling views per
//! input tile, all reproducible from `(image, seed)`.
//!
//! PatchShuffling: random crop covering 60-100% of the tile area, resize to
//! `resize x resize`, random flip, split into a 3x3 grid, take a random
//! `sub_crop` square inside every cell and lay the nine squares out again in
//! a random order. At full scale that is 255 -> 3x85 -> 3x64 = 192.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed::{self, Rng};

pub const GRID: usize = 3;
pub const CELLS: usize = GRID * GRID;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfoMinConfig {
    pub view_size: usize,
    pub crop_scale: [f64; 2],
    pub crop_ratio: [f64; 2],
    pub flip_p: f64,
    pub jitter_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_p: f64,
    pub blur_p: f64,
    pub blur_sigma: [f64; 2],
}

impl InfoMinConfig {
    pub fn full() -> Self {
        Self {
            view_size: 224,
            crop_scale: [0.2, 1.0],
            crop_ratio: [3.0 / 4.0, 4.0 / 3.0],
            flip_p: 0.5,
            jitter_p: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            grayscale_p: 0.2,
            blur_p: 0.5,
            blur_sigma: [0.1, 2.0],
        }
    }

    /// Same recipe at 96 px; blur scaled with the view size.
    pub fn desk() -> Self {
        Self {
            view_size: 96,
            blur_sigma: [0.1, 0.9],
            ..Self::full()
        }
    }

    /// Every random element disabled; the view is the resized input.
    pub fn identity(view_size: usize) -> Self {
        Self {
            view_size,
            crop_scale: [1.0, 1.0],
            flip_p: 0.0,
            jitter_p: 0.0,
            grayscale_p: 0.0,
            blur_p: 0.0,
            ..Self::full()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchShuffleConfig {
    /// Side of the resized crop; must be divisible by the 3x3 grid.
    pub resize: usize,
    /// Side of the square taken inside every grid cell.
    pub sub_crop: usize,
    pub crop_scale: [f64; 2],
    pub crop_ratio: [f64; 2],
    pub flip_p: f64,
    pub vertical_flip: bool,
}

impl PatchShuffleConfig {
    pub fn full() -> Self {
        Self {
            resize: 255,
            sub_crop: 64,
            crop_scale: [0.6, 1.0],
            crop_ratio: [3.0 / 4.0, 4.0 / 3.0],
            flip_p: 0.5,
            vertical_flip: false,
        }
    }

    /// 96 -> 3x32 -> 3x24 = 72.
    pub fn desk() -> Self {
        Self {
            resize: 96,
            sub_crop: 24,
            ..Self::full()
        }
    }

    pub fn cell(&self) -> usize {
        self.resize / GRID
    }

    pub fn output_size(&self) -> usize {
        self.sub_crop * GRID
    }

    pub fn validate(&self) -> Result<()> {
        if self.resize % GRID != 0 || self.resize == 0 {
            return Err(Error::Config(format!(
                "patch_shuffle.resize = {} is not a positive multiple of {GRID}",
                self.resize
            )));
        }
        if self.sub_crop == 0 || self.sub_crop > self.cell() {
            return Err(Error::Config(format!(
                "patch_shuffle.sub_crop = {} must be in 1..={}",
                self.sub_crop,
                self.cell()
            )));
        }
        validate_range("patch_shuffle.crop_scale", self.crop_scale, 0.0, 1.0)?;
        validate_range("patch_shuffle.crop_ratio", self.crop_ratio, 0.0, f64::INFINITY)
    }
}

fn validate_range(name: &str, r: [f64; 2], lo: f64, hi: f64) -> Result<()> {
    if !(r[0] > lo && r[0] <= r[1] && r[1] <= hi) {
        return Err(Error::Config(format!("{name} = {r:?} is not an ordered range in ({lo}, {hi}]")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub infomin: InfoMinConfig,
    pub patch_shuffle: PatchShuffleConfig,
}

impl AugmentConfig {
    pub fn full() -> Self {
        Self {
            infomin: InfoMinConfig::full(),
            patch_shuffle: PatchShuffleConfig::full(),
        }
    }

    pub fn desk() -> Self {
        Self {
            infomin: InfoMinConfig::desk(),
            patch_shuffle: PatchShuffleConfig::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.patch_shuffle.validate()?;
        validate_range("infomin.crop_scale", self.infomin.crop_scale, 0.0, 1.0)?;
        validate_range("infomin.crop_ratio", self.infomin.crop_ratio, 0.0, f64::INFINITY)?;
        if self.infomin.view_size == 0 {
            return Err(Error::Config("infomin.view_size must be positive".into()));
        }
        Ok(())
    }
}

/// Everything random about one PatchShuffling draw.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShuffleRecord {
    /// `(x, y, w, h)` of the initial crop in source pixels.
    pub crop_box: (usize, usize, usize, usize),
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    /// Offset of the sub-crop inside each grid cell, indexed by cell.
    pub cell_crops: [(usize, usize); CELLS],
    /// `permutation[i]` is the cell shown at mosaic position `i`.
    pub permutation: [usize; CELLS],
}

impl ShuffleRecord {
    pub fn crop_area_ratio(&self, height: usize, width: usize) -> f64 {
        (self.crop_box.2 * self.crop_box.3) as f64 / (height * width) as f64
    }
}

impl fmt::Display for ShuffleRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (x, y, w, h) = self.crop_box;
        writeln!(f, "crop_box\tx={x} y={y} w={w} h={h}")?;
        writeln!(f, "flip\thorizontal={} vertical={}", self.flip_horizontal, self.flip_vertical)?;
        let crops: Vec<String> = self.cell_crops.iter().map(|(dx, dy)| format!("({dx},{dy})")).collect();
        writeln!(f, "cell_crops\t{}", crops.join(" "))?;
        let perm: Vec<String> = self.permutation.iter().map(|p| p.to_string()).collect();
        write!(f, "permutation\t{}", perm.join(" "))
    }
}

/// The four views of one tile.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewQuadruple {
    pub v1: Image,
    pub v2: Image,
    pub v3: Image,
    pub v4: Image,
    pub records: [ShuffleRecord; 2],
}

fn check_degenerate(img: &Image) -> Result<()> {
    if img.height() < 2 || img.width() < 2 {
        return Err(Error::InvalidInput(format!(
            "degenerate {}x{} image",
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

/// Random crop box whose area fraction lies in `scale` and whose aspect ratio
/// is log-uniform in `ratio`. Falls back to the whole image after 10 misses.
fn sample_crop(rng: &mut Rng, height: usize, width: usize, scale: [f64; 2], ratio: [f64; 2]) -> (usize, usize, usize, usize) {
    let area = (height * width) as f64;
    let (log_lo, log_hi) = (ratio[0].ln(), ratio[1].ln());
    for _ in 0..10 {
        let target = area * sample_uniform(rng, scale[0], scale[1]);
        let aspect = sample_uniform(rng, log_lo, log_hi).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w == 0 || h == 0 || w > width || h > height {
            continue;
        }
        let frac = (w * h) as f64 / area;
        if frac < scale[0] || frac > scale[1] {
            continue;
        }
        let x = rng.random_range(0..=width - w);
        let y = rng.random_range(0..=height - h);
        return (x, y, w, h);
    }
    (0, 0, width, height)
}

fn sample_uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn coin(rng: &mut Rng, p: f64) -> bool {
    p > 0.0 && rng.random::<f64>() < p
}

pub fn sample_shuffle_record(rng: &mut Rng, height: usize, width: usize, cfg: &PatchShuffleConfig) -> ShuffleRecord {
    let crop_box = sample_crop(rng, height, width, cfg.crop_scale, cfg.crop_ratio);
    let flip_horizontal = coin(rng, cfg.flip_p);
    let flip_vertical = cfg.vertical_flip && coin(rng, cfg.flip_p);
    let slack = cfg.cell() - cfg.sub_crop;
    let mut cell_crops = [(0, 0); CELLS];
    for c in cell_crops.iter_mut() {
        *c = (rng.random_range(0..=slack), rng.random_range(0..=slack));
    }
    let mut permutation = [0, 1, 2, 3, 4, 5, 6, 7, 8];
    permutation.shuffle(rng);
    ShuffleRecord {
        crop_box,
        flip_horizontal,
        flip_vertical,
        cell_crops,
        permutation,
    }
}

/// Resized and flipped crop that the 3x3 grid is cut from.
pub fn shuffle_canvas(x: &Image, record: &ShuffleRecord, cfg: &PatchShuffleConfig) -> Result<Image> {
    let (cx, cy, cw, ch) = record.crop_box;
    let mut canvas = x.crop(cx, cy, cw, ch)?.resize(cfg.resize, cfg.resize);
    if record.flip_horizontal {
        canvas = canvas.flip_horizontal();
    }
    if record.flip_vertical {
        canvas = canvas.flip_vertical();
    }
    Ok(canvas)
}

/// Rebuild a PatchShuffling view from its record.
pub fn apply_shuffle_record(x: &Image, record: &ShuffleRecord, cfg: &PatchShuffleConfig) -> Result<Image> {
    check_degenerate(x)?;
    cfg.validate()?;
    let canvas = shuffle_canvas(x, record, cfg)?;
    let (cell, sub) = (cfg.cell(), cfg.sub_crop);
    let mut out = Image::zeros(cfg.output_size(), cfg.output_size());
    for (pos, &src_cell) in record.permutation.iter().enumerate() {
        let (dx, dy) = record.cell_crops[src_cell];
        let block = canvas.crop(
            (src_cell % GRID) * cell + dx,
            (src_cell / GRID) * cell + dy,
            sub,
            sub,
        )?;
        out.paste(&block, (pos % GRID) * sub, (pos / GRID) * sub)?;
    }
    Ok(out)
}

pub fn patch_shuffle(x: &Image, rng_seed: u64, cfg: &PatchShuffleConfig) -> Result<(Image, ShuffleRecord)> {
    check_degenerate(x)?;
    cfg.validate()?;
    let mut rng = seed::rng(rng_seed);
    let record = sample_shuffle_record(&mut rng, x.height(), x.width(), cfg);
    let view = apply_shuffle_record(x, &record, cfg)?;
    Ok((view, record))
}

pub fn infomin_view(x: &Image, rng_seed: u64, cfg: &InfoMinConfig) -> Result<Image> {
    check_degenerate(x)?;
    let mut rng = seed::rng(rng_seed);
    let (cx, cy, cw, ch) = sample_crop(&mut rng, x.height(), x.width(), cfg.crop_scale, cfg.crop_ratio);
    let mut view = x.crop(cx, cy, cw, ch)?.resize(cfg.view_size, cfg.view_size);
    if coin(&mut rng, cfg.flip_p) {
        view = view.flip_horizontal();
    }
    if coin(&mut rng, cfg.jitter_p) {
        let mut order = [0usize, 1, 2, 3];
        order.shuffle(&mut rng);
        let factor = |rng: &mut Rng, amount: f64| sample_uniform(rng, (1.0 - amount).max(0.0), 1.0 + amount) as f32;
        for op in order {
            match op {
                0 => {
                    let f = factor(&mut rng, cfg.brightness);
                    view.adjust_brightness(f)
                }
                1 => {
                    let f = factor(&mut rng, cfg.contrast);
                    view.adjust_contrast(f)
                }
                2 => {
                    let f = factor(&mut rng, cfg.saturation);
                    view.adjust_saturation(f)
                }
                _ => {
                    let h = sample_uniform(&mut rng, -cfg.hue, cfg.hue) as f32;
                    view.adjust_hue(h)
                }
            }
        }
    }
    if coin(&mut rng, cfg.grayscale_p) {
        view.to_grayscale();
    }
    if coin(&mut rng, cfg.blur_p) {
        let sigma = sample_uniform(&mut rng, cfg.blur_sigma[0], cfg.blur_sigma[1]) as f32;
        view.gaussian_blur(sigma);
    }
    Ok(view)
}

/// Four decorrelated sub-seeds: InfoMin twice, PatchShuffling twice.
pub fn make_views(x: &Image, rng_seed: u64, cfg: &AugmentConfig) -> Result<ViewQuadruple> {
    let sub = |i| seed::derive_index(rng_seed, i);
    let v1 = infomin_view(x, sub(0), &cfg.infomin)?;
    let v2 = infomin_view(x, sub(1), &cfg.infomin)?;
    let (v3, r3) = patch_shuffle(x, sub(2), &cfg.patch_shuffle)?;
    let (v4, r4) = patch_shuffle(x, sub(3), &cfg.patch_shuffle)?;
    Ok(ViewQuadruple {
        v1,
        v2,
        v3,
        v4,
        records: [r3, r4],
    })
}

/// Deterministic evaluation view: shorter side to `resize`, centre crop `crop`.
pub fn evaluation_view(x: &Image, resize: usize, crop: usize) -> Result<Image> {
    check_degenerate(x)?;
    x.resize_shorter_side(resize).center_crop(crop, crop)
}
