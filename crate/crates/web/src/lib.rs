//! Browser bindings for three small interactive views of the toolkit:
//! PatchShuffling on a synthetic tile, InfoNCE as a function of the
//! temperature, and the silhouette score of two toy clusters.
//!
//! Every function also works natively; the wasm exports are thin wrappers.

use impash::augment::{patch_shuffle, PatchShuffleConfig};
use impash::data::render_synthetic_tile;
use impash::image::Image;
use impash::loss::info_nce;
use impash::metrics::silhouette;
use impash::seed;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use wasm_bindgen::prelude::*;

/// RGBA pixels of an image, row-major.
fn rgba(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(img.height() * img.width() * 4);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let p = img.pixel(y, x);
            out.extend(p.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
            out.push(255);
        }
    }
    out
}

/// A synthetic tile next to one PatchShuffling view of it.
#[wasm_bindgen]
pub struct ShufflePreview {
    tile_size: u32,
    view_size: u32,
    tile: Vec<u8>,
    view: Vec<u8>,
    permutation: Vec<u32>,
    crop: Vec<u32>,
    flipped: bool,
}

#[wasm_bindgen]
impl ShufflePreview {
    #[wasm_bindgen(getter)]
    pub fn tile_size(&self) -> u32 {
        self.tile_size
    }

    #[wasm_bindgen(getter)]
    pub fn view_size(&self) -> u32 {
        self.view_size
    }

    /// RGBA bytes of the input tile.
    pub fn tile_rgba(&self) -> Vec<u8> {
        self.tile.clone()
    }

    /// RGBA bytes of the shuffled view.
    pub fn view_rgba(&self) -> Vec<u8> {
        self.view.clone()
    }

    /// `permutation[i]` is the grid cell shown at mosaic position `i`.
    pub fn permutation(&self) -> Vec<u32> {
        self.permutation.clone()
    }

    /// `[x, y, w, h]` of the initial crop.
    pub fn crop(&self) -> Vec<u32> {
        self.crop.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn flipped(&self) -> bool {
        self.flipped
    }
}

/// Render tile `class` of `domain` at 96 px and shuffle it with the desk
/// PatchShuffling settings.
#[wasm_bindgen]
pub fn patch_shuffle_preview(class: u32, domain: u8, tile_seed: u32, shuffle_seed: u32) -> Result<ShufflePreview, JsError> {
    let size = 96;
    let tile = render_synthetic_tile(class as usize % 4, domain.min(1), u64::from(tile_seed), size);
    let cfg = PatchShuffleConfig::desk();
    let (view, rec) = patch_shuffle(&tile, seed::derive_index(0x5eed, u64::from(shuffle_seed)), &cfg)
        .map_err(|e| JsError::new(&e.to_string()))?;
    let (x, y, w, h) = rec.crop_box;
    Ok(ShufflePreview {
        tile_size: size as u32,
        view_size: view.width() as u32,
        tile: rgba(&tile),
        view: rgba(&view),
        permutation: rec.permutation.iter().map(|&p| p as u32).collect(),
        crop: [x, y, w, h].iter().map(|&v| v as u32).collect(),
        flipped: rec.flip_horizontal,
    })
}

/// Loss of one query whose positive has cosine `pos_cos` and whose
/// `n_neg` negatives have cosines spread evenly over
/// `neg_cos - neg_spread ..= neg_cos + neg_spread`, for each temperature.
pub fn info_nce_curve(pos_cos: f64, neg_cos: f64, neg_spread: f64, n_neg: usize, temperatures: &[f64]) -> Vec<f64> {
    let unit = |c: f64, axis: usize| {
        let c = c.clamp(-1.0, 1.0);
        let mut v = [0.0; 3];
        v[0] = c;
        v[axis] = (1.0 - c * c).sqrt();
        v
    };
    let n_neg = n_neg.max(1);
    let q = Array2::from_shape_vec((1, 3), vec![1.0, 0.0, 0.0]).expect("1x3");
    let k = Array2::from_shape_vec((1, 3), unit(pos_cos, 1).to_vec()).expect("1x3");
    let negs: Vec<f64> = (0..n_neg)
        .flat_map(|j| {
            let f = if n_neg == 1 { 0.5 } else { j as f64 / (n_neg - 1) as f64 };
            unit(neg_cos - neg_spread + 2.0 * neg_spread * f, 2)
        })
        .collect();
    let negs = Array2::from_shape_vec((n_neg, 3), negs).expect("n x 3");
    temperatures
        .iter()
        .map(|&t| info_nce(q.view(), k.view(), negs.view(), t).unwrap_or(f64::NAN))
        .collect()
}

/// Temperatures log-spaced over `[t_min, t_max]`.
pub fn log_space(t_min: f64, t_max: f64, n: usize) -> Vec<f64> {
    let n = n.max(2);
    let (a, b) = (t_min.ln(), t_max.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

/// `[t_0, loss_0, t_1, loss_1, ...]` over `n` log-spaced temperatures.
#[wasm_bindgen]
pub fn info_nce_vs_temperature(
    pos_cos: f64,
    neg_cos: f64,
    neg_spread: f64,
    n_neg: u32,
    t_min: f64,
    t_max: f64,
    n: u32,
) -> Vec<f64> {
    let temps = log_space(t_min, t_max, n as usize);
    let losses = info_nce_curve(pos_cos, neg_cos, neg_spread, n_neg as usize, &temps);
    temps.into_iter().zip(losses).flat_map(|(t, l)| [t, l]).collect()
}

/// Two Gaussian blobs in the plane, `n` points each, centred at
/// `(-separation/2, 0)` and `(separation/2, 0)`. Returns `[x, y, label]`
/// triples.
#[wasm_bindgen]
pub fn toy_blobs(separation: f64, spread: f64, n: u32, seed: u32) -> Vec<f64> {
    let mut rng = seed::rng(seed::derive(u64::from(seed), "blobs"));
    let normal = Normal::new(0.0, spread.max(1e-9)).expect("finite spread");
    let mut out = Vec::with_capacity(6 * n as usize);
    for label in 0..2 {
        let cx = if label == 0 { -separation / 2.0 } else { separation / 2.0 };
        for _ in 0..n {
            out.extend([cx + normal.sample(&mut rng), normal.sample(&mut rng), f64::from(label)]);
        }
    }
    // Shuffle so a plot draws the clusters interleaved.
    let mut idx: Vec<usize> = (0..out.len() / 3).collect();
    idx.shuffle(&mut rng);
    idx.iter().flat_map(|&i| out[3 * i..3 * i + 3].to_vec()).collect()
}

/// Silhouette of `[x, y, label]` triples; `NaN` if fewer than two clusters.
#[wasm_bindgen]
pub fn silhouette_of(triples: &[f64]) -> f64 {
    let n = triples.len() / 3;
    let points = Array2::from_shape_fn((n, 2), |(i, j)| triples[3 * i + j]);
    let labels: Vec<usize> = (0..n).map(|i| triples[3 * i + 2].max(0.0) as usize).collect();
    silhouette(points.view(), &labels).unwrap_or(f64::NAN)
}
