//! Reference implementations used as oracles by the integration tests. Each
//! one is written from the textbook definition with plain loops and shares
//! no code with the library.

#![allow(dead_code)]

use impash::augment::PatchShuffleConfig;
use impash::config::Config;
use impash::image::Image;
use impash::model::{EncoderConfig, StageConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    let mut m = Array2::from_shape_simple_fn((n, d), || gaussian(rng));
    for mut row in m.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.mapv_inplace(|v| v / norm);
    }
    m
}

/// `-log softmax` of the positive, averaged over rows, with the
/// denominator summed term by term.
pub fn loop_info_nce(q: &Array2<f64>, k: &Array2<f64>, neg: &Array2<f64>, t: f64) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    for i in 0..q.nrows() {
        let qi = q.row(i).to_vec();
        let pos = (dot(&qi, &k.row(i).to_vec()) / t).exp();
        let mut denom = pos;
        for j in 0..neg.nrows() {
            denom += (dot(&qi, &neg.row(j).to_vec()) / t).exp();
        }
        total += -(pos / denom).ln();
    }
    total / q.nrows() as f64
}

/// Mean silhouette from the definition: `s = (b - a) / max(a, b)`, with
/// `s = 0` for members of singleton clusters.
pub fn loop_silhouette(points: &Array2<f64>, labels: &[usize]) -> f64 {
    let n = points.nrows();
    let d = |i: usize, j: usize| {
        let mut s = 0.0;
        for c in 0..points.ncols() {
            let diff = points[[i, c]] - points[[j, c]];
            s += diff * diff;
        }
        s.sqrt()
    };
    let mut clusters: Vec<usize> = labels.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    let mut total = 0.0;
    for i in 0..n {
        let own: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if own.is_empty() {
            continue;
        }
        let a = own.iter().map(|&j| d(i, j)).sum::<f64>() / own.len() as f64;
        let mut b = f64::INFINITY;
        for &c in &clusters {
            if c == labels[i] {
                continue;
            }
            let members: Vec<usize> = (0..n).filter(|&j| labels[j] == c).collect();
            let mean = members.iter().map(|&j| d(i, j)).sum::<f64>() / members.len() as f64;
            b = b.min(mean);
        }
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    total / n as f64
}

/// Ring buffer replayed one row at a time.
pub struct RingSim {
    pub rows: Vec<Vec<f64>>,
    pub ptr: usize,
    pub filled: usize,
}

impl RingSim {
    pub fn new(initial: &Array2<f64>) -> Self {
        Self {
            rows: initial.rows().into_iter().map(|r| r.to_vec()).collect(),
            ptr: 0,
            filled: 0,
        }
    }

    pub fn push(&mut self, batch: &Array2<f64>) {
        for r in batch.rows() {
            self.rows[self.ptr] = r.to_vec();
            self.ptr += 1;
            if self.ptr == self.rows.len() {
                self.ptr = 0;
            }
            if self.filled < self.rows.len() {
                self.filled += 1;
            }
        }
    }
}

/// Random `d x d` orthogonal matrix by Gram-Schmidt on Gaussian columns.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Array2<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        for c in &cols {
            let p: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            cols.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    Array2::from_shape_fn((d, d), |(i, j)| cols[j][i])
}

/// Central difference of `f` along every coordinate of `x`.
pub fn numeric_grad(x: &Array2<f64>, h: f64, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut g = Array2::zeros(x.raw_dim());
    for idx in 0..x.len() {
        let (i, j) = (idx / x.ncols(), idx % x.ncols());
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus[[i, j]] += h;
        minus[[i, j]] -= h;
        g[[i, j]] = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    g
}

pub fn max_rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-12);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

/// Mosaic rebuilt pixel by pixel: output block `pos` is the `sub x sub`
/// window at offset `cell_crops[src]` inside canvas cell `src = perm[pos]`.
pub fn reference_mosaic(
    canvas: &Image,
    cell_crops: &[(usize, usize); 9],
    perm: &[usize; 9],
    cfg: &PatchShuffleConfig,
) -> Image {
    let cell = cfg.resize / 3;
    let sub = cfg.sub_crop;
    let mut out = Image::zeros(3 * sub, 3 * sub);
    for pos in 0..9 {
        let src = perm[pos];
        let (dx, dy) = cell_crops[src];
        for y in 0..sub {
            for x in 0..sub {
                let p = canvas.pixel((src / 3) * cell + dy + y, (src % 3) * cell + dx + x);
                out.set_pixel((pos / 3) * sub + y, (pos % 3) * sub + x, p);
            }
        }
    }
    out
}

pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    Image::from_fn(h, w, |_, _| [rng.random(), rng.random(), rng.random()])
}

/// A configuration small enough for a full pipeline in well under a second
/// per epoch: 48 px tiles, a two-stage encoder and a 16-slot queue.
pub fn tiny_config() -> Config {
    let mut c = Config::desk();
    c.data.n_classes = 2;
    c.data.n_per_class = 8;
    c.data.image_size = 48;
    c.augment.infomin.view_size = 32;
    c.augment.infomin.blur_sigma = [0.1, 0.5];
    c.augment.patch_shuffle.resize = 48;
    c.augment.patch_shuffle.sub_crop = 12;
    c.model.encoder = EncoderConfig {
        stem_width: 8,
        norm_groups: 4,
        stages: vec![
            StageConfig { width: 8, blocks: 1, stride: 2 },
            StageConfig { width: 16, blocks: 1, stride: 2 },
        ],
        ..EncoderConfig::small()
    };
    c.model.projection_dim = 16;
    c.pretrain.epochs = 3;
    c.pretrain.batch_size = 4;
    c.pretrain.queue_size = 16;
    c.pretrain.checkpoint_interval = 1;
    c.probe.epochs = 10;
    c.probe.decay_epoch = 8;
    c.probe.batch_size = 4;
    c.eval.resize = 48;
    c.eval.crop = 40;
    c
}
