//! Float RGB tiles and the pixel operations the augmentations are built from.
//!
//! Pixels are stored row-major, channel-interleaved (`H x W x 3`) as `f32`
//! in `[0, 1]`. Decoding from 8-bit files divides by 255.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn from_raw(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width}x3 image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_raw(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, p: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&p);
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn channel_means(&self) -> [f64; 3] {
        let mut acc = [0f64; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                acc[c] += f64::from(px[c]);
            }
        }
        let n = (self.height * self.width).max(1) as f64;
        acc.map(|a| a / n)
    }

    /// Sub-rectangle with top-left corner `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Image> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(Error::Shape(format!(
                "crop ({x},{y},{w},{h}) outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for row in y..y + h {
            let start = (row * self.width + x) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Ok(Image {
            height: h,
            width: w,
            data,
        })
    }

    /// Bilinear resize with half-pixel centres (no corner alignment, no
    /// antialiasing). Source coordinates are clamped at the borders.
    pub fn resize(&self, out_h: usize, out_w: usize) -> Image {
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        let ys = axis_weights(self.height, out_h);
        let xs = axis_weights(self.width, out_w);
        let mut out = Image::zeros(out_h, out_w);
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let p00 = self.pixel(y0, x0);
                let p01 = self.pixel(y0, x1);
                let p10 = self.pixel(y1, x0);
                let p11 = self.pixel(y1, x1);
                let mut p = [0f32; 3];
                for c in 0..3 {
                    let top = p00[c] + (p01[c] - p00[c]) * fx;
                    let bot = p10[c] + (p11[c] - p10[c]) * fx;
                    p[c] = top + (bot - top) * fy;
                }
                out.set_pixel(oy, ox, p);
            }
        }
        out
    }

    /// Resize so the shorter side equals `target`, keeping the aspect ratio.
    pub fn resize_shorter_side(&self, target: usize) -> Image {
        let (h, w) = (self.height, self.width);
        let (nh, nw) = if h <= w {
            (target, ((w as f64) * target as f64 / h as f64).round().max(1.0) as usize)
        } else {
            (((h as f64) * target as f64 / w as f64).round().max(1.0) as usize, target)
        };
        self.resize(nh, nw)
    }

    pub fn center_crop(&self, h: usize, w: usize) -> Result<Image> {
        if h > self.height || w > self.width {
            return Err(Error::Shape(format!(
                "center crop {h}x{w} larger than {}x{}",
                self.height, self.width
            )));
        }
        self.crop((self.width - w) / 2, (self.height - h) / 2, w, h)
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = Image::zeros(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(y, self.width - 1 - x, self.pixel(y, x));
            }
        }
        out
    }

    pub fn flip_vertical(&self) -> Image {
        let mut out = Image::zeros(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(self.height - 1 - y, x, self.pixel(y, x));
            }
        }
        out
    }

    /// Copy `src` into `self` with its top-left corner at `(x, y)`.
    pub fn paste(&mut self, src: &Image, x: usize, y: usize) -> Result<()> {
        if x + src.width > self.width || y + src.height > self.height {
            return Err(Error::Shape("paste outside destination".into()));
        }
        for row in 0..src.height {
            let d = ((y + row) * self.width + x) * 3;
            let s = row * src.width * 3;
            self.data[d..d + src.width * 3].copy_from_slice(&src.data[s..s + src.width * 3]);
        }
        Ok(())
    }

    fn map_pixels(&mut self, mut f: impl FnMut([f32; 3]) -> [f32; 3]) {
        for px in self.data.chunks_exact_mut(3) {
            let out = f([px[0], px[1], px[2]]);
            px.copy_from_slice(&out);
        }
    }

    pub fn adjust_brightness(&mut self, factor: f32) {
        self.map_pixels(|p| p.map(|v| (v * factor).clamp(0.0, 1.0)));
    }

    pub fn adjust_contrast(&mut self, factor: f32) {
        let mean = self
            .data
            .chunks_exact(3)
            .map(|p| f64::from(luma(p)))
            .sum::<f64>()
            / (self.height * self.width).max(1) as f64;
        let mean = mean as f32;
        self.map_pixels(|p| p.map(|v| (factor * v + (1.0 - factor) * mean).clamp(0.0, 1.0)));
    }

    pub fn adjust_saturation(&mut self, factor: f32) {
        self.map_pixels(|p| {
            let g = luma(&p);
            p.map(|v| (factor * v + (1.0 - factor) * g).clamp(0.0, 1.0))
        });
    }

    /// Rotate hue by `shift` turns (`shift` in `[-0.5, 0.5]`).
    pub fn adjust_hue(&mut self, shift: f32) {
        self.map_pixels(|p| {
            let (h, s, v) = rgb_to_hsv(p);
            hsv_to_rgb((h + shift).rem_euclid(1.0), s, v)
        });
    }

    pub fn to_grayscale(&mut self) {
        self.map_pixels(|p| {
            let g = luma(&p).clamp(0.0, 1.0);
            [g, g, g]
        });
    }

    /// Separable Gaussian blur with reflected borders, radius `ceil(3 sigma)`.
    pub fn gaussian_blur(&mut self, sigma: f32) {
        if sigma <= 0.0 || self.height < 2 || self.width < 2 {
            return;
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let mut kernel: Vec<f32> = (-radius..=radius)
            .map(|i| (-((i * i) as f32) / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f32 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= total);

        let (h, w) = (self.height as isize, self.width as isize);
        let mut tmp = vec![0f32; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0f32; 3];
                for (k, &kv) in kernel.iter().enumerate() {
                    let sx = reflect(x + k as isize - radius, w) as usize;
                    let i = (y as usize * self.width + sx) * 3;
                    for c in 0..3 {
                        acc[c] += kv * self.data[i + c];
                    }
                }
                let o = (y as usize * self.width + x as usize) * 3;
                tmp[o..o + 3].copy_from_slice(&acc);
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0f32; 3];
                for (k, &kv) in kernel.iter().enumerate() {
                    let sy = reflect(y + k as isize - radius, h) as usize;
                    let i = (sy * self.width + x as usize) * 3;
                    for c in 0..3 {
                        acc[c] += kv * tmp[i + c];
                    }
                }
                let o = (y as usize * self.width + x as usize) * 3;
                for c in 0..3 {
                    self.data[o + c] = acc[c].clamp(0.0, 1.0);
                }
            }
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        ImageBuffer::<Rgb<u8>, _>::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    pub fn from_rgb8(img: &RgbImage) -> Image {
        let data = img.as_raw().iter().map(|&b| f32::from(b) / 255.0).collect();
        Image {
            height: img.height() as usize,
            width: img.width() as usize,
            data,
        }
    }

    /// Decode any supported file (PNG, TIFF, JPEG) to float RGB.
    pub fn load(path: &Path) -> Result<Image> {
        let dynamic = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Image::from_rgb8(&dynamic.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }
}

#[inline]
fn luma(p: &[f32]) -> f32 {
    LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]
}

#[inline]
fn reflect(i: isize, n: isize) -> isize {
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m
}

/// Per output index: (lower source index, upper source index, upper weight).
fn axis_weights(in_len: usize, out_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac as f32)
        })
        .collect()
}

fn rgb_to_hsv([r, g, b]: [f32; 3]) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h * 6.0).rem_euclid(6.0);
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let out = match sector as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    };
    out.map(|c| c.clamp(0.0, 1.0))
}
