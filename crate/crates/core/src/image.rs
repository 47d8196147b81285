//! RGB float images, affine warps and photometric operations.

use std::path::Path;

use landmark_tensor::{Scalar, Tensor};

use crate::{Error, Result};

/// Planar-free interleaved RGB image with values in `[0, 1]`.
///
/// Pixel `(x, y)` covers the square `[x, x+1) x [y, y+1)`; its center is
/// `(x + 0.5, y + 0.5)` in continuous coordinates. Landmarks use the same
/// continuous frame.
#[derive(Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl std::fmt::Debug for Image {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Image({}x{})", self.width, self.height)
    }
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, f(x, y));
            }
        }
        img
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::Invalid(format!("{width}x{height} RGB image cannot hold {} values", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bilinear sample at a continuous coordinate, replicating edge pixels.
    pub fn sample(&self, px: f64, py: f64) -> [f32; 3] {
        let fx = (px - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (py - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = (fx - x0 as f64) as f32;
        let ay = (fy - y0 as f64) as f32;
        let (p00, p01, p10, p11) = (self.get(x0, y0), self.get(x1, y0), self.get(x0, y1), self.get(x1, y1));
        let mut out = [0.0; 3];
        for c in 0..3 {
            let top = p00[c] + (p01[c] - p00[c]) * ax;
            let bottom = p10[c] + (p11[c] - p10[c]) * ax;
            out[c] = top + (bottom - top) * ay;
        }
        out
    }

    /// Resample into a `width x height` image; `src_from_dst` maps output
    /// coordinates to coordinates in `self`.
    pub fn warp(&self, width: usize, height: usize, src_from_dst: &Affine2) -> Image {
        if width == self.width && height == self.height && src_from_dst.is_identity() {
            return self.clone();
        }
        Image::from_fn(width, height, |x, y| {
            let (sx, sy) = src_from_dst.apply(x as f64 + 0.5, y as f64 + 0.5);
            self.sample(sx, sy)
        })
    }

    pub fn resize(&self, width: usize, height: usize) -> Image {
        let a = Affine2::scale(self.width as f64 / width as f64, self.height as f64 / height as f64);
        self.warp(width, height, &a)
    }

    pub fn map_pixels(&mut self, mut f: impl FnMut([f32; 3]) -> [f32; 3]) {
        for px in self.data.chunks_mut(3) {
            let out = f([px[0], px[1], px[2]]);
            px.copy_from_slice(&out);
        }
    }

    pub fn mean_gray(&self) -> f32 {
        let n = (self.width * self.height) as f32;
        self.data.chunks(3).map(|p| gray(p[0], p[1], p[2])).sum::<f32>() / n
    }

    pub fn brightness(&mut self, factor: f32) {
        self.map_pixels(|p| p.map(|v| (v * factor).clamp(0.0, 1.0)));
    }

    pub fn contrast(&mut self, factor: f32) {
        let m = self.mean_gray();
        self.map_pixels(|p| p.map(|v| ((v - m) * factor + m).clamp(0.0, 1.0)));
    }

    pub fn saturation(&mut self, factor: f32) {
        self.map_pixels(|p| {
            let g = gray(p[0], p[1], p[2]);
            p.map(|v| ((v - g) * factor + g).clamp(0.0, 1.0))
        });
    }

    /// Rotate chroma by `turns` of a full hue circle (YIQ rotation).
    pub fn hue(&mut self, turns: f32) {
        let (s, c) = (turns * std::f32::consts::TAU).sin_cos();
        self.map_pixels(|[r, g, b]| {
            let y = 0.299 * r + 0.587 * g + 0.114 * b;
            let i = 0.596 * r - 0.274 * g - 0.322 * b;
            let q = 0.211 * r - 0.523 * g + 0.312 * b;
            let (i2, q2) = (i * c - q * s, i * s + q * c);
            [
                (y + 0.956 * i2 + 0.621 * q2).clamp(0.0, 1.0),
                (y - 0.272 * i2 - 0.647 * q2).clamp(0.0, 1.0),
                (y - 1.106 * i2 + 1.703 * q2).clamp(0.0, 1.0),
            ]
        });
    }

    pub fn grayscale(&mut self) {
        self.map_pixels(|p| [gray(p[0], p[1], p[2]); 3]);
    }

    pub fn solarize(&mut self, threshold: f32) {
        self.map_pixels(|p| p.map(|v| if v >= threshold { 1.0 - v } else { v }));
    }

    /// Separable Gaussian blur with edge replication.
    pub fn gaussian_blur(&mut self, sigma: f32) {
        if sigma <= 0.0 {
            return;
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let kernel: Vec<f32> = (-radius..=radius).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
        let norm: f32 = kernel.iter().sum();
        let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
        let (w, h) = (self.width as isize, self.height as isize);
        let mut tmp = self.clone();
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f32; 3];
                for (k, &kv) in kernel.iter().enumerate() {
                    let sx = (x + k as isize - radius).clamp(0, w - 1) as usize;
                    let p = self.get(sx, y as usize);
                    (0..3).for_each(|c| acc[c] += kv * p[c]);
                }
                tmp.set(x as usize, y as usize, acc);
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f32; 3];
                for (k, &kv) in kernel.iter().enumerate() {
                    let sy = (y + k as isize - radius).clamp(0, h - 1) as usize;
                    let p = tmp.get(x as usize, sy);
                    (0..3).for_each(|c| acc[c] += kv * p[c]);
                }
                self.set(x as usize, y as usize, acc);
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        Image::from_raw(w as usize, h as usize, data)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })
    }
}

#[inline]
fn gray(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Per-channel normalization statistics.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalization {
    /// Statistics of the synthetic face generator, measured over 512 renders
    /// at canvas 64 (see the `synthetic_normalization_defaults` test).
    pub const SYNTHETIC: Normalization = Normalization { mean: [0.495, 0.485, 0.483], std: [0.214, 0.209, 0.216] };

    pub fn identity() -> Self {
        Self { mean: [0.0; 3], std: [1.0; 3] }
    }

    pub fn measure<'a>(images: impl IntoIterator<Item = &'a Image>) -> Self {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut n = 0usize;
        for img in images {
            for p in img.data.chunks(3) {
                for c in 0..3 {
                    sum[c] += p[c] as f64;
                    sq[c] += (p[c] as f64).powi(2);
                }
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        let mean = [0, 1, 2].map(|c| sum[c] / n);
        Normalization {
            mean: mean.map(|m| m as f32),
            std: [0, 1, 2].map(|c| ((sq[c] / n - mean[c] * mean[c]).max(1e-12)).sqrt() as f32),
        }
    }
}

/// Stack equally sized images into a channel-major `[3, N, H, W]` tensor.
pub fn images_to_batch<T: Scalar>(images: &[&Image], norm: &Normalization) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::Invalid("empty image batch".into()))?;
    let (w, h) = (first.width, first.height);
    let n = images.len();
    let plane = w * h;
    let mut data = vec![T::zero(); 3 * n * plane];
    for (i, img) in images.iter().enumerate() {
        if img.width != w || img.height != h {
            return Err(Error::Invalid(format!(
                "batch mixes {}x{} and {}x{} images",
                w, h, img.width, img.height
            )));
        }
        for c in 0..3 {
            let inv = 1.0 / norm.std[c];
            let dst = &mut data[(c * n + i) * plane..(c * n + i + 1) * plane];
            for (p, d) in dst.iter_mut().enumerate() {
                *d = T::of(((img.data[p * 3 + c] - norm.mean[c]) * inv) as f64);
            }
        }
    }
    Ok(Tensor::from_vec(&[3, n, h, w], data)?)
}

/// 2-D affine map `(x, y) -> (a x + b y + tx, c x + d y + ty)`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Affine2 {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Affine2 {
    pub const IDENTITY: Affine2 = Affine2 { a: 1.0, b: 0.0, c: 0.0, d: 1.0, tx: 0.0, ty: 0.0 };

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self { tx, ty, ..Self::IDENTITY }
    }

    pub fn scale(sx: f64, sy: f64) -> Self {
        Self { a: sx, d: sy, ..Self::IDENTITY }
    }

    pub fn rotation(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self { a: c, b: -s, c: s, d: c, tx: 0.0, ty: 0.0 }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (self.a * x + self.b * y + self.tx, self.c * x + self.d * y + self.ty)
    }

    /// `self ∘ inner`: apply `inner` first.
    pub fn then_after(&self, inner: &Affine2) -> Affine2 {
        Affine2 {
            a: self.a * inner.a + self.b * inner.c,
            b: self.a * inner.b + self.b * inner.d,
            c: self.c * inner.a + self.d * inner.c,
            d: self.c * inner.b + self.d * inner.d,
            tx: self.a * inner.tx + self.b * inner.ty + self.tx,
            ty: self.c * inner.tx + self.d * inner.ty + self.ty,
        }
    }

    pub fn determinant(&self) -> f64 {
        self.a * self.d - self.b * self.c
    }

    pub fn inverse(&self) -> Option<Affine2> {
        let det = self.determinant();
        if det.abs() < 1e-12 {
            return None;
        }
        let (a, b, c, d) = (self.d / det, -self.b / det, -self.c / det, self.a / det);
        Some(Affine2 { a, b, c, d, tx: -(a * self.tx + b * self.ty), ty: -(c * self.tx + d * self.ty) })
    }
}
