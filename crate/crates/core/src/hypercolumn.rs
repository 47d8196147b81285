//! Hypercolumns (upsampled, concatenated stage features) and cosine
//! correspondence matching between feature maps.

use std::ops::Range;

use landmark_tensor::ops::bilinear_resize;
use landmark_tensor::{Scalar, Tensor};

use crate::datasets::{ImageSample, LandmarkSet};
use crate::encoder::{EncoderState, FeatureMap};
use crate::image::Image;
use crate::{Error, Result};

/// Anything that turns images into feature maps at a fixed downscale.
pub trait FeatureExtractor {
    fn extract(&self, images: &[&Image]) -> Result<Vec<FeatureMap<f32>>>;
    fn downscale(&self) -> usize;
    /// Identifies the weights, for cache keys and reports.
    fn fingerprint(&self) -> String;
}

impl<E: FeatureExtractor + ?Sized> FeatureExtractor for Box<E> {
    fn extract(&self, images: &[&Image]) -> Result<Vec<FeatureMap<f32>>> {
        (**self).extract(images)
    }

    fn downscale(&self) -> usize {
        (**self).downscale()
    }

    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HypercolumnMap<T> {
    pub map: FeatureMap<T>,
    /// Channel range contributed by each stage, in stage order.
    pub slices: Vec<Range<usize>>,
}

/// Upsample every stage map to `source / target_downscale` and concatenate
/// along channels in the given order.
pub fn build_hypercolumn<T: Scalar>(stages: &[FeatureMap<T>], target_downscale: usize) -> Result<HypercolumnMap<T>> {
    let first = stages.first().ok_or_else(|| Error::Invalid("no stage maps".into()))?;
    let source = first.source_size;
    if let Some(m) = stages.iter().find(|m| m.source_size != source) {
        return Err(Error::Invalid(format!(
            "stage maps come from {:?} and {:?} inputs",
            source, m.source_size
        )));
    }
    let min_r = stages.iter().map(|m| m.downscale).min().unwrap();
    if target_downscale == 0 || target_downscale > min_r {
        return Err(Error::Invalid(format!("target downscale {target_downscale} exceeds the finest stage ({min_r})")));
    }
    let (h, w) = (source.0 / target_downscale, source.1 / target_downscale);
    let total: usize = stages.iter().map(FeatureMap::channels).sum();
    let mut data = Vec::with_capacity(total * h * w);
    let mut slices = Vec::with_capacity(stages.len());
    for m in stages {
        let up = bilinear_resize(&m.data, h, w)?;
        slices.push(data.len() / (h * w)..data.len() / (h * w) + m.channels());
        data.extend_from_slice(up.data());
    }
    let map = FeatureMap::new(Tensor::from_vec(&[total, h, w], data)?, target_downscale, source)?;
    Ok(HypercolumnMap { map, slices })
}

/// Batched hypercolumns of `[C_s, N, h_s, w_s]` stage tensors, as `[C~, N, h, w]`.
pub fn hypercolumn_batch<T: Scalar>(stages: &[&Tensor<T>], h: usize, w: usize) -> Result<Tensor<T>> {
    let n = stages.first().ok_or_else(|| Error::Invalid("no stage maps".into()))?.dim(1);
    let mut data = Vec::new();
    let mut total = 0;
    for t in stages {
        let up = bilinear_resize(t, h, w)?;
        total += t.dim(0);
        data.extend_from_slice(up.data());
    }
    Ok(Tensor::from_vec(&[total, n, h, w], data)?)
}

/// Temperature softmax over a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityDistribution {
    pub mass: Vec<f64>,
    pub height: usize,
    pub width: usize,
    /// `(x, y)` grid cell of the source descriptor.
    pub source_uv: (usize, usize),
    pub temperature: f64,
}

impl SimilarityDistribution {
    /// Softmax of `logits / temperature`, computed stably.
    pub fn from_logits(logits: &[f64], height: usize, width: usize, source_uv: (usize, usize), temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::Invalid(format!("temperature {temperature} must be positive")));
        }
        if logits.len() != height * width || logits.is_empty() {
            return Err(Error::Invalid(format!("{} logits for a {height}x{width} grid", logits.len())));
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut mass: Vec<f64> = logits.iter().map(|&l| ((l - max) / temperature).exp()).collect();
        let z: f64 = mass.iter().sum();
        mass.iter_mut().for_each(|m| *m /= z);
        Ok(Self { mass, height, width, source_uv, temperature })
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.mass[y * self.width + x]
    }

    pub fn total(&self) -> f64 {
        self.mass.iter().sum()
    }

    pub fn entropy(&self) -> f64 {
        -self.mass.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
    }

    /// First cell of maximal mass in row-major order, as `(x, y)`.
    pub fn argmax(&self) -> (usize, usize) {
        let i = argmax_first(&self.mass);
        (i % self.width, i / self.width)
    }
}

pub(crate) fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Unit-normalized copy of every cell's descriptor, cell-major; zero
/// vectors stay zero.
pub struct NormalizedGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub downscale: usize,
    pub vectors: Vec<f64>,
    pub zero_cells: usize,
}

impl NormalizedGrid {
    pub fn new<T: Scalar>(map: &FeatureMap<T>) -> Self {
        let (c, h, w) = (map.channels(), map.height(), map.width());
        let plane = h * w;
        let src = map.data.data();
        let mut vectors = vec![0.0; plane * c];
        for ch in 0..c {
            for p in 0..plane {
                vectors[p * c + ch] = src[ch * plane + p].as_f64();
            }
        }
        let mut zero_cells = 0;
        for v in vectors.chunks_mut(c) {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                v.iter_mut().for_each(|x| *x /= n);
            } else {
                zero_cells += 1;
            }
        }
        Self { height: h, width: w, channels: c, downscale: map.downscale, vectors, zero_cells }
    }

    pub fn cell(&self, x: usize, y: usize) -> &[f64] {
        let i = y * self.width + x;
        &self.vectors[i * self.channels..(i + 1) * self.channels]
    }

    /// Cosine of `v` (unit or zero) against every cell.
    pub fn cosines(&self, v: &[f64]) -> Vec<f64> {
        self.vectors.chunks(self.channels).map(|q| q.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
    }

    /// Pixel center of a grid cell.
    pub fn cell_center(&self, x: usize, y: usize) -> (f64, f64) {
        let r = self.downscale as f64;
        (x as f64 * r + r / 2.0, y as f64 * r + r / 2.0)
    }
}

/// Cosine heatmap of one reference descriptor over the query grid and its
/// argmax in query pixel coordinates.
pub fn match_point<T: Scalar>(
    reference: &FeatureMap<T>,
    ref_uv: (usize, usize),
    query: &FeatureMap<T>,
    tau_match: f64,
) -> Result<(SimilarityDistribution, (f64, f64))> {
    let r = NormalizedGrid::new(reference);
    let q = NormalizedGrid::new(query);
    match_point_grids(&r, ref_uv, &q, tau_match)
}

pub fn match_point_grids(
    reference: &NormalizedGrid,
    ref_uv: (usize, usize),
    query: &NormalizedGrid,
    tau_match: f64,
) -> Result<(SimilarityDistribution, (f64, f64))> {
    if reference.channels != query.channels {
        return Err(Error::Invalid(format!(
            "channel counts differ: {} vs {}",
            reference.channels, query.channels
        )));
    }
    if ref_uv.0 >= reference.width || ref_uv.1 >= reference.height {
        return Err(Error::Invalid(format!(
            "grid point {ref_uv:?} outside the {}x{} reference grid",
            reference.width, reference.height
        )));
    }
    if reference.zero_cells + query.zero_cells > 0 {
        log::warn!("zero-norm descriptors treated as cosine 0");
    }
    let cos = query.cosines(reference.cell(ref_uv.0, ref_uv.1));
    let dist = SimilarityDistribution::from_logits(&cos, query.height, query.width, ref_uv, tau_match)?;
    let (gx, gy) = (argmax_first(&cos) % query.width, argmax_first(&cos) / query.width);
    Ok((dist, query.cell_center(gx, gy)))
}

/// Grid cell containing a pixel, clamped to the grid.
pub fn pixel_to_cell(p: (f64, f64), downscale: usize, width: usize, height: usize) -> (usize, usize) {
    let r = downscale as f64;
    let gx = (p.0 / r).floor().clamp(0.0, (width - 1) as f64) as usize;
    let gy = (p.1 / r).floor().clamp(0.0, (height - 1) as f64) as usize;
    (gx, gy)
}

/// Transfer landmarks from a reference map to a query map by nearest cosine.
pub fn match_landmarks_maps<T: Scalar>(
    ref_landmarks: &LandmarkSet,
    reference: &FeatureMap<T>,
    query: &FeatureMap<T>,
) -> Result<LandmarkSet> {
    let r = NormalizedGrid::new(reference);
    let q = NormalizedGrid::new(query);
    let mut points = Vec::with_capacity(ref_landmarks.len());
    for &p in &ref_landmarks.points {
        let uv = pixel_to_cell(p, r.downscale, r.width, r.height);
        let (_, px) = match_point_grids(&r, uv, &q, 1.0)?;
        points.push(px);
    }
    LandmarkSet::with_visibility(points, ref_landmarks.visible.clone(), ref_landmarks.eye_indices)
}

pub fn match_landmarks(
    reference: &ImageSample,
    query: &ImageSample,
    extractor: &dyn FeatureExtractor,
) -> Result<LandmarkSet> {
    let lm = reference
        .landmarks
        .as_ref()
        .ok_or_else(|| Error::Invalid("reference sample has no landmarks".into()))?;
    let maps = extractor.extract(&[&reference.image, &query.image])?;
    match_landmarks_maps(lm, &maps[0], &maps[1])
}

/// Online-backbone hypercolumns of a stage-1 encoder.
pub struct HypercolumnExtractor {
    pub encoder: EncoderState<f32>,
    pub downscale: usize,
    pub batch: usize,
    pub fingerprint: String,
}

impl FeatureExtractor for HypercolumnExtractor {
    fn extract(&self, images: &[&Image]) -> Result<Vec<FeatureMap<f32>>> {
        self.encoder
            .stage_maps(images, self.batch)?
            .iter()
            .map(|stages| build_hypercolumn(stages, self.downscale).map(|h| h.map))
            .collect()
    }

    fn downscale(&self) -> usize {
        self.downscale
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }
}

fn colormap(t: f64) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * t - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * t - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * t - 1.0).abs()).clamp(0.0, 1.0);
    [r as f32, g as f32, b as f32]
}

/// Heatmap (max-normalized, bilinearly upsampled) alpha-blended over the query image.
pub fn heatmap_overlay(query: &Image, dist: &SimilarityDistribution, alpha: f32) -> Result<Image> {
    let max = dist.mass.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let grid = Tensor::<f64>::from_vec(&[dist.height, dist.width], dist.mass.iter().map(|m| m / max).collect())?;
    let up = bilinear_resize(&grid, query.height(), query.width())?;
    let w = query.width();
    Ok(Image::from_fn(w, query.height(), |x, y| {
        let c = colormap(up.data()[y * w + x]);
        let p = query.get(x, y);
        [0, 1, 2].map(|k| (1.0 - alpha) * p[k] + alpha * c[k])
    }))
}

/// Draw a small cross.
pub fn mark(img: &mut Image, p: (f64, f64), rgb: [f32; 3]) {
    let (cx, cy) = (p.0.floor() as i64, p.1.floor() as i64);
    for d in -2i64..=2 {
        for (x, y) in [(cx + d, cy), (cx, cy + d)] {
            if x >= 0 && y >= 0 && (x as usize) < img.width() && (y as usize) < img.height() {
                img.set(x as usize, y as usize, rgb);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(c: usize, h: usize, w: usize, r: usize, f: impl Fn(usize) -> f64) -> FeatureMap<f64> {
        FeatureMap::new(Tensor::from_fn(&[c, h, w], |i| f(i)), r, (h * r, w * r)).unwrap()
    }

    #[test]
    fn desk_and_resnet_widths() {
        let desk: Vec<_> = [16, 32, 64, 128]
            .iter()
            .zip([4, 8, 16, 32])
            .map(|(&c, r)| map(c, 64 / r, 64 / r, r, |i| i as f64))
            .collect();
        assert_eq!(build_hypercolumn(&desk, 4).unwrap().map.channels(), 240);
        let big: Vec<_> = crate::encoder::BackboneConfig::RESNET50_CHANNELS
            .iter()
            .zip([4, 8, 16, 32])
            .map(|(&c, r)| map(c, 32 / r, 32 / r, r, |_| 0.5))
            .collect();
        let hc = build_hypercolumn(&big, 4).unwrap();
        assert_eq!(hc.map.channels(), 3840);
        assert_eq!(hc.slices[3], 1792..3840);
    }

    #[test]
    fn single_stage_at_target_is_identity() {
        let m = map(3, 5, 5, 4, |i| (i as f64 * 0.37).sin());
        assert_eq!(build_hypercolumn(&[m.clone()], 4).unwrap().map, m);
    }

    #[test]
    fn mismatched_sources_rejected() {
        let a = map(2, 4, 4, 4, |_| 1.0);
        let mut b = map(2, 2, 2, 8, |_| 1.0);
        b.source_size = (8, 8);
        assert!(build_hypercolumn(&[a.clone(), b], 4).is_err());
        assert!(build_hypercolumn(&[a], 8).is_err());
    }

    #[test]
    fn two_cell_heatmap() {
        let r = map(2, 1, 1, 1, |i| [1.0, 0.0][i]);
        let q = map(2, 1, 2, 1, |i| [1.0, 0.0, 0.0, 1.0][i]);
        let (d, px) = match_point(&r, (0, 0), &q, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((d.mass[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((d.mass[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert_eq!(px, (0.5, 0.5));
    }

    #[test]
    fn out_of_grid_point_rejected() {
        let m = map(2, 3, 3, 4, |i| i as f64);
        assert!(match_point(&m, (3, 0), &m, 1.0).is_err());
    }

    #[test]
    fn zero_vectors_have_zero_cosine() {
        let r = map(2, 1, 1, 1, |_| 0.0);
        let q = map(2, 1, 2, 1, |i| i as f64);
        let (d, _) = match_point(&r, (0, 0), &q, 1.0).unwrap();
        assert!((d.mass[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn pixel_cells_clamp() {
        assert_eq!(pixel_to_cell((5.0, 3.9), 4, 4, 4), (1, 0));
        assert_eq!(pixel_to_cell((-1.0, 100.0), 4, 4, 4), (0, 3));
    }
}
