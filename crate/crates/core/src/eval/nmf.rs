//! Non-negative matrix factorization by multiplicative updates, used for part
//! discovery and as a dimensionality-reduction baseline.

use landmark_tensor::{gemm, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::derive_seed;
use crate::encoder::FeatureMap;
use crate::hypercolumn::FeatureExtractor;
use crate::image::Image;
use crate::{Error, Result};

const EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NmfConfig {
    pub max_iter: usize,
    /// Stop when the relative decrease of the error falls below this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for NmfConfig {
    fn default() -> Self {
        Self { max_iter: 500, tol: 1e-5, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct NmfResult {
    /// `n x r`, row-major.
    pub w: Vec<f64>,
    /// `r x m`, row-major.
    pub h: Vec<f64>,
    pub rank: usize,
    /// Frobenius error `||V - WH||` after initialization and after every update.
    pub errors: Vec<f64>,
}

impl NmfResult {
    pub fn relative_error(&self, v: &[f64]) -> f64 {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        self.errors.last().copied().unwrap_or(f64::NAN) / norm.max(EPS)
    }
}

fn frobenius(v: &[f64], w: &[f64], h: &[f64], n: usize, r: usize, m: usize, scratch: &mut [f64]) -> f64 {
    gemm(n, r, m, w, false, h, false, scratch, false);
    v.iter().zip(scratch.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// `H <- H * (W^T V) / (W^T W H)`.
fn update_h(v: &[f64], w: &[f64], h: &mut [f64], n: usize, r: usize, m: usize) {
    let mut num = vec![0.0; r * m];
    gemm(r, n, m, w, true, v, false, &mut num, false);
    let mut wtw = vec![0.0; r * r];
    gemm(r, n, r, w, true, w, false, &mut wtw, false);
    let mut den = vec![0.0; r * m];
    gemm(r, r, m, &wtw, false, h, false, &mut den, false);
    for ((x, a), b) in h.iter_mut().zip(&num).zip(&den) {
        *x *= a / (b + EPS);
    }
}

/// `W <- W * (V H^T) / (W H H^T)`.
fn update_w(v: &[f64], w: &mut [f64], h: &[f64], n: usize, r: usize, m: usize) {
    let mut num = vec![0.0; n * r];
    gemm(n, m, r, v, false, h, true, &mut num, false);
    let mut hht = vec![0.0; r * r];
    gemm(r, m, r, h, false, h, true, &mut hht, false);
    let mut den = vec![0.0; n * r];
    gemm(n, r, r, w, false, &hht, false, &mut den, false);
    for ((x, a), b) in w.iter_mut().zip(&num).zip(&den) {
        *x *= a / (b + EPS);
    }
}

/// Factor a non-negative `n x m` matrix as `W (n x r) * H (r x m)`.
pub fn nmf(v: &[f64], n: usize, m: usize, rank: usize, cfg: &NmfConfig) -> Result<NmfResult> {
    if v.len() != n * m {
        return Err(Error::Invalid(format!("matrix has {} entries, expected {n}x{m}", v.len())));
    }
    if rank == 0 || rank > n.min(m) {
        return Err(Error::Invalid(format!("rank {rank} must be in 1..={}", n.min(m))));
    }
    if v.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::Invalid("NMF input must be finite and non-negative".into()));
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let scale = (mean / rank as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x4EF, 0));
    let mut w: Vec<f64> = (0..n * rank).map(|_| rng.random::<f64>() * scale).collect();
    let mut h: Vec<f64> = (0..rank * m).map(|_| rng.random::<f64>() * scale).collect();
    let mut scratch = vec![0.0; n * m];
    let mut errors = vec![frobenius(v, &w, &h, n, rank, m, &mut scratch)];
    for _ in 0..cfg.max_iter {
        update_h(v, &w, &mut h, n, rank, m);
        update_w(v, &mut w, &h, n, rank, m);
        let e = frobenius(v, &w, &h, n, rank, m, &mut scratch);
        let prev = *errors.last().unwrap();
        errors.push(e);
        if prev <= EPS || (prev - e) / prev < cfg.tol {
            break;
        }
    }
    Ok(NmfResult { w, h, rank, errors })
}

/// Parts found by factoring the (pixels x channels) matrix of a set of maps.
#[derive(Clone, Debug)]
pub struct NmfParts {
    /// `r x C` part basis.
    pub basis: Vec<f64>,
    pub rank: usize,
    pub channels: usize,
    /// Added to every feature so the matrix is non-negative.
    pub shift: f64,
    /// Per-image `[r, h, w]` part responses.
    pub heatmaps: Vec<Tensor<f32>>,
    pub errors: Vec<f64>,
}

fn pixel_rows(map: &FeatureMap<f32>, shift: f64) -> Vec<f64> {
    let (c, cells) = (map.channels(), map.cells());
    let d = map.data.data();
    let mut out = vec![0.0; cells * c];
    for ch in 0..c {
        for p in 0..cells {
            out[p * c + ch] = (d[ch * cells + p] as f64 + shift).max(0.0);
        }
    }
    out
}

pub fn nmf_parts(maps: &[FeatureMap<f32>], rank: usize, cfg: &NmfConfig) -> Result<NmfParts> {
    let first = maps.first().ok_or_else(|| Error::Invalid("no feature maps".into()))?;
    let c = first.channels();
    if maps.iter().any(|m| m.channels() != c) {
        return Err(Error::Invalid("feature maps differ in channel count".into()));
    }
    let min = maps.iter().flat_map(|m| m.data.data().iter()).fold(f32::INFINITY, |a, &b| a.min(b)) as f64;
    let shift = (-min).max(0.0);
    let v: Vec<f64> = maps.iter().flat_map(|m| pixel_rows(m, shift)).collect();
    let n = v.len() / c;
    let res = nmf(&v, n, c, rank, cfg)?;
    let mut heatmaps = Vec::with_capacity(maps.len());
    let mut row = 0;
    for m in maps {
        let cells = m.cells();
        let t = Tensor::from_fn(&[rank, m.height(), m.width()], |i| {
            let (k, p) = (i / cells, i % cells);
            res.w[(row + p) * rank + k] as f32
        });
        heatmaps.push(t);
        row += cells;
    }
    Ok(NmfParts { basis: res.h, rank, channels: c, shift, heatmaps, errors: res.errors })
}

impl NmfParts {
    /// Non-negative coefficients of `map` on the basis, as an `r`-channel map.
    pub fn project(&self, map: &FeatureMap<f32>) -> Result<FeatureMap<f32>> {
        if map.channels() != self.channels {
            return Err(Error::Invalid(format!("map has {} channels, basis {}", map.channels(), self.channels)));
        }
        let (n, r, m) = (map.cells(), self.rank, self.channels);
        let v = pixel_rows(map, self.shift);
        let mut w = vec![1.0 / r as f64; n * r];
        for _ in 0..100 {
            update_w(&v, &mut w, &self.basis, n, r, m);
        }
        let data = Tensor::from_fn(&[r, map.height(), map.width()], |i| w[(i % n) * r + i / n] as f32);
        FeatureMap::new(data, map.downscale, map.source_size)
    }
}

/// Wraps an extractor and reduces its output to NMF coefficients.
pub struct ProjectedExtractor<E> {
    pub inner: E,
    pub parts: NmfParts,
}

impl<E: FeatureExtractor> FeatureExtractor for ProjectedExtractor<E> {
    fn extract(&self, images: &[&Image]) -> Result<Vec<FeatureMap<f32>>> {
        self.inner.extract(images)?.iter().map(|m| self.parts.project(m)).collect()
    }

    fn downscale(&self) -> usize {
        self.inner.downscale()
    }

    fn fingerprint(&self) -> String {
        format!("{}+nmf{}", self.inner.fingerprint(), self.parts.rank)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn product(n: usize, m: usize, r: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..n * r).map(|_| rng.random::<f64>()).collect();
        let h: Vec<f64> = (0..r * m).map(|_| rng.random::<f64>()).collect();
        let mut v = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                v[i * m + j] = (0..r).map(|k| w[i * r + k] * h[k * m + j]).sum();
            }
        }
        v
    }

    #[test]
    fn rank_checks() {
        let v = vec![1.0; 12];
        assert!(nmf(&v, 3, 4, 4, &NmfConfig::default()).is_err());
        assert!(nmf(&v, 3, 4, 0, &NmfConfig::default()).is_err());
        assert!(nmf(&[-1.0, 1.0], 1, 2, 1, &NmfConfig::default()).is_err());
    }

    #[test]
    fn error_never_increases_and_factors_stay_nonnegative() {
        let v = product(30, 20, 3, 1);
        let res = nmf(&v, 30, 20, 3, &NmfConfig { tol: 0.0, max_iter: 200, seed: 2 }).unwrap();
        for w in res.errors.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} -> {}", w[0], w[1]);
        }
        assert!(res.w.iter().chain(&res.h).all(|&x| x >= 0.0));
    }

    #[test]
    fn projection_recovers_basis_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = Tensor::from_fn(&[6, 4, 4], |_| rng.random::<f32>());
        let map = FeatureMap::new(data, 4, (16, 16)).unwrap();
        let parts = nmf_parts(&[map.clone()], 2, &NmfConfig::default()).unwrap();
        assert_eq!(parts.heatmaps[0].shape(), &[2, 4, 4]);
        let p = parts.project(&map).unwrap();
        assert_eq!((p.channels(), p.height(), p.width()), (2, 4, 4));
        assert!(p.data.data().iter().all(|&x| x >= 0.0));
    }
}
