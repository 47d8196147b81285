//! Landmark regression on frozen features: a 1x1 convolution to virtual
//! keypoint heatmaps, soft-argmax, and a linear map to the annotated points.

use std::fs;
use std::path::{Path, PathBuf};

use landmark_tensor::optim::Sgd;
use landmark_tensor::{l2_normalize_channels, Backward, BackwardCtx, Conv2d, Linear, ParamStore, Scalar, Session, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::datasets::{derive_seed, ImageSample, LandmarkSet};
use crate::encoder::FeatureMap;
use crate::eval::mean_iod;
use crate::hypercolumn::FeatureExtractor;
use crate::{Error, Result};

pub const REGRESSOR_KIND: &str = "regressor";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Wiring {
    /// `C -> M` heatmaps, soft-argmax, then linear `2M -> 2K`.
    Virtual,
    /// `C -> K` heatmaps read out directly.
    Direct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressorConfig {
    pub virtual_keypoints: usize,
    pub beta: f64,
    pub wiring: Wiring,
    /// Unit-normalize feature vectors before the heatmap convolution.
    pub normalize_features: bool,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_steps: usize,
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self {
            virtual_keypoints: 50,
            beta: 10.0,
            wiring: Wiring::Virtual,
            normalize_features: true,
            lr: 0.5,
            momentum: 0.9,
            weight_decay: 1e-4,
            max_steps: 400,
            eval_every: 20,
            patience: 5,
            seed: 0,
        }
    }
}

/// Expected normalized `(x, y)` under `softmax(beta * heatmap)` over an
/// `h x w` grid, cell centers at `((j + 0.5) / w, (i + 0.5) / h)`.
pub fn softargmax(heatmap: &[f64], h: usize, w: usize, beta: f64) -> (f64, f64) {
    let max = heatmap.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = heatmap.iter().map(|&v| (beta * (v - max)).exp()).collect();
    let z: f64 = e.iter().sum();
    let (mut x, mut y) = (0.0, 0.0);
    for (k, &p) in e.iter().enumerate() {
        x += p * ((k % w) as f64 + 0.5);
        y += p * ((k / w) as f64 + 0.5);
    }
    (x / (z * w as f64), y / (z * h as f64))
}

struct SoftArgmaxRule<T> {
    probs: Vec<T>,
    coords: Vec<T>,
    dims: (usize, usize, usize, usize),
    beta: T,
}

impl<T: Scalar> Backward<T> for SoftArgmaxRule<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let (m, n, h, w) = self.dims;
        let plane = h * w;
        let g = ctx.grad.data();
        let mut dx = vec![T::zero(); m * n * plane];
        for c in 0..m {
            for i in 0..n {
                let gx = g[(2 * c) * n + i];
                let gy = g[(2 * c + 1) * n + i];
                let ex = self.coords[(2 * c) * n + i];
                let ey = self.coords[(2 * c + 1) * n + i];
                let off = (c * n + i) * plane;
                for k in 0..plane {
                    let cx = T::of(((k % w) as f64 + 0.5) / w as f64);
                    let cy = T::of(((k / w) as f64 + 0.5) / h as f64);
                    dx[off + k] = self.beta * self.probs[off + k] * ((cx - ex) * gx + (cy - ey) * gy);
                }
            }
        }
        vec![Tensor::from_vec(&[m, n, h, w], dx).ok()]
    }
}

/// Soft-argmax of `[M, N, h, w]` heatmaps into `[2M, N]` rows `x0, y0, x1, ...`.
pub fn softargmax_var<T: Scalar>(tape: &mut Tape<T>, heat: Var, beta: f64) -> Result<Var> {
    let (m, n, h, w) = tape.value(heat).dims4()?;
    let plane = h * w;
    let b = T::of(beta);
    let src = tape.value(heat).data();
    let mut probs = vec![T::zero(); src.len()];
    let mut coords = vec![T::zero(); 2 * m * n];
    for c in 0..m {
        for i in 0..n {
            let off = (c * n + i) * plane;
            let row = &src[off..off + plane];
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for k in 0..plane {
                let e = (b * (row[k] - max)).exp();
                probs[off + k] = e;
                z += e;
            }
            let (mut x, mut y) = (T::zero(), T::zero());
            for k in 0..plane {
                x += probs[off + k] * T::of((k % w) as f64 + 0.5);
                y += probs[off + k] * T::of((k / w) as f64 + 0.5);
                probs[off + k] /= z;
            }
            coords[(2 * c) * n + i] = x / (z * T::of(w as f64));
            coords[(2 * c + 1) * n + i] = y / (z * T::of(h as f64));
        }
    }
    let value = Tensor::from_vec(&[2 * m, n], coords.clone())?;
    Ok(tape.apply(&[heat], value, SoftArgmaxRule { probs, coords, dims: (m, n, h, w), beta: b }))
}

#[derive(Clone, Debug)]
pub struct RegressorState<T: Scalar> {
    pub config: RegressorConfig,
    pub channels: usize,
    pub landmarks: usize,
    pub store: ParamStore<T>,
    pub heatmap_conv: Conv2d,
    pub linear_head: Option<Linear>,
}

impl<T: Scalar> RegressorState<T> {
    pub fn new(channels: usize, landmarks: usize, config: &RegressorConfig) -> Result<Self> {
        if channels == 0 || landmarks == 0 {
            return Err(Error::Invalid("regressor needs positive channel and landmark counts".into()));
        }
        if config.wiring == Wiring::Virtual && config.virtual_keypoints == 0 {
            return Err(Error::Config("virtual_keypoints must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0xAE, 0));
        let mut store = ParamStore::new();
        let m = match config.wiring {
            Wiring::Virtual => config.virtual_keypoints,
            Wiring::Direct => landmarks,
        };
        let heatmap_conv = Conv2d::new(&mut store, "heatmap", channels, m, 1, 1, 0, true, &mut rng);
        let linear_head =
            (config.wiring == Wiring::Virtual).then(|| Linear::new(&mut store, "head", 2 * m, 2 * landmarks, true, &mut rng));
        Ok(Self { config: config.clone(), channels, landmarks, store, heatmap_conv, linear_head })
    }

    /// `[C, N, h, w]` features to `[2K, N]` normalized coordinates.
    pub fn forward(&self, s: &mut Session<T>, features: Var) -> Result<Var> {
        let c = s.value(features).dim(0);
        if c != self.channels {
            return Err(Error::Invalid(format!("regressor expects {} feature channels, got {c}", self.channels)));
        }
        let heat = self.heatmap_conv.forward(s, &self.store, features)?;
        let coords = softargmax_var(&mut s.tape, heat, self.config.beta)?;
        let Some(head) = &self.linear_head else { return Ok(coords) };
        // the head works on coordinates centered at the image middle
        let half = |s: &mut Session<T>, v: Var, sign: f64| {
            let shape = s.value(v).shape().to_vec();
            let c = s.tape.constant(Tensor::full(&shape, T::of(0.5 * sign)));
            s.tape.add(v, c)
        };
        let centered = half(s, coords, -1.0)?;
        let out = head.forward(s, &self.store, centered)?;
        Ok(half(s, out, 1.0)?)
    }

    /// Feature tensor as the regressor consumes it.
    pub fn prepare(&self, maps: &[&FeatureMap<f32>]) -> Result<Tensor<T>> {
        let x = FeatureMap::stack(maps)?.cast::<T>();
        Ok(if self.config.normalize_features { l2_normalize_channels(&x).0 } else { x })
    }

    /// Pixel-space predictions, clamped inside each source image.
    pub fn predict(&self, maps: &[&FeatureMap<f32>]) -> Result<Vec<LandmarkSet>> {
        if maps.is_empty() {
            return Ok(Vec::new());
        }
        self.predict_prepared(&self.prepare(maps)?, &maps.iter().map(|m| m.source_size).collect::<Vec<_>>())
    }

    pub fn predict_prepared(&self, x: &Tensor<T>, sizes: &[(usize, usize)]) -> Result<Vec<LandmarkSet>> {
        let mut s = Session::new(false);
        s.freeze(&self.store);
        let v = s.input(x.clone());
        let out = self.forward(&mut s, v)?;
        let out = s.value(out);
        let n = out.dim(1);
        Ok((0..n)
            .map(|i| {
                let (h, w) = sizes[i];
                let points = (0..self.landmarks)
                    .map(|k| {
                        let x = out.data()[(2 * k) * n + i].as_f64() * w as f64;
                        let y = out.data()[(2 * k + 1) * n + i].as_f64() * h as f64;
                        (x.clamp(0.0, w as f64 - 1e-6), y.clamp(0.0, h as f64 - 1e-6))
                    })
                    .collect();
                LandmarkSet { points, visible: vec![true; self.landmarks], eye_indices: None }
            })
            .collect())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<String> {
        let meta = serde_json::json!({ "config": self.config, "channels": self.channels, "landmarks": self.landmarks });
        let mut c = Checkpoint::new(REGRESSOR_KIND, &meta, 0)?;
        c.push_store("", &self.store);
        c.save(path)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let c = Checkpoint::<T>::load(path)?;
        c.expect_kind(REGRESSOR_KIND, path)?;
        #[derive(Deserialize)]
        struct Meta {
            config: RegressorConfig,
            channels: usize,
            landmarks: usize,
        }
        let meta: Meta = c.config_as(path)?;
        let mut r = Self::new(meta.channels, meta.landmarks, &meta.config)?;
        c.restore_store("", &mut r.store, path)?;
        Ok(r)
    }
}

/// Normalized targets and visibility mask, `[2K, N]` each.
fn targets<T: Scalar>(sets: &[&LandmarkSet], sizes: &[(usize, usize)]) -> Result<(Tensor<T>, Tensor<T>)> {
    let k = sets.first().map(|s| s.len()).unwrap_or(0);
    let n = sets.len();
    let mut t = vec![T::zero(); 2 * k * n];
    let mut m = vec![T::zero(); 2 * k * n];
    for (i, (s, &(h, w))) in sets.iter().zip(sizes).enumerate() {
        if s.len() != k {
            return Err(Error::Invalid(format!("sample {i} has {} landmarks, expected {k}", s.len())));
        }
        for (j, (&(x, y), &v)) in s.points.iter().zip(&s.visible).enumerate() {
            if v {
                t[(2 * j) * n + i] = T::of(x / w as f64);
                t[(2 * j + 1) * n + i] = T::of(y / h as f64);
                m[(2 * j) * n + i] = T::one();
                m[(2 * j + 1) * n + i] = T::one();
            }
        }
    }
    Ok((Tensor::from_vec(&[2 * k, n], t)?, Tensor::from_vec(&[2 * k, n], m)?))
}

/// Frozen features and ground truth of one split.
pub struct AnnotatedFeatures<'a> {
    pub maps: Vec<&'a FeatureMap<f32>>,
    pub landmarks: Vec<&'a LandmarkSet>,
}

impl<'a> AnnotatedFeatures<'a> {
    pub fn new(maps: &'a [FeatureMap<f32>], samples: &'a [ImageSample]) -> Result<Self> {
        if maps.len() != samples.len() {
            return Err(Error::Invalid(format!("{} feature maps for {} samples", maps.len(), samples.len())));
        }
        let landmarks = samples
            .iter()
            .enumerate()
            .map(|(i, s)| s.landmarks.as_ref().ok_or_else(|| Error::Invalid(format!("sample {i} is not annotated"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { maps: maps.iter().collect(), landmarks })
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegressorSummary {
    pub n_annotations: usize,
    pub val_iod: f64,
    pub best_step: usize,
    pub steps_run: usize,
    pub train_indices: Vec<usize>,
}

/// Deterministic annotated subset for a seed: the first `n` of a seeded shuffle.
pub fn select_subset(available: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n < 1 {
        return Err(Error::Invalid("n_annotations must be at least 1".into()));
    }
    if n > available {
        return Err(Error::Invalid(format!("{n} annotations requested but only {available} are available")));
    }
    let mut idx: Vec<usize> = (0..available).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5E1, 0)));
    idx.truncate(n);
    Ok(idx)
}

/// Full-batch SGD on `n_annotations` training samples with early stopping on
/// validation IOD; the best evaluated state is returned.
pub fn train_regressor_on_features(
    train: &AnnotatedFeatures<'_>,
    val: &AnnotatedFeatures<'_>,
    n_annotations: usize,
    cfg: &RegressorConfig,
) -> Result<(RegressorState<f32>, RegressorSummary)> {
    let subset = select_subset(train.len(), n_annotations, cfg.seed)?;
    if val.is_empty() {
        return Err(Error::Invalid("validation split is empty".into()));
    }
    let channels = train.maps[0].channels();
    let k = train.landmarks[0].len();
    let mut reg = RegressorState::<f32>::new(channels, k, cfg)?;

    let maps: Vec<&FeatureMap<f32>> = subset.iter().map(|&i| train.maps[i]).collect();
    let sets: Vec<&LandmarkSet> = subset.iter().map(|&i| train.landmarks[i]).collect();
    let sizes: Vec<(usize, usize)> = maps.iter().map(|m| m.source_size).collect();
    let x = reg.prepare(&maps)?;
    let (target, mask) = targets::<f32>(&sets, &sizes)?;
    if mask.sum() <= 0.0 {
        return Err(Error::Invalid("selected annotations have no visible landmarks".into()));
    }
    let vx = reg.prepare(&val.maps)?;
    let vsizes: Vec<(usize, usize)> = val.maps.iter().map(|m| m.source_size).collect();
    let val_iod = |r: &RegressorState<f32>| -> Result<f64> {
        let preds = r.predict_prepared(&vx, &vsizes)?;
        mean_iod(&preds, &val.landmarks)
    };

    let mut sgd = Sgd::<f32>::new(cfg.momentum, cfg.weight_decay);
    let mut best = (val_iod(&reg)?, 0, reg.store.clone());
    let mut since_best = 0;
    let mut steps_run = 0;
    for step in 1..=cfg.max_steps {
        let mut s = Session::new(true);
        let xv = s.input(x.clone());
        let out = reg.forward(&mut s, xv)?;
        let loss = s.tape.masked_mse(out, &target, &mask)?;
        let lv = s.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::NonFinite { what: "regressor loss".into(), location: format!("step {step}") });
        }
        let grads = s.backward(loss)?;
        let pg = s.param_grads(&reg.store, &grads);
        sgd.step(&mut reg.store, &pg, cfg.lr as f32)?;
        steps_run = step;
        if step % cfg.eval_every.max(1) == 0 || step == cfg.max_steps {
            let iod = val_iod(&reg)?;
            if iod < best.0 {
                best = (iod, step, reg.store.clone());
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
    }
    reg.store.copy_from(&best.2)?;
    let summary = RegressorSummary {
        n_annotations,
        val_iod: best.0,
        best_step: best.1,
        steps_run,
        train_indices: subset,
    };
    Ok((reg, summary))
}

/// Extract (or read cached) features, then train.
pub fn train_regressor(
    extractor: &dyn FeatureExtractor,
    train: &[ImageSample],
    val: &[ImageSample],
    n_annotations: usize,
    cfg: &RegressorConfig,
    cache: Option<&FeatureCache>,
) -> Result<(RegressorState<f32>, RegressorSummary)> {
    let tf = extract_features(extractor, train, cache)?;
    let vf = extract_features(extractor, val, cache)?;
    train_regressor_on_features(&AnnotatedFeatures::new(&tf, train)?, &AnnotatedFeatures::new(&vf, val)?, n_annotations, cfg)
}

pub fn extract_features(
    extractor: &dyn FeatureExtractor,
    samples: &[ImageSample],
    cache: Option<&FeatureCache>,
) -> Result<Vec<FeatureMap<f32>>> {
    match cache {
        Some(c) => c.get_or_compute(extractor, samples),
        None => {
            let mut out = Vec::with_capacity(samples.len());
            for chunk in samples.chunks(32) {
                let imgs: Vec<_> = chunk.iter().map(|s| &s.image).collect();
                out.extend(extractor.extract(&imgs)?);
            }
            Ok(out)
        }
    }
}

/// One binary record per image, keyed by extractor fingerprint and image
/// content hash.
pub struct FeatureCache {
    pub dir: PathBuf,
}

const CACHE_MAGIC: &[u8; 8] = b"LMRKFEAT";

pub fn image_hash(sample: &ImageSample) -> String {
    let mut h = Sha256::new();
    h.update((sample.width() as u64).to_le_bytes());
    h.update((sample.height() as u64).to_le_bytes());
    for v in sample.image.data() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Hash of every image of a dataset, in order.
pub fn dataset_hash(samples: &[ImageSample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(image_hash(s).as_bytes());
    }
    hex::encode(h.finalize())
}

impl FeatureCache {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    fn path(&self, fingerprint: &str, image: &str) -> PathBuf {
        let key = hex::encode(Sha256::digest(format!("{fingerprint}:{image}").as_bytes()));
        self.dir.join(format!("{}.feat", &key[..32]))
    }

    fn write(path: &Path, map: &FeatureMap<f32>, fingerprint: &str, image: &str) -> Result<()> {
        let mut buf = Vec::with_capacity(64 + map.data.numel() * 4);
        buf.extend_from_slice(CACHE_MAGIC);
        for v in [map.channels(), map.height(), map.width(), map.downscale, map.source_size.0, map.source_size.1] {
            buf.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for s in [fingerprint, image] {
            buf.extend_from_slice(&(s.len() as u64).to_le_bytes());
            buf.extend_from_slice(s.as_bytes());
        }
        for v in map.data.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    fn read(path: &Path, fingerprint: &str, image: &str) -> Option<FeatureMap<f32>> {
        let buf = fs::read(path).ok()?;
        if buf.get(..8)? != CACHE_MAGIC {
            return None;
        }
        let mut pos = 8;
        let mut u = || -> Option<usize> {
            let v = u64::from_le_bytes(buf.get(pos..pos + 8)?.try_into().ok()?) as usize;
            pos += 8;
            Some(v)
        };
        let dims: Vec<usize> = (0..6).map(|_| u()).collect::<Option<_>>()?;
        let mut strings = Vec::new();
        for _ in 0..2 {
            let len = u64::from_le_bytes(buf.get(pos..pos + 8)?.try_into().ok()?) as usize;
            pos += 8;
            strings.push(std::str::from_utf8(buf.get(pos..pos + len)?).ok()?.to_string());
            pos += len;
        }
        if strings[0] != fingerprint || strings[1] != image {
            return None;
        }
        let n = dims[0] * dims[1] * dims[2];
        let data: Vec<f32> = buf.get(pos..pos + 4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::from_vec(&dims[..3], data).ok()?;
        FeatureMap::new(t, dims[3], (dims[4], dims[5])).ok()
    }

    pub fn get_or_compute(&self, extractor: &dyn FeatureExtractor, samples: &[ImageSample]) -> Result<Vec<FeatureMap<f32>>> {
        let fp = extractor.fingerprint();
        let hashes: Vec<String> = samples.iter().map(image_hash).collect();
        let mut out: Vec<Option<FeatureMap<f32>>> =
            hashes.iter().map(|h| Self::read(&self.path(&fp, h), &fp, h)).collect();
        let missing: Vec<usize> = (0..samples.len()).filter(|&i| out[i].is_none()).collect();
        for chunk in missing.chunks(32) {
            let imgs: Vec<_> = chunk.iter().map(|&i| &samples[i].image).collect();
            for (&i, map) in chunk.iter().zip(extractor.extract(&imgs)?) {
                Self::write(&self.path(&fp, &hashes[i]), &map, &fp, &hashes[i])?;
                out[i] = Some(map);
            }
        }
        Ok(out.into_iter().map(|m| m.expect("filled")).collect())
    }
}
