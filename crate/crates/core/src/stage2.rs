//! Distillation of hypercolumn correspondences into a compact dense map.
//!
//! The student is an FPN decoder over the frozen stage-1 backbone; during
//! training a per-position projector sits on top. For a source cell of one
//! image the student's temperature softmax over all cells of the other image
//! is pulled toward the teacher's (hypercolumn) softmax by cross-entropy.

use std::path::{Path, PathBuf};

use landmark_tensor::optim::{Sgd, WarmupCosine};
use landmark_tensor::{gemm, Backward, BackwardCtx, BatchNorm, Conv2d, ParamStore, Scalar, Session, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::datasets::{derive_seed, make_two_views, AugmentationConfig, ImageSample};
use crate::encoder::{Backbone, EncoderConfig, EncoderState, FeatureMap, STAGE_DOWNSCALES};
use crate::hypercolumn::{argmax_first, hypercolumn_batch, FeatureExtractor, NormalizedGrid, SimilarityDistribution};
use crate::image::{images_to_batch, Image};
use crate::stage1::{MetricsLog, StepLog};
use crate::{Error, Result};

/// Output grid of the dense map, relative to input pixels.
pub const DENSE_DOWNSCALE: usize = 4;
pub const DENSE_KIND: &str = "dense";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenseConfig {
    pub output_dim: usize,
    pub fpn_channels: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub seed: u64,
}

impl Default for DenseConfig {
    fn default() -> Self {
        Self { output_dim: 64, fpn_channels: 64, proj_hidden: 128, proj_dim: 128, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    /// Two augmented views of the same image.
    TwoViews,
    /// One view each of neighbouring images in the batch.
    CrossImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub tau: f64,
    /// Teacher temperature; `None` uses `tau`.
    pub teacher_tau: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub pairing: Pairing,
    pub normalize: bool,
    pub sum_reduction: bool,
    pub both_directions: bool,
    pub seed: u64,
    pub augmentation: AugmentationConfig,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            tau: 0.05,
            teacher_tau: None,
            epochs: 20,
            batch_size: 16,
            base_lr: 3e-2,
            warmup_epochs: 1,
            momentum: 0.9,
            weight_decay: 1e-4,
            pairing: Pairing::TwoViews,
            normalize: true,
            sum_reduction: false,
            both_directions: true,
            seed: 0,
            // milder crops than stage 1: both views must share most of the face
            augmentation: AugmentationConfig { crop_scale_range: (0.5, 1.0), ..Default::default() },
        }
    }
}

impl Stage2Config {
    /// Epoch count of a named schedule: `main` (20) or `short` (10).
    pub fn epochs_preset(name: &str) -> Result<usize> {
        match name {
            "main" => Ok(20),
            "short" => Ok(10),
            other => Err(Error::Config(format!("unknown stage2 epoch preset {other:?} (main|short)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || self.teacher_tau.is_some_and(|t| !(t > 0.0)) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("stage2 epochs and batch_size must be positive".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.pairing == Pairing::CrossImage && self.batch_size < 2 {
            return Err(Error::Config("cross-image pairing needs batch_size >= 2".into()));
        }
        self.augmentation.validate()
    }

    pub fn options(&self) -> DistillOptions {
        DistillOptions {
            tau: self.tau,
            teacher_tau: self.teacher_tau.unwrap_or(self.tau),
            normalize: self.normalize,
            sum_reduction: self.sum_reduction,
            both_directions: self.both_directions,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillOptions {
    pub tau: f64,
    pub teacher_tau: f64,
    pub normalize: bool,
    pub sum_reduction: bool,
    pub both_directions: bool,
}

impl Default for DistillOptions {
    fn default() -> Self {
        Stage2Config::default().options()
    }
}

/// Temperature softmax of cosine similarities of one source cell `uv = (x, y)` of `fi`
/// over every cell of `fj`.
pub fn similarity_distribution<T: Scalar>(
    fi: &FeatureMap<T>,
    uv: (usize, usize),
    fj: &FeatureMap<T>,
    tau: f64,
    normalize: bool,
) -> Result<SimilarityDistribution> {
    if fi.channels() != fj.channels() {
        return Err(Error::Invalid(format!("channel counts differ: {} vs {}", fi.channels(), fj.channels())));
    }
    if uv.0 >= fi.width() || uv.1 >= fi.height() {
        return Err(Error::Invalid(format!("source cell {uv:?} outside the grid")));
    }
    let src = fi.column(uv.1, uv.0);
    let mut src: Vec<f64> = src.iter().map(|v| v.as_f64()).collect();
    let ns = src.iter().map(|v| v * v).sum::<f64>().sqrt();
    if normalize {
        if ns == 0.0 {
            return Err(Error::Degenerate(format!("zero-norm source feature at {uv:?}")));
        }
        src.iter_mut().for_each(|v| *v /= ns);
    }
    let mut logits = Vec::with_capacity(fj.cells());
    for y in 0..fj.height() {
        for x in 0..fj.width() {
            let col = fj.column(y, x);
            let dot: f64 = col.iter().zip(&src).map(|(a, b)| a.as_f64() * b).sum();
            let n = if normalize { col.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt() } else { 1.0 };
            if n == 0.0 {
                return Err(Error::Degenerate(format!("zero-norm target feature at ({x}, {y})")));
            }
            logits.push(dot / n);
        }
    }
    SimilarityDistribution::from_logits(&logits, fj.height(), fj.width(), uv, tau)
}

/// `-sum p log q`.
pub fn cross_entropy(p: &SimilarityDistribution, q: &SimilarityDistribution) -> f64 {
    p.mass.iter().zip(&q.mass).filter(|(&a, _)| a > 0.0).map(|(&a, &b)| -a * b.ln()).sum()
}

/// Per-pair `[C, P]` matrix of a `[C, N, h, w]` tensor.
fn pair_matrix<T: Scalar>(x: &Tensor<T>, n: usize) -> Vec<T> {
    let (c, nb, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let plane = h * w;
    let mut out = Vec::with_capacity(c * plane);
    for ch in 0..c {
        let off = (ch * nb + n) * plane;
        out.extend_from_slice(&x.data()[off..off + plane]);
    }
    out
}

/// Unit-normalize the columns of a `[C, P]` matrix in place; returns the norms.
fn normalize_columns<T: Scalar>(m: &mut [T], c: usize, p: usize, what: &str, pair: usize) -> Result<Vec<T>> {
    let mut norms = vec![T::zero(); p];
    for ch in 0..c {
        for (j, n) in norms.iter_mut().enumerate() {
            *n += m[ch * p + j] * m[ch * p + j];
        }
    }
    for (j, n) in norms.iter_mut().enumerate() {
        *n = n.sqrt();
        if *n == T::zero() {
            return Err(Error::Degenerate(format!("zero-norm {what} feature in pair {pair} at cell {j}")));
        }
    }
    for ch in 0..c {
        for j in 0..p {
            m[ch * p + j] /= norms[j];
        }
    }
    Ok(norms)
}

/// Row softmax of `rows x cols` logits scaled by `1 / tau`, in place.
fn softmax_rows<T: Scalar>(s: &mut [T], rows: usize, cols: usize, inv_tau: T) {
    for r in 0..rows {
        let row = &mut s[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = ((*v - max) * inv_tau).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
}

fn similarity<T: Scalar>(a: &[T], b: &[T], c: usize, pa: usize, pb: usize) -> Vec<T> {
    let mut s = vec![T::zero(); pa * pb];
    gemm(pa, c, pb, a, true, b, false, &mut s, false);
    s
}

struct PairCache<T> {
    xi: Vec<T>,
    xj: Vec<T>,
    ni: Option<Vec<T>>,
    nj: Option<Vec<T>>,
    /// Scaled `(Q - P)` per direction: `(i -> j)` then optionally `(j -> i)`.
    g: Vec<Vec<T>>,
}

struct DistillForward<T> {
    loss: f64,
    entropy: f64,
    pairs: Vec<PairCache<T>>,
    dims: (usize, usize, usize, usize),
}

/// Shared forward of the distillation loss; also returns the teacher
/// entropy under the same weighting.
fn distill_forward<T: Scalar>(
    si: &Tensor<T>,
    sj: &Tensor<T>,
    hi: &Tensor<T>,
    hj: &Tensor<T>,
    opts: &DistillOptions,
    keep: bool,
) -> Result<DistillForward<T>> {
    let (c, n, h, w) = si.dims4()?;
    if sj.shape() != si.shape() {
        return Err(Error::Invalid(format!("student maps {:?} and {:?} differ", si.shape(), sj.shape())));
    }
    let (ct, nt, ht, wt) = hi.dims4()?;
    if hj.shape() != hi.shape() || (nt, ht, wt) != (n, h, w) {
        return Err(Error::Invalid(format!(
            "teacher maps {:?}/{:?} do not align with student grid {:?}",
            hi.shape(),
            hj.shape(),
            si.shape()
        )));
    }
    if !(opts.tau > 0.0 && opts.teacher_tau > 0.0) {
        return Err(Error::Invalid("temperatures must be positive".into()));
    }
    let p = h * w;
    let dirs = if opts.both_directions { 2 } else { 1 };
    let terms = (n * dirs) as f64;
    let weight = if opts.sum_reduction { 1.0 / terms } else { 1.0 / (terms * p as f64) };
    let inv_tau = T::of(1.0 / opts.tau);
    let inv_tt = T::of(1.0 / opts.teacher_tau);
    let mut out = DistillForward { loss: 0.0, entropy: 0.0, pairs: Vec::new(), dims: (c, n, h, w) };
    for pair in 0..n {
        let mut xi = pair_matrix(si, pair);
        let mut xj = pair_matrix(sj, pair);
        let (ni, nj) = if opts.normalize {
            (
                Some(normalize_columns(&mut xi, c, p, "student", pair)?),
                Some(normalize_columns(&mut xj, c, p, "student", pair)?),
            )
        } else {
            (None, None)
        };
        let mut ti = pair_matrix(hi, pair);
        let mut tj = pair_matrix(hj, pair);
        if opts.normalize {
            normalize_columns(&mut ti, ct, p, "teacher", pair)?;
            normalize_columns(&mut tj, ct, p, "teacher", pair)?;
        }
        let mut gs = Vec::with_capacity(dirs);
        for dir in 0..dirs {
            let (a, b, ta, tb) = if dir == 0 { (&xi, &xj, &ti, &tj) } else { (&xj, &xi, &tj, &ti) };
            let mut q = similarity(a, b, c, p, p);
            softmax_rows(&mut q, p, p, inv_tau);
            let mut pt = similarity(ta, tb, ct, p, p);
            softmax_rows(&mut pt, p, p, inv_tt);
            for u in 0..p {
                let mut ce = 0.0;
                let mut ent = 0.0;
                for k in 0..p {
                    let pk = pt[u * p + k].as_f64();
                    if pk > 0.0 {
                        ce -= pk * q[u * p + k].as_f64().ln();
                        ent -= pk * pk.ln();
                    }
                }
                if !ce.is_finite() {
                    return Err(Error::NonFinite {
                        what: "distillation cross-entropy".into(),
                        location: format!("pair {pair}, source cell (u, v) = ({}, {})", u % w, u / w),
                    });
                }
                out.loss += weight * ce;
                out.entropy += weight * ent;
            }
            if keep {
                let scale = T::of(weight / opts.tau);
                let g: Vec<T> = q.iter().zip(&pt).map(|(&qv, &pv)| (qv - pv) * scale).collect();
                gs.push(g);
            }
        }
        if keep {
            out.pairs.push(PairCache { xi, xj, ni, nj, g: gs });
        }
    }
    Ok(out)
}

struct DistillRule<T> {
    pairs: Vec<PairCache<T>>,
    dims: (usize, usize, usize, usize),
}

/// Backward through `x_hat = x / |x|` for the columns of a `[C, P]` matrix.
fn unnormalize_grad<T: Scalar>(dxh: &mut [T], xh: &[T], norms: &[T], c: usize, p: usize) {
    for j in 0..p {
        let mut dot = T::zero();
        for ch in 0..c {
            dot += dxh[ch * p + j] * xh[ch * p + j];
        }
        for ch in 0..c {
            let i = ch * p + j;
            dxh[i] = (dxh[i] - xh[i] * dot) / norms[j];
        }
    }
}

impl<T: Scalar> Backward<T> for DistillRule<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let (c, n, h, w) = self.dims;
        let p = h * w;
        let up = ctx.grad.item();
        let mut di = Tensor::zeros(&[c, n, h, w]);
        let mut dj = Tensor::zeros(&[c, n, h, w]);
        for (pair, cache) in self.pairs.iter().enumerate() {
            let mut gi = vec![T::zero(); c * p];
            let mut gj = vec![T::zero(); c * p];
            for (dir, g) in cache.g.iter().enumerate() {
                // S = A^T B: dA = B G^T, dB = A G
                let (a, b, ga, gb) = if dir == 0 {
                    (&cache.xi, &cache.xj, &mut gi, &mut gj)
                } else {
                    (&cache.xj, &cache.xi, &mut gj, &mut gi)
                };
                gemm(c, p, p, b, false, g, true, ga, true);
                gemm(c, p, p, a, false, g, false, gb, true);
            }
            if let (Some(ni), Some(nj)) = (&cache.ni, &cache.nj) {
                unnormalize_grad(&mut gi, &cache.xi, ni, c, p);
                unnormalize_grad(&mut gj, &cache.xj, nj, c, p);
            }
            for ch in 0..c {
                let off = (ch * n + pair) * p;
                for k in 0..p {
                    di.data_mut()[off + k] = up * gi[ch * p + k];
                    dj.data_mut()[off + k] = up * gj[ch * p + k];
                }
            }
        }
        // teacher inputs never receive a gradient
        vec![ctx.needs[0].then_some(di), ctx.needs[1].then_some(dj), None, None]
    }
}

/// Distillation loss between student maps `si`, `sj` and teacher maps
/// `hi`, `hj`, all `[C, N, h, w]` with pair `n` formed by batch index.
pub fn distill_loss_var<T: Scalar>(
    tape: &mut Tape<T>,
    si: Var,
    sj: Var,
    hi: Var,
    hj: Var,
    opts: &DistillOptions,
) -> Result<Var> {
    let fwd = distill_forward(tape.value(si), tape.value(sj), tape.value(hi), tape.value(hj), opts, true)?;
    let value = Tensor::scalar(T::of(fwd.loss));
    Ok(tape.apply(&[si, sj, hi, hj], value, DistillRule { pairs: fwd.pairs, dims: fwd.dims }))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillStats {
    pub cross_entropy: f64,
    pub teacher_entropy: f64,
}

impl DistillStats {
    pub fn kl(&self) -> f64 {
        self.cross_entropy - self.teacher_entropy
    }
}

/// Tape-free loss value and teacher entropy.
pub fn distill_stats<T: Scalar>(
    si: &Tensor<T>,
    sj: &Tensor<T>,
    hi: &Tensor<T>,
    hj: &Tensor<T>,
    opts: &DistillOptions,
) -> Result<DistillStats> {
    let f = distill_forward(si, sj, hi, hj, opts, false)?;
    Ok(DistillStats { cross_entropy: f.loss, teacher_entropy: f.entropy })
}

#[derive(Clone, Debug)]
struct Fpn {
    laterals: Vec<Conv2d>,
    output: Conv2d,
}

#[derive(Clone, Debug)]
struct PixelProjector {
    conv1: Conv2d,
    bn: BatchNorm,
    conv2: Conv2d,
}

/// Frozen backbone plus trainable FPN decoder and projector.
#[derive(Clone, Debug)]
pub struct DenseModelState<T: Scalar> {
    pub encoder_config: EncoderConfig,
    pub config: DenseConfig,
    pub encoder: ParamStore<T>,
    pub backbone: Backbone,
    pub decoder: ParamStore<T>,
    fpn: Fpn,
    projector: PixelProjector,
    pub step: u64,
    pub stage1_hash: Option<String>,
    pub fingerprint: String,
}

impl<T: Scalar> DenseModelState<T> {
    /// Decoder freshly initialized from `config.seed`; backbone copied from
    /// the encoder's online branch.
    pub fn new(encoder: &EncoderState<T>, config: &DenseConfig) -> Result<Self> {
        if config.output_dim == 0 || config.fpn_channels == 0 || config.proj_hidden == 0 || config.proj_dim == 0 {
            return Err(Error::Config("dense widths must be positive".into()));
        }
        let n_backbone = encoder
            .online
            .entries()
            .iter()
            .position(|e| !e.name.starts_with("backbone."))
            .unwrap_or(encoder.online.len());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0xD0, 0));
        let mut decoder = ParamStore::new();
        let f = config.fpn_channels;
        let laterals = encoder
            .config
            .backbone
            .stage_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::new(&mut decoder, &format!("fpn.lateral{}", i + 1), c, f, 1, 1, 0, true, &mut rng))
            .collect();
        let output = Conv2d::new(&mut decoder, "fpn.output", f, config.output_dim, 3, 1, 1, true, &mut rng);
        let projector = PixelProjector {
            conv1: Conv2d::new(&mut decoder, "projector.conv1", config.output_dim, config.proj_hidden, 1, 1, 0, false, &mut rng),
            bn: BatchNorm::new(&mut decoder, "projector.bn", config.proj_hidden),
            conv2: Conv2d::new(&mut decoder, "projector.conv2", config.proj_hidden, config.proj_dim, 1, 1, 0, true, &mut rng),
        };
        Ok(Self {
            encoder_config: encoder.config.clone(),
            config: config.clone(),
            encoder: encoder.online.prefix(n_backbone),
            backbone: encoder.backbone.clone(),
            decoder,
            fpn: Fpn { laterals, output },
            projector,
            step: 0,
            stage1_hash: None,
            fingerprint: format!(
                "dense-untrained-{}-{}",
                config.seed,
                &crate::checkpoint::store_digest(&encoder.online)[..16]
            ),
        })
    }

    /// Inference-mode stage tensors of the frozen backbone.
    pub fn backbone_stages(&self, x: Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut s = Session::new(false);
        s.freeze(&self.encoder);
        let v = s.input(x);
        let outs = self.backbone.forward(&mut s, &self.encoder, v)?;
        Ok(outs.into_iter().map(|o| s.value(o).clone()).collect())
    }

    /// Top-down fusion of stage vars into the `[C, N, H/4, W/4]` dense map.
    pub fn decode(&self, s: &mut Session<T>, stages: &[Var]) -> Result<Var> {
        let mut top: Option<Var> = None;
        for i in (0..4).rev() {
            let lat = self.fpn.laterals[i].forward(s, &self.decoder, stages[i])?;
            top = Some(match top {
                None => lat,
                Some(t) => {
                    let shape = s.value(lat).shape().to_vec();
                    let up = s.tape.resize_bilinear(t, shape[2], shape[3])?;
                    s.tape.add(lat, up)?
                }
            });
        }
        let h = s.tape.relu(top.expect("four stages"));
        Ok(self.fpn.output.forward(s, &self.decoder, h)?)
    }

    pub fn project(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let h = self.projector.conv1.forward(s, &self.decoder, x)?;
        let h = self.projector.bn.forward(s, &self.decoder, h)?;
        let h = s.tape.relu(h);
        Ok(self.projector.conv2.forward(s, &self.decoder, h)?)
    }

    fn stage_inputs(&self, s: &mut Session<T>, stages: &[Tensor<T>]) -> Vec<Var> {
        stages.iter().map(|t| s.input(t.clone())).collect()
    }

    /// Inference-mode dense maps (projector not applied).
    pub fn dense_forward(&self, images: &[&Image], batch: usize) -> Result<Vec<FeatureMap<T>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(batch.max(1)) {
            let x = images_to_batch(chunk, &self.encoder_config.normalization)?;
            let stages = self.backbone_stages(x)?;
            let mut s = Session::new(false);
            s.freeze(&self.decoder);
            let vars = self.stage_inputs(&mut s, &stages);
            let d = self.decode(&mut s, &vars)?;
            let source = (chunk[0].height(), chunk[0].width());
            out.extend(FeatureMap::split_batch(s.value(d), DENSE_DOWNSCALE, source)?);
        }
        Ok(out)
    }

    /// Inference-mode projector outputs, `[P, N, h, w]`.
    pub fn projected(&self, stages: &[Tensor<T>]) -> Result<Tensor<T>> {
        let mut s = Session::new(false);
        s.freeze(&self.decoder);
        let vars = self.stage_inputs(&mut s, stages);
        let d = self.decode(&mut s, &vars)?;
        let p = self.project(&mut s, d)?;
        Ok(s.value(p).clone())
    }

    /// Teacher hypercolumns at the dense grid from stage tensors.
    pub fn teacher(&self, stages: &[Tensor<T>]) -> Result<Tensor<T>> {
        let (h, w) = (stages[0].dim(2), stages[0].dim(3));
        let refs: Vec<&Tensor<T>> = stages.iter().collect();
        hypercolumn_batch(&refs, h, w)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint<T>> {
        let config = serde_json::json!({ "encoder": self.encoder_config, "dense": self.config });
        let mut c = Checkpoint::new(DENSE_KIND, &config, self.step)?;
        if let Some(h) = &self.stage1_hash {
            c.extra.insert("stage1_sha256".into(), h.clone().into());
        }
        c.push_store("encoder/", &self.encoder);
        c.push_store("decoder/", &self.decoder);
        Ok(c)
    }

    pub fn save_checkpoint(&mut self, path: &Path) -> Result<String> {
        let hash = self.to_checkpoint()?.save(path)?;
        self.fingerprint = hash.clone();
        Ok(hash)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let c = Checkpoint::<T>::load(path)?;
        c.expect_kind(DENSE_KIND, path)?;
        #[derive(Deserialize)]
        struct Both {
            encoder: EncoderConfig,
            dense: DenseConfig,
        }
        let both: Both = c.config_as(path)?;
        let enc = EncoderState::new(&both.encoder)?;
        let mut model = Self::new(&enc, &both.dense)?;
        c.restore_store("encoder/", &mut model.encoder, path)?;
        c.restore_store("decoder/", &mut model.decoder, path)?;
        model.step = c.step;
        model.stage1_hash = c.extra.get("stage1_sha256").and_then(|v| v.as_str()).map(String::from);
        model.fingerprint = crate::checkpoint::file_sha256(path)?;
        Ok(model)
    }
}

impl FeatureExtractor for DenseModelState<f32> {
    fn extract(&self, images: &[&Image]) -> Result<Vec<FeatureMap<f32>>> {
        self.dense_forward(images, 32)
    }

    fn downscale(&self) -> usize {
        DENSE_DOWNSCALE
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }
}

/// Image lists `(A, B)` whose n-th entries form the n-th training pair.
pub fn make_pairs(
    data: &[ImageSample],
    batch: &[usize],
    cfg: &Stage2Config,
    epoch: usize,
) -> Result<(Vec<Image>, Vec<Image>)> {
    let mut a = Vec::with_capacity(batch.len());
    let mut b = Vec::with_capacity(batch.len());
    for &i in batch {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x5200 + epoch as u64, i as u64));
        let pair = make_two_views(&data[i], &cfg.augmentation, &mut rng)?;
        a.push(pair.query_view.image);
        b.push(pair.key_view.image);
    }
    if cfg.pairing == Pairing::CrossImage {
        b = (0..a.len()).map(|k| a[(k + 1) % a.len()].clone()).collect();
    }
    Ok((a, b))
}

#[derive(Clone, Debug, Default)]
pub struct Stage2Report {
    pub steps: Vec<StepLog>,
    pub epoch_means: Vec<f64>,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_hash: Option<String>,
}

/// Train decoder and projector; the backbone stays bitwise unchanged.
pub fn train_stage2(
    data: &[ImageSample],
    model: &mut DenseModelState<f32>,
    cfg: &Stage2Config,
    out_dir: Option<&Path>,
) -> Result<Stage2Report> {
    cfg.validate()?;
    if data.len() < 2 && cfg.pairing == Pairing::CrossImage {
        return Err(Error::Invalid("cross-image pairing needs at least two images".into()));
    }
    if data.is_empty() {
        return Err(Error::Invalid("stage 2 needs at least one image".into()));
    }
    let opts = cfg.options();
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let schedule = WarmupCosine {
        base_lr: cfg.base_lr,
        warmup_steps: cfg.warmup_epochs * steps_per_epoch,
        total_steps: cfg.epochs * steps_per_epoch,
    };
    let mut sgd = Sgd::<f32>::new(cfg.momentum, cfg.weight_decay);
    let mut log = MetricsLog::create(out_dir, "step,epoch,lr,loss")?;
    let mut report = Stage2Report::default();
    let norm = model.encoder_config.normalization;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x52, epoch as u64)));
        let (mut total, mut count) = (0.0, 0);
        for batch in order.chunks(cfg.batch_size) {
            if cfg.pairing == Pairing::CrossImage && batch.len() < 2 {
                continue;
            }
            let step = model.step;
            let lr = schedule.lr(step as usize);
            let (a, b) = make_pairs(data, batch, cfg, epoch)?;
            let ar: Vec<&Image> = a.iter().collect();
            let br: Vec<&Image> = b.iter().collect();
            let sa = model.backbone_stages(images_to_batch(&ar, &norm)?)?;
            let sb = model.backbone_stages(images_to_batch(&br, &norm)?)?;
            let ha = model.teacher(&sa)?;
            let hb = model.teacher(&sb)?;

            let mut s = Session::new(true);
            let va = model.stage_inputs(&mut s, &sa);
            let vb = model.stage_inputs(&mut s, &sb);
            let da = model.decode(&mut s, &va)?;
            let pa = model.project(&mut s, da)?;
            let db = model.decode(&mut s, &vb)?;
            let pb = model.project(&mut s, db)?;
            let ta = s.input(ha);
            let tb = s.input(hb);
            let loss = distill_loss_var(&mut s.tape, pa, pb, ta, tb, &opts)?;
            let value = s.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite { what: "stage-2 loss".into(), location: format!("step {step} (lr {lr})") });
            }
            let grads = s.backward(loss)?;
            let pg = s.param_grads(&model.decoder, &grads);
            if !pg.all_finite() {
                return Err(Error::NonFinite { what: "stage-2 gradient".into(), location: format!("step {step} (lr {lr})") });
            }
            sgd.step(&mut model.decoder, &pg, lr as f32)?;
            model.decoder.apply_bn_updates(s.bn_updates());
            model.step += 1;
            log.row(format!("{step},{epoch},{lr},{value}"));
            report.steps.push(StepLog { step, epoch, lr, loss: value });
            total += value;
            count += 1;
        }
        log.flush()?;
        let mean = total / count.max(1) as f64;
        report.epoch_means.push(mean);
        log::info!("stage2 epoch {epoch}: mean loss {mean:.4}");
    }
    if let Some(dir) = out_dir {
        let path = dir.join("dense.ckpt");
        report.checkpoint_hash = Some(model.save_checkpoint(&path)?);
        report.checkpoint = Some(path);
    } else {
        let digest = crate::checkpoint::store_digest;
        model.fingerprint = format!("dense-{}-{}", &digest(&model.encoder)[..16], digest(&model.decoder));
    }
    Ok(report)
}

/// Mean `KL(p || q)` of the inference-mode projector against the teacher
/// over image pairs.
pub fn heldout_kl(model: &DenseModelState<f32>, a: &[Image], b: &[Image], opts: &DistillOptions) -> Result<f64> {
    let norm = model.encoder_config.normalization;
    let mut total = 0.0;
    let mut n = 0;
    for (ca, cb) in a.chunks(16).zip(b.chunks(16)) {
        let ar: Vec<&Image> = ca.iter().collect();
        let br: Vec<&Image> = cb.iter().collect();
        let sa = model.backbone_stages(images_to_batch(&ar, &norm)?)?;
        let sb = model.backbone_stages(images_to_batch(&br, &norm)?)?;
        let stats = distill_stats(&model.projected(&sa)?, &model.projected(&sb)?, &model.teacher(&sa)?, &model.teacher(&sb)?, opts)?;
        total += stats.kl() * ca.len() as f64;
        n += ca.len();
    }
    Ok(total / n.max(1) as f64)
}

/// Fraction of source cells of `si` whose student argmax in `sj` lies
/// within one cell (Chebyshev) of the teacher argmax.
pub fn correspondence_agreement<T: Scalar>(
    si: &FeatureMap<T>,
    sj: &FeatureMap<T>,
    ti: &FeatureMap<T>,
    tj: &FeatureMap<T>,
) -> Result<f64> {
    let (gsi, gsj, gti, gtj) = (NormalizedGrid::new(si), NormalizedGrid::new(sj), NormalizedGrid::new(ti), NormalizedGrid::new(tj));
    if (gsi.width, gsi.height) != (gti.width, gti.height) || (gsj.width, gsj.height) != (gtj.width, gtj.height) {
        return Err(Error::Invalid("student and teacher grids differ".into()));
    }
    let w = gsj.width;
    let mut agree = 0;
    for y in 0..gsi.height {
        for x in 0..gsi.width {
            let s = argmax_first(&gsj.cosines(gsi.cell(x, y)));
            let t = argmax_first(&gtj.cosines(gti.cell(x, y)));
            let dx = (s % w).abs_diff(t % w);
            let dy = (s / w).abs_diff(t / w);
            if dx.max(dy) <= 1 {
                agree += 1;
            }
        }
    }
    Ok(agree as f64 / (gsi.height * gsi.width) as f64)
}

/// Mean agreement of a model's dense maps with its teacher over image pairs.
pub fn mean_agreement(model: &DenseModelState<f32>, a: &[Image], b: &[Image]) -> Result<f64> {
    let norm = model.encoder_config.normalization;
    let mut total = 0.0;
    for (ia, ib) in a.iter().zip(b) {
        let sa = model.backbone_stages(images_to_batch(&[ia], &norm)?)?;
        let sb = model.backbone_stages(images_to_batch(&[ib], &norm)?)?;
        let src = (ia.height(), ia.width());
        let maps = |t: &Tensor<f32>| FeatureMap::split_batch(t, DENSE_DOWNSCALE, src).map(|mut v| v.remove(0));
        let dense = model.dense_forward(&[ia, ib], 2)?;
        let ta = maps(&model.teacher(&sa)?)?;
        let tb = maps(&model.teacher(&sb)?)?;
        total += correspondence_agreement(&dense[0], &dense[1], &ta, &tb)?;
    }
    Ok(total / a.len().max(1) as f64)
}

/// Stage downscales must put the finest backbone stage on the dense grid.
const _: () = assert!(STAGE_DOWNSCALES[0] == DENSE_DOWNSCALE);

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(c: usize, h: usize, w: usize, f: impl Fn(usize) -> f64) -> FeatureMap<f64> {
        FeatureMap::new(Tensor::from_fn(&[c, h, w], f), 4, (4 * h, 4 * w)).unwrap()
    }

    #[test]
    fn identical_targets_give_uniform() {
        let fi = fm(2, 2, 2, |i| i as f64 + 1.0);
        let fj = fm(2, 3, 3, |i| if i < 9 { 1.0 } else { 2.0 });
        let d = similarity_distribution(&fi, (1, 1), &fj, 0.05, true).unwrap();
        assert!(d.mass.iter().all(|&m| (m - 1.0 / 9.0).abs() < 1e-15));
    }

    #[test]
    fn sharp_temperature_concentrates() {
        let fi = fm(1, 1, 1, |_| 1.0);
        let fj = fm(1, 1, 2, |i| [1.0, -1.0][i]);
        let d = similarity_distribution(&fi, (0, 0), &fj, 0.05, true).unwrap();
        let e = (-40f64).exp();
        assert!((d.mass[1] - e / (1.0 + e)).abs() < 1e-30);
        let d = similarity_distribution(&fi, (0, 0), &fj, 1e4, true).unwrap();
        assert!((d.mass[0] - 0.5).abs() < 1e-3);
    }

    #[test]
    fn zero_norm_is_an_error() {
        let fi = fm(2, 1, 1, |_| 0.0);
        let fj = fm(2, 1, 2, |i| i as f64);
        assert!(matches!(similarity_distribution(&fi, (0, 0), &fj, 0.05, true), Err(Error::Degenerate(_))));
    }

    #[test]
    fn uniform_student_costs_ln2() {
        let p = SimilarityDistribution { mass: vec![0.7311, 0.2689], height: 1, width: 2, source_uv: (0, 0), temperature: 1.0 };
        let q = SimilarityDistribution { mass: vec![0.5, 0.5], ..p.clone() };
        assert!((cross_entropy(&p, &q) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn student_equal_teacher_gives_entropy() {
        let t = Tensor::<f64>::from_fn(&[3, 2, 2, 2], |i| ((i * 7 % 5) as f64 - 1.5) * 0.3 + 0.05);
        let u = Tensor::<f64>::from_fn(&[3, 2, 2, 2], |i| ((i * 3 % 7) as f64 - 2.5) * 0.2 + 0.01);
        let opts = DistillOptions::default();
        let s = distill_stats(&t, &u, &t, &u, &opts).unwrap();
        assert!((s.cross_entropy - s.teacher_entropy).abs() < 1e-12);
    }

    #[test]
    fn presets() {
        assert_eq!(Stage2Config::epochs_preset("main").unwrap(), 20);
        assert_eq!(Stage2Config::epochs_preset("short").unwrap(), 10);
        assert!(Stage2Config::epochs_preset("long").is_err());
    }
}
