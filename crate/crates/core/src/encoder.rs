//! Multi-scale residual backbone, projection/prediction heads and the
//! online/target pair trained in stage 1.

use std::path::Path;

use landmark_tensor::{BatchNorm, Conv2d, Linear, ParamStore, Scalar, Session, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::image::{images_to_batch, Image, Normalization};
use crate::{Error, Result};

pub const STAGE_DOWNSCALES: [usize; 4] = [4, 8, 16, 32];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub stage_channels: Vec<usize>,
    pub stem_channels: usize,
    pub blocks_per_stage: usize,
    pub input_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { stage_channels: vec![16, 32, 64, 128], stem_channels: 16, blocks_per_stage: 1, input_size: 64 }
    }
}

impl BackboneConfig {
    /// Stage widths of a ResNet50, for hypercolumn-size parity checks.
    pub const RESNET50_CHANNELS: [usize; 4] = [256, 512, 1024, 2048];

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != 4 || self.stage_channels.contains(&0) {
            return Err(Error::Config(format!("stage_channels must be four positive widths, got {:?}", self.stage_channels)));
        }
        if self.stem_channels == 0 || self.blocks_per_stage == 0 {
            return Err(Error::Config("stem_channels and blocks_per_stage must be positive".into()));
        }
        check_input_side(self.input_size)
    }

    /// `(channels, side)` of every stage for a square input.
    pub fn stage_shapes(&self, input: usize) -> Result<Vec<(usize, usize)>> {
        check_input_side(input)?;
        Ok(self.stage_channels.iter().zip(STAGE_DOWNSCALES).map(|(&c, r)| (c, input / r)).collect())
    }

    pub fn hypercolumn_channels(&self) -> usize {
        self.stage_channels.iter().sum()
    }
}

fn check_input_side(side: usize) -> Result<()> {
    if side < 32 || side % 32 != 0 {
        return Err(Error::Invalid(format!("input side {side} must be a positive multiple of 32")));
    }
    Ok(())
}

/// `C` feature channels on an `h x w` grid, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub data: Tensor<T>,
    pub downscale: usize,
    pub source_size: (usize, usize),
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(data: Tensor<T>, downscale: usize, source_size: (usize, usize)) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::Invalid(format!("feature map must be [C, h, w], got {:?}", data.shape())));
        }
        Ok(Self { data, downscale, source_size })
    }

    pub fn channels(&self) -> usize {
        self.data.dim(0)
    }

    pub fn height(&self) -> usize {
        self.data.dim(1)
    }

    pub fn width(&self) -> usize {
        self.data.dim(2)
    }

    pub fn cells(&self) -> usize {
        self.height() * self.width()
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data.data()[(c * self.height() + y) * self.width() + x]
    }

    /// The feature vector of one cell.
    pub fn column(&self, y: usize, x: usize) -> Vec<T> {
        (0..self.channels()).map(|c| self.at(c, y, x)).collect()
    }

    /// Split a `[C, N, h, w]` batch into per-image maps.
    pub fn split_batch(batch: &Tensor<T>, downscale: usize, source_size: (usize, usize)) -> Result<Vec<Self>> {
        let (c, n, h, w) = batch.dims4()?;
        let plane = h * w;
        (0..n)
            .map(|i| {
                let mut data = Vec::with_capacity(c * plane);
                for ch in 0..c {
                    let off = (ch * n + i) * plane;
                    data.extend_from_slice(&batch.data()[off..off + plane]);
                }
                Self::new(Tensor::from_vec(&[c, h, w], data)?, downscale, source_size)
            })
            .collect()
    }

    /// Stack same-shaped maps into `[C, N, h, w]`.
    pub fn stack(maps: &[&Self]) -> Result<Tensor<T>> {
        let first = maps.first().ok_or_else(|| Error::Invalid("no feature maps to stack".into()))?;
        let (c, h, w) = (first.channels(), first.height(), first.width());
        let n = maps.len();
        let plane = h * w;
        let mut data = vec![T::zero(); c * n * plane];
        for (i, m) in maps.iter().enumerate() {
            if m.data.shape() != first.data.shape() {
                return Err(Error::Invalid(format!("cannot stack {:?} with {:?}", m.data.shape(), first.data.shape())));
            }
            for ch in 0..c {
                data[(ch * n + i) * plane..(ch * n + i + 1) * plane]
                    .copy_from_slice(&m.data.data()[ch * plane..(ch + 1) * plane]);
            }
        }
        Ok(Tensor::from_vec(&[c, n, h, w], data)?)
    }
}

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    shortcut: Option<(Conv2d, BatchNorm)>,
}

impl BasicBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let shortcut = (stride != 1 || c_in != c_out).then(|| {
            (
                Conv2d::new(store, &format!("{name}.down"), c_in, c_out, 1, stride, 0, false, rng),
                BatchNorm::new(store, &format!("{name}.down_bn"), c_out),
            )
        });
        Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), c_in, c_out, 3, stride, 1, false, rng),
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), c_out),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1, false, rng),
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), c_out),
            shortcut,
        }
    }

    fn forward<T: Scalar>(&self, s: &mut Session<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(s, store, x)?;
        let h = self.bn1.forward(s, store, h)?;
        let h = s.tape.relu(h);
        let h = self.conv2.forward(s, store, h)?;
        let h = self.bn2.forward(s, store, h)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let d = conv.forward(s, store, x)?;
                bn.forward(s, store, d)?
            }
            None => x,
        };
        let y = s.tape.add(h, skip)?;
        Ok(s.tape.relu(y))
    }
}

/// Stride-2 stem followed by four residual stages, each halving resolution.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    stem: Conv2d,
    stem_bn: BatchNorm,
    stages: Vec<Vec<BasicBlock>>,
}

impl Backbone {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let stem = Conv2d::new(store, "backbone.stem", 3, config.stem_channels, 3, 2, 1, false, rng);
        let stem_bn = BatchNorm::new(store, "backbone.stem_bn", config.stem_channels);
        let mut c_in = config.stem_channels;
        let mut stages = Vec::new();
        for (si, &c) in config.stage_channels.iter().enumerate() {
            let blocks = (0..config.blocks_per_stage)
                .map(|b| {
                    let stride = if b == 0 { 2 } else { 1 };
                    let blk = BasicBlock::new(store, &format!("backbone.s{}.b{b}", si + 1), c_in, c, stride, rng);
                    c_in = c;
                    blk
                })
                .collect();
            stages.push(blocks);
        }
        Ok(Self { config: config.clone(), stem, stem_bn, stages })
    }

    /// Stage outputs at downscales 4, 8, 16 and 32, each `[C_s, N, h, w]`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, store: &ParamStore<T>, x: Var) -> Result<Vec<Var>> {
        let shape = s.value(x).shape().to_vec();
        if shape.len() != 4 || shape[0] != 3 {
            return Err(Error::Invalid(format!("backbone input must be [3, N, H, W], got {shape:?}")));
        }
        if shape[2] != shape[3] {
            return Err(Error::Invalid(format!("backbone input must be square, got {}x{}", shape[3], shape[2])));
        }
        check_input_side(shape[2])?;
        let h = self.stem.forward(s, store, x)?;
        let h = self.stem_bn.forward(s, store, h)?;
        let mut h = s.tape.relu(h);
        let mut outs = Vec::with_capacity(4);
        for blocks in &self.stages {
            for b in blocks {
                h = b.forward(s, store, h)?;
            }
            outs.push(h);
        }
        Ok(outs)
    }
}

/// `Linear -> BN -> ReLU -> Linear` on `[D, N]` activations.
#[derive(Clone, Debug)]
pub struct Mlp {
    fc1: Linear,
    bn: BatchNorm,
    fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_in, hidden, false, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), hidden),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d_out, true, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(s, store, x)?;
        let h = self.bn.forward(s, store, h)?;
        let h = s.tape.relu(h);
        Ok(self.fc2.forward(s, store, h)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub backbone: BackboneConfig,
    pub proj_dim: usize,
    pub hidden_dim: usize,
    pub base_momentum: f64,
    pub normalization: Normalization,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            proj_dim: 32,
            hidden_dim: 128,
            base_momentum: 0.99,
            normalization: Normalization::SYNTHETIC,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Online,
    Target,
}

/// Instance-level embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding<T>(pub Vec<T>);

/// Online backbone, projector and predictor plus the momentum target.
///
/// The target store is a prefix of the online store (backbone and
/// projector), so the same layer handles address both.
#[derive(Clone, Debug)]
pub struct EncoderState<T: Scalar> {
    pub config: EncoderConfig,
    pub online: ParamStore<T>,
    pub target: ParamStore<T>,
    pub backbone: Backbone,
    pub projector: Mlp,
    pub predictor: Mlp,
    pub momentum: f64,
    pub step: u64,
}

pub const ENCODER_KIND: &str = "encoder";

impl<T: Scalar> EncoderState<T> {
    pub fn new(config: &EncoderConfig) -> Result<Self> {
        if config.proj_dim == 0 || config.hidden_dim == 0 {
            return Err(Error::Config("proj_dim and hidden_dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&config.base_momentum) {
            return Err(Error::Config(format!("base_momentum {} must be in [0, 1]", config.base_momentum)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut online = ParamStore::new();
        let backbone = Backbone::new(&mut online, &config.backbone, &mut rng)?;
        let last = config.backbone.stage_channels[3];
        let projector = Mlp::new(&mut online, "projector", last, config.hidden_dim, config.proj_dim, &mut rng);
        let shared = online.len();
        let predictor = Mlp::new(&mut online, "predictor", config.proj_dim, config.hidden_dim, config.proj_dim, &mut rng);
        let target = online.prefix(shared);
        Ok(Self {
            config: config.clone(),
            online,
            target,
            backbone,
            projector,
            predictor,
            momentum: config.base_momentum,
            step: 0,
        })
    }

    pub fn store(&self, branch: Branch) -> &ParamStore<T> {
        match branch {
            Branch::Online => &self.online,
            Branch::Target => &self.target,
        }
    }

    pub fn forward_stages(&self, s: &mut Session<T>, branch: Branch, x: Var) -> Result<Vec<Var>> {
        self.backbone.forward(s, self.store(branch), x)
    }

    /// Pooled last-stage features through the branch projector, and through
    /// the predictor too when `predict` (online branch only).
    pub fn embed(&self, s: &mut Session<T>, branch: Branch, x: Var, predict: bool) -> Result<Var> {
        if predict && branch == Branch::Target {
            return Err(Error::Invalid("the target branch has no predictor".into()));
        }
        let store = self.store(branch);
        let stages = self.backbone.forward(s, store, x)?;
        let pooled = s.tape.global_avg_pool(stages[3])?;
        let z = self.projector.forward(s, store, pooled)?;
        if predict {
            self.predictor.forward(s, store, z)
        } else {
            Ok(z)
        }
    }

    /// Inference-mode embeddings of a batch of images.
    pub fn embed_images(&self, branch: Branch, images: &[&Image], predict: bool) -> Result<Vec<Embedding<T>>> {
        let mut s = Session::new(false);
        s.freeze(self.store(branch));
        let x = s.input(images_to_batch(images, &self.config.normalization)?);
        let z = self.embed(&mut s, branch, x, predict)?;
        let z = s.value(z);
        let (d, n) = z.dims2()?;
        Ok((0..n).map(|i| Embedding((0..d).map(|k| z.data()[k * n + i]).collect())).collect())
    }

    /// Inference-mode stage maps of the online backbone, `batch` images at a time.
    pub fn stage_maps(&self, images: &[&Image], batch: usize) -> Result<Vec<Vec<FeatureMap<T>>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(batch.max(1)) {
            let mut s = Session::new(false);
            s.freeze(&self.online);
            let x = s.input(images_to_batch(chunk, &self.config.normalization)?);
            let source = (chunk[0].height(), chunk[0].width());
            let stages = self.forward_stages(&mut s, Branch::Online, x)?;
            let mut per_stage = Vec::with_capacity(4);
            for (v, r) in stages.into_iter().zip(STAGE_DOWNSCALES) {
                per_stage.push(FeatureMap::split_batch(s.value(v), r, source)?);
            }
            for i in 0..chunk.len() {
                out.push(per_stage.iter().map(|maps| maps[i].clone()).collect());
            }
        }
        Ok(out)
    }

    /// `t <- m t + (1 - m) o` on every target parameter (running
    /// statistics excluded), with the current momentum.
    pub fn ema_update(&mut self) {
        self.ema_update_with(self.momentum);
    }

    pub fn ema_update_with(&mut self, m: f64) {
        let m = T::of(m);
        let keep = T::one() - m;
        let ids: Vec<_> = self.target.ids().collect();
        for id in ids {
            if self.target.entry(id).kind.is_buffer() {
                continue;
            }
            let online = self.online.get(id).data();
            for (t, &o) in self.target.get_mut(id).data_mut().iter_mut().zip(online) {
                *t = m * *t + keep * o;
            }
        }
    }

    /// Momentum ramp `1 - (1 - m0) (cos(pi k / K) + 1) / 2`.
    pub fn momentum_at(&self, step: usize, total_steps: usize) -> f64 {
        let progress = step as f64 / total_steps.max(1) as f64;
        let m0 = self.config.base_momentum;
        1.0 - (1.0 - m0) * ((std::f64::consts::PI * progress.min(1.0)).cos() + 1.0) / 2.0
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint<T>> {
        let mut c = Checkpoint::new(ENCODER_KIND, &self.config, self.step)?;
        c.extra.insert("momentum".into(), self.momentum.into());
        c.push_store("online/", &self.online);
        c.push_store("target/", &self.target);
        Ok(c)
    }

    /// Returns the file's sha256.
    pub fn save_checkpoint(&self, path: &Path) -> Result<String> {
        self.to_checkpoint()?.save(path)
    }

    pub fn from_checkpoint(c: &Checkpoint<T>, path: &Path) -> Result<Self> {
        c.expect_kind(ENCODER_KIND, path)?;
        let mut state = Self::new(&c.config_as(path)?)?;
        state.restore(c, path)?;
        Ok(state)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, path)
    }

    /// Load parameters into this (already configured) state.
    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let c = Checkpoint::load(path)?;
        c.expect_kind(ENCODER_KIND, path)?;
        self.restore(&c, path)
    }

    fn restore(&mut self, c: &Checkpoint<T>, path: &Path) -> Result<()> {
        c.restore_store("online/", &mut self.online, path)?;
        c.restore_store("target/", &mut self.target, path)?;
        self.step = c.step;
        self.momentum = c.extra.get("momentum").and_then(|v| v.as_f64()).unwrap_or(self.config.base_momentum);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::generate_synthetic_face;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            backbone: BackboneConfig { stage_channels: vec![4, 6, 8, 10], stem_channels: 4, blocks_per_stage: 1, input_size: 32 },
            proj_dim: 6,
            hidden_dim: 12,
            ..Default::default()
        }
    }

    #[test]
    fn stage_shapes_for_desk_config() {
        let shapes = BackboneConfig::default().stage_shapes(96).unwrap();
        assert_eq!(shapes, vec![(16, 24), (32, 12), (64, 6), (128, 3)]);
        assert!(BackboneConfig::default().stage_shapes(80).is_err());
    }

    #[test]
    fn forward_shapes_match_config() {
        let enc = EncoderState::<f32>::new(&tiny()).unwrap();
        let img = generate_synthetic_face(0, 64).unwrap().image;
        let maps = enc.stage_maps(&[&img], 4).unwrap();
        let got: Vec<_> = maps[0].iter().map(|m| (m.channels(), m.height(), m.downscale)).collect();
        assert_eq!(got, vec![(4, 16, 4), (6, 8, 8), (8, 4, 16), (10, 2, 32)]);
    }

    #[test]
    fn rejects_non_square_input() {
        let enc = EncoderState::<f32>::new(&tiny()).unwrap();
        let img = Image::new(64, 32);
        assert!(enc.stage_maps(&[&img], 1).is_err());
    }

    #[test]
    fn zero_image_gives_finite_features() {
        let enc = EncoderState::<f32>::new(&tiny()).unwrap();
        let img = Image::new(32, 32);
        let maps = enc.stage_maps(&[&img], 1).unwrap();
        assert!(maps[0].iter().all(|m| m.data.all_finite()));
    }

    #[test]
    fn fresh_online_and_target_embeddings_agree() {
        let enc = EncoderState::<f32>::new(&tiny()).unwrap();
        let img = generate_synthetic_face(1, 32).unwrap().image;
        let a = enc.embed_images(Branch::Online, &[&img], false).unwrap();
        let b = enc.embed_images(Branch::Target, &[&img], false).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].0.len(), 6);
        assert!(enc.embed_images(Branch::Target, &[&img], true).is_err());
    }

    #[test]
    fn ema_boundaries_and_closed_form() {
        let mut enc = EncoderState::<f64>::new(&tiny()).unwrap();
        let id = enc.target.ids().next().unwrap();
        enc.target.get_mut(id).data_mut()[0] = 0.0;
        enc.online.get_mut(id).data_mut()[0] = 1.0;
        enc.ema_update_with(0.99);
        assert!((enc.target.get(id).data()[0] - 0.01).abs() < 1e-15);
        let before = enc.target.clone();
        enc.ema_update_with(1.0);
        assert!(enc.target.bitwise_eq(&before));
        enc.ema_update_with(0.0);
        let shared = enc.online.prefix(enc.target.len());
        for id in enc.target.ids().filter(|&i| !enc.target.entry(i).kind.is_buffer()) {
            assert_eq!(enc.target.get(id), shared.get(id));
        }
    }

    #[test]
    fn momentum_ramp_endpoints() {
        let enc = EncoderState::<f32>::new(&tiny()).unwrap();
        assert!((enc.momentum_at(0, 100) - 0.99).abs() < 1e-15);
        assert!((enc.momentum_at(100, 100) - 1.0).abs() < 1e-15);
    }
}
