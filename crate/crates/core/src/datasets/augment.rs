//! Two-view augmentation: random resized crops, flips, color jitter,
//! grayscale, blur and key-only solarization.
//!
//! Every geometric step is an affine map from source pixels to view pixels,
//! so each view is produced by a single resampling and the query-to-key
//! map is known exactly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ImageSample;
use crate::image::{Affine2, Image};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub crop_size: usize,
    pub resize_size: usize,
    pub crop_scale_range: (f64, f64),
    pub aspect_range: (f64, f64),
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
    pub solarize_prob_target_only: f64,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            crop_size: 64,
            resize_size: 72,
            crop_scale_range: (0.3, 1.0),
            aspect_range: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma: (0.1, 2.0),
            solarize_prob_target_only: 0.2,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// No randomness at all: both views are the full resized image.
    pub fn identity(crop_size: usize) -> Self {
        Self {
            crop_size,
            resize_size: crop_size,
            crop_scale_range: (1.0, 1.0),
            aspect_range: (1.0, 1.0),
            flip_prob: 0.0,
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            solarize_prob_target_only: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("flip_prob", self.flip_prob),
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
            ("solarize_prob_target_only", self.solarize_prob_target_only),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if self.crop_size == 0 || self.crop_size > self.resize_size {
            return Err(Error::Config(format!(
                "crop_size {} must be positive and at most resize_size {}",
                self.crop_size, self.resize_size
            )));
        }
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("crop_scale_range ({lo}, {hi}) must satisfy 0 < min <= max <= 1")));
        }
        let (lo, hi) = self.aspect_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("aspect_range ({lo}, {hi}) must satisfy 0 < min <= max")));
        }
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} strength {v} must be in [0, 1]")));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return Err(Error::Config(format!("hue strength {} must be in [0, 0.5]", self.hue)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub query_view: ImageSample,
    pub key_view: ImageSample,
    /// Query pixels to key pixels.
    pub geometry: Option<Affine2>,
    /// Source pixels to query pixels.
    pub query_from_source: Affine2,
    pub key_from_source: Affine2,
}

/// Source-to-resized map.
fn resize_map(width: usize, height: usize, size: usize) -> Affine2 {
    Affine2::scale(size as f64 / width as f64, size as f64 / height as f64)
}

/// A random resized crop of the `size x size` resized frame, optionally
/// mirrored, as a map from resized pixels to view pixels.
fn random_crop(cfg: &AugmentationConfig, rng: &mut impl Rng) -> Affine2 {
    let side = cfg.resize_size as f64;
    let area = side * side;
    let (log_lo, log_hi) = (cfg.aspect_range.0.ln(), cfg.aspect_range.1.ln());
    let mut window = None;
    for _ in 0..10 {
        let s = uniform(rng, cfg.crop_scale_range.0, cfg.crop_scale_range.1);
        let r = uniform(rng, log_lo, log_hi).exp();
        let w = (s * area * r).sqrt();
        let h = (s * area / r).sqrt();
        if w <= side && h <= side {
            let x0 = uniform(rng, 0.0, side - w);
            let y0 = uniform(rng, 0.0, side - h);
            window = Some((x0, y0, w, h));
            break;
        }
    }
    let (x0, y0, w, h) = window.unwrap_or((0.0, 0.0, side, side));
    let crop = cfg.crop_size as f64;
    let mut map = Affine2::scale(crop / w, crop / h).then_after(&Affine2::translation(-x0, -y0));
    if rng.random_bool(cfg.flip_prob) {
        map = Affine2 { a: -1.0, b: 0.0, c: 0.0, d: 1.0, tx: crop, ty: 0.0 }.then_after(&map);
    }
    map
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn photometric(img: &mut Image, cfg: &AugmentationConfig, rng: &mut impl Rng, key: bool) {
    if rng.random_bool(cfg.jitter_prob) {
        let b = uniform(rng, 1.0 - cfg.brightness, 1.0 + cfg.brightness) as f32;
        let c = uniform(rng, 1.0 - cfg.contrast, 1.0 + cfg.contrast) as f32;
        let s = uniform(rng, 1.0 - cfg.saturation, 1.0 + cfg.saturation) as f32;
        let h = uniform(rng, -cfg.hue, cfg.hue) as f32;
        img.brightness(b);
        img.contrast(c);
        img.saturation(s);
        img.hue(h);
    }
    if rng.random_bool(cfg.grayscale_prob) {
        img.grayscale();
    }
    if rng.random_bool(cfg.blur_prob) {
        // sigma range is specified for a 224 px crop
        let sigma = uniform(rng, cfg.blur_sigma.0, cfg.blur_sigma.1) * cfg.crop_size as f64 / 224.0;
        img.gaussian_blur(sigma as f32);
    }
    if key && rng.random_bool(cfg.solarize_prob_target_only) {
        img.solarize(0.5);
    }
}

fn render_view(sample: &ImageSample, view_from_source: &Affine2, size: usize) -> Image {
    let src_from_view = view_from_source.inverse().expect("crop maps are invertible");
    sample.image.warp(size, size, &src_from_view)
}

fn view_sample(sample: &ImageSample, image: Image, view_from_source: &Affine2) -> ImageSample {
    let (w, h) = (image.width(), image.height());
    ImageSample {
        landmarks: sample.landmarks.as_ref().map(|lm| lm.transformed(view_from_source, w, h)),
        image,
        identity_id: sample.identity_id,
        source_path: sample.source_path.clone(),
    }
}

/// Two independently augmented square views of one sample.
pub fn make_two_views(sample: &ImageSample, cfg: &AugmentationConfig, rng: &mut impl Rng) -> Result<ViewPair> {
    cfg.validate()?;
    let resize = resize_map(sample.width(), sample.height(), cfg.resize_size);
    let query_from_source = random_crop(cfg, rng).then_after(&resize);
    let key_from_source = random_crop(cfg, rng).then_after(&resize);

    let mut q = render_view(sample, &query_from_source, cfg.crop_size);
    photometric(&mut q, cfg, rng, false);
    let mut k = render_view(sample, &key_from_source, cfg.crop_size);
    photometric(&mut k, cfg, rng, true);

    let geometry = query_from_source.inverse().map(|src_from_q| key_from_source.then_after(&src_from_q));
    Ok(ViewPair {
        query_view: view_sample(sample, q, &query_from_source),
        key_view: view_sample(sample, k, &key_from_source),
        geometry,
        query_from_source,
        key_from_source,
    })
}

/// Source-to-view map of the deterministic evaluation view.
pub fn center_view_map(width: usize, height: usize, resize_size: usize, crop_size: usize) -> Affine2 {
    let off = (resize_size as f64 - crop_size as f64) / 2.0;
    Affine2::translation(-off, -off).then_after(&resize_map(width, height, resize_size))
}

/// Resize to `resize_size`, then take the central `crop_size` square.
pub fn center_view(sample: &ImageSample, resize_size: usize, crop_size: usize) -> Result<ImageSample> {
    if crop_size == 0 || crop_size > resize_size {
        return Err(Error::Config(format!("crop_size {crop_size} must be in 1..={resize_size}")));
    }
    let map = center_view_map(sample.width(), sample.height(), resize_size, crop_size);
    let img = render_view(sample, &map, crop_size);
    Ok(view_sample(sample, img, &map))
}

/// Shrink the content about the image center by `factor >= 1`, filling the
/// border by edge replication; landmarks follow `c + (p - c) / factor`.
pub fn zoom_out(sample: &ImageSample, factor: f64) -> Result<ImageSample> {
    if !(factor >= 1.0 && factor.is_finite()) {
        return Err(Error::Invalid(format!("zoom-out factor {factor} must be >= 1")));
    }
    let (w, h) = (sample.width(), sample.height());
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let map = Affine2::translation(cx, cy)
        .then_after(&Affine2::scale(1.0 / factor, 1.0 / factor))
        .then_after(&Affine2::translation(-cx, -cy));
    let img = if factor == 1.0 { sample.image.clone() } else { sample.image.warp(w, h, &map.inverse().unwrap()) };
    Ok(view_sample(sample, img, &map))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::generate_synthetic_face;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn face() -> ImageSample {
        generate_synthetic_face(3, 64).unwrap()
    }

    #[test]
    fn identity_config_gives_equal_views() {
        let cfg = AugmentationConfig::identity(64);
        let pair = make_two_views(&face(), &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(pair.query_view.image, pair.key_view.image);
        assert!(pair.geometry.unwrap().is_identity());
    }

    #[test]
    fn solarize_hits_key_only() {
        let cfg = AugmentationConfig { solarize_prob_target_only: 1.0, ..AugmentationConfig::identity(64) };
        let s = face();
        let pair = make_two_views(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(pair.query_view.image, s.image);
        let mut expected = s.image.clone();
        expected.solarize(0.5);
        assert_eq!(pair.key_view.image, expected);
    }

    #[test]
    fn same_rng_state_same_pair() {
        let cfg = AugmentationConfig { crop_size: 48, resize_size: 72, ..Default::default() };
        let a = make_two_views(&face(), &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = make_two_views(&face(), &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn small_images_are_upscaled() {
        let s = generate_synthetic_face(1, 32).unwrap();
        let cfg = AugmentationConfig { crop_size: 64, resize_size: 72, ..Default::default() };
        let pair = make_two_views(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(pair.query_view.width(), 64);
        assert_eq!(pair.key_view.height(), 64);
    }

    #[test]
    fn bad_probability_rejected() {
        let cfg = AugmentationConfig { flip_prob: 1.5, ..Default::default() };
        assert!(make_two_views(&face(), &cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn zoom_out_moves_landmarks_toward_center() {
        let s = face();
        let z = zoom_out(&s, 2.0).unwrap();
        let (p, q) = (s.landmarks.unwrap().points[0], z.landmarks.unwrap().points[0]);
        assert!((q.0 - (32.0 + (p.0 - 32.0) / 2.0)).abs() < 1e-12);
        assert_eq!(zoom_out(&face(), 1.0).unwrap(), face());
        assert!(zoom_out(&face(), 0.5).is_err());
    }

    #[test]
    fn center_view_without_resize_is_identity() {
        let s = face();
        assert_eq!(center_view(&s, 64, 64).unwrap(), s);
        assert_eq!(center_view(&s, 72, 64).unwrap().width(), 64);
    }
}
