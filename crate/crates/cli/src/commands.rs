use std::fs;
use std::path::{Path, PathBuf};

use landmark_core::checkpoint::file_sha256;
use landmark_core::datasets::{
    build_matching_pairs, center_view, derive_seed, load_dataset, materialize, read_pairs, synthetic_dataset,
    ImageSample, MatchingPair,
};
use landmark_core::encoder::EncoderState;
use landmark_core::eval::{
    self, eval_matching, fewshot_sweep, nmf_parts, pck, scale_sweep, write_fewshot_csv, write_matching_overlays,
    ProjectedExtractor, ScaleCurve, ScaleSweepConfig, Summary, PCK_THRESHOLD,
};
use landmark_core::hypercolumn::{heatmap_overlay, mark, match_point, pixel_to_cell, FeatureExtractor, HypercolumnExtractor};
use landmark_core::image::Image;
use landmark_core::landmark::{extract_features, train_regressor, FeatureCache, RegressorState};
use landmark_core::stage1::train_stage1;
use landmark_core::stage2::{train_stage2, DenseModelState, DENSE_DOWNSCALE};
use landmark_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::config::{FeatureSource, RunConfig};
use crate::RUN_ROOT_ENV;

pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

pub fn stage_dir(cfg: &RunConfig, stage: &str) -> PathBuf {
    run_root().join(&cfg.run_name).join(stage)
}

fn prepare_dir(cfg: &RunConfig, stage: &str) -> Result<PathBuf> {
    let dir = stage_dir(cfg, stage);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    cfg.dump(&dir.join("config.toml"))?;
    Ok(dir)
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v).expect("json") + "\n").map_err(|e| Error::io(path, e))
}

/// Training and validation samples at the encoder input size, plus
/// matching pairs into the validation list.
pub struct Data {
    pub train: Vec<ImageSample>,
    pub val: Vec<ImageSample>,
    pub pairs: Vec<MatchingPair>,
}

fn to_input_size(s: ImageSample, size: usize) -> Result<ImageSample> {
    if s.width() == size && s.height() == size {
        Ok(s)
    } else {
        center_view(&s, size, size)
    }
}

pub fn load_data(cfg: &RunConfig) -> Result<Data> {
    let d = &cfg.dataset;
    let size = cfg.encoder.backbone.input_size;
    let (train, val, listed) = match &d.root {
        None => {
            if d.canvas != size {
                return Err(Error::Config(format!("dataset.canvas {} differs from encoder input_size {size}", d.canvas)));
            }
            let train = synthetic_dataset(d.synthetic_count, d.canvas, cfg.seed, d.renders_per_identity)?;
            let val_seed = derive_seed(cfg.seed, 0x7A1, 0);
            let val = synthetic_dataset(d.synthetic_val_count, d.canvas, val_seed, d.renders_per_identity)?;
            (train, val, None)
        }
        Some(root) => {
            let csv = root.join("landmarks.csv");
            let reader = load_dataset(root, csv.is_file().then_some(csv.as_path()), d.eye_indices)?;
            let all = reader.load_all()?.into_iter().map(|s| to_input_size(s, size)).collect::<Result<Vec<_>>>()?;
            if d.val_count >= all.len() {
                return Err(Error::Config(format!("val_count {} leaves no training images of {}", d.val_count, all.len())));
            }
            let cut = all.len() - d.val_count;
            let pairs_file = root.join("pairs.txt");
            let listed = if pairs_file.is_file() {
                let mut out = Vec::new();
                for p in read_pairs(&pairs_file)? {
                    let idx = |f: &str| {
                        reader
                            .index_of(f)
                            .filter(|&i| i >= cut)
                            .map(|i| i - cut)
                    };
                    if let (Some(reference), Some(query)) = (idx(&p.reference), idx(&p.query)) {
                        out.push(MatchingPair { reference, query, same_identity: p.same_identity });
                    }
                }
                Some(out)
            } else {
                None
            };
            let mut train = all;
            let val = train.split_off(cut);
            (train, val, listed)
        }
    };
    let pairs = match listed {
        Some(p) => p,
        None if val.iter().any(|s| s.landmarks.is_some()) => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xFA1, 0));
            build_matching_pairs(&val, cfg.eval.n_same, cfg.eval.n_diff, &mut rng)?
        }
        None => Vec::new(),
    };
    Ok(Data { train, val, pairs })
}

pub fn cmd_synth(
    out: &Path,
    n: usize,
    canvas: usize,
    seed: u64,
    renders_per_identity: usize,
    n_same: usize,
    n_diff: usize,
) -> Result<Value> {
    if n == 0 {
        return Err(Error::Config("n must be at least 1".into()));
    }
    let samples = synthetic_dataset(n, canvas, seed, renders_per_identity)?;
    let pairs = if n_same + n_diff > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xFA1, 0));
        Some(build_matching_pairs(&samples, n_same, n_diff, &mut rng)?)
    } else {
        None
    };
    materialize(&samples, out, pairs.as_deref())?;
    Ok(json!({ "command": "synth", "images": n, "pairs": pairs.map_or(0, |p| p.len()), "out": out }))
}

fn encoder_path(cfg: &RunConfig) -> PathBuf {
    stage_dir(cfg, "stage1").join("encoder.ckpt")
}

fn dense_path(cfg: &RunConfig) -> PathBuf {
    stage_dir(cfg, "stage2").join("dense.ckpt")
}

fn regressor_path(cfg: &RunConfig) -> PathBuf {
    stage_dir(cfg, "regress").join("regressor.ckpt")
}

pub fn cmd_stage1(cfg: &RunConfig) -> Result<Value> {
    let data = load_data(cfg)?;
    let dir = prepare_dir(cfg, "stage1")?;
    let mut enc = EncoderState::<f32>::new(&cfg.encoder)?;
    let report = train_stage1(&data.train, &mut enc, &cfg.stage1, Some(&dir))?;
    Ok(json!({
        "command": "stage1",
        "checkpoint": report.checkpoint,
        "checkpoint_hash": report.checkpoint_hash,
        "first_epoch_loss": report.epoch_means.first(),
        "final_epoch_loss": report.epoch_means.last(),
    }))
}

pub fn cmd_stage2(cfg: &RunConfig) -> Result<Value> {
    let path = encoder_path(cfg);
    let enc = EncoderState::<f32>::load_checkpoint(&path)?;
    let data = load_data(cfg)?;
    let dir = prepare_dir(cfg, "stage2")?;
    let mut model = DenseModelState::new(&enc, &cfg.dense)?;
    model.stage1_hash = Some(file_sha256(&path)?);
    let report = train_stage2(&data.train, &mut model, &cfg.stage2, Some(&dir))?;
    Ok(json!({
        "command": "stage2",
        "checkpoint": report.checkpoint,
        "checkpoint_hash": report.checkpoint_hash,
        "first_epoch_loss": report.epoch_means.first(),
        "final_epoch_loss": report.epoch_means.last(),
    }))
}

/// The configured feature extractor and the hash of the checkpoint behind it.
pub fn extractor(cfg: &RunConfig, source: FeatureSource) -> Result<(Box<dyn FeatureExtractor>, String)> {
    match source {
        FeatureSource::Dense => {
            let path = dense_path(cfg);
            let model = DenseModelState::<f32>::load_checkpoint(&path)?;
            let hash = model.fingerprint.clone();
            Ok((Box::new(model), hash))
        }
        FeatureSource::Hypercolumn => {
            let path = encoder_path(cfg);
            let encoder = EncoderState::<f32>::load_checkpoint(&path)?;
            let hash = file_sha256(&path)?;
            let e = HypercolumnExtractor { encoder, downscale: DENSE_DOWNSCALE, batch: 32, fingerprint: format!("hc-{hash}") };
            Ok((Box::new(e), hash))
        }
        FeatureSource::Random => {
            let model = DenseModelState::<f32>::new(&EncoderState::new(&cfg.encoder)?, &cfg.dense)?;
            let hash = model.fingerprint.clone();
            Ok((Box::new(model), hash))
        }
    }
}

fn cache(cfg: &RunConfig) -> Result<FeatureCache> {
    FeatureCache::new(&run_root().join(&cfg.run_name).join("cache"))
}

pub fn cmd_regress(cfg: &RunConfig) -> Result<Value> {
    let (ext, hash) = extractor(cfg, cfg.eval.features)?;
    let data = load_data(cfg)?;
    let dir = prepare_dir(cfg, "regress")?;
    let (reg, summary) =
        train_regressor(&ext, &data.train, &data.val, cfg.eval.n_annotations, &cfg.regressor, Some(&cache(cfg)?))?;
    let reg_hash = reg.save_checkpoint(&dir.join("regressor.ckpt"))?;
    write_json(&dir.join("summary.json"), &json!({ "features": hash, "regressor": reg_hash, "result": summary }))?;
    Ok(json!({
        "command": "regress",
        "checkpoint_hash": reg_hash,
        "features_hash": hash,
        "n_annotations": summary.n_annotations,
        "val_iod": summary.val_iod,
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Protocol {
    Matching,
    Regression,
    Fewshot,
    Scale,
    Nmf,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Matching => "matching",
            Protocol::Regression => "regression",
            Protocol::Fewshot => "fewshot",
            Protocol::Scale => "scale",
            Protocol::Nmf => "nmf",
        }
    }
}

fn annotated(samples: &[ImageSample]) -> Result<Vec<&landmark_core::datasets::LandmarkSet>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| s.landmarks.as_ref().ok_or_else(|| Error::Invalid(format!("validation sample {i} is not annotated"))))
        .collect()
}

pub fn cmd_eval(cfg: &RunConfig, protocol: Protocol) -> Result<Value> {
    let data = load_data(cfg)?;
    let dir = prepare_dir(cfg, &format!("eval/{}", protocol.name()))?;
    let summary = match protocol {
        Protocol::Matching => {
            let (ext, hash) = extractor(cfg, cfg.eval.features)?;
            if data.pairs.is_empty() {
                return Err(Error::Invalid("no matching pairs available".into()));
            }
            let report = eval_matching(&ext, &data.val, &data.pairs)?;
            report.write_csv(&dir.join("matching.csv"))?;
            write_matching_overlays(&ext, &data.val, &data.pairs, &dir.join("overlays"), cfg.eval.overlays)?;
            write_json(
                &dir.join("report.json"),
                &json!({ "same_identity_err": report.same_identity_err, "diff_identity_err": report.diff_identity_err,
                         "n_same": report.n_same, "n_diff": report.n_diff }),
            )?;
            Summary::new("matching", &hash, "diff_identity_err", report.diff_identity_err)
        }
        Protocol::Regression => {
            let (ext, _) = extractor(cfg, cfg.eval.features)?;
            let path = regressor_path(cfg);
            let reg = RegressorState::<f32>::load_checkpoint(&path)?;
            let feats = extract_features(&ext, &data.val, Some(&cache(cfg)?))?;
            let preds = reg.predict(&feats.iter().collect::<Vec<_>>())?;
            let gts = annotated(&data.val)?;
            let mut rows = String::from("index,iod\n");
            for (i, (p, g)) in preds.iter().zip(&gts).enumerate() {
                rows += &format!("{i},{}\n", eval::iod_error(p, g)?);
            }
            let csv = dir.join("regression.csv");
            fs::write(&csv, rows).map_err(|e| Error::io(&csv, e))?;
            let iod = eval::mean_iod(&preds, &gts)?;
            let sizes: Vec<_> = data.val.iter().map(|s| (s.height(), s.width())).collect();
            let pck = pck(&preds, &gts, &sizes, PCK_THRESHOLD)?;
            write_json(&dir.join("report.json"), &json!({ "iod": iod, "pck": pck }))?;
            Summary::new("regression", &file_sha256(&path)?, "iod", iod)
        }
        Protocol::Fewshot => {
            let (ext, hash) = extractor(cfg, cfg.eval.features)?;
            let r = fewshot_sweep(
                &ext,
                &data.train,
                &data.val,
                &cfg.eval.fewshot_counts,
                &cfg.eval.fewshot_seeds,
                &cfg.regressor,
                Some(&cache(cfg)?),
            )?;
            write_fewshot_csv(&r, &format!("{:?}", cfg.eval.features).to_lowercase(), &dir)?;
            let last = r.rows.last().expect("non-empty counts");
            Summary::new("fewshot", &hash, &format!("iod@{}", last.count), last.mean)
        }
        Protocol::Scale => {
            let (ext, hash) = extractor(cfg, cfg.eval.features)?;
            let c = cache(cfg)?;
            let jitter = scale_sweep(&ext, &data.train, &data.val, &cfg.eval.scale, &cfg.regressor, Some(&c))?;
            let fixed = ScaleSweepConfig { train_zoom_range: (1.0, 1.0), ..cfg.eval.scale.clone() };
            let plain = scale_sweep(&ext, &data.train, &data.val, &fixed, &cfg.regressor, Some(&c))?;
            jitter.write_csv(&dir.join("scale_jitter.csv"))?;
            plain.write_csv(&dir.join("scale_no_jitter.csv"))?;
            ScaleCurve::write_plot(&[("jitter", &jitter), ("no-jitter", &plain)], &dir.join("scale.png"))?;
            let (z, v) = *jitter.rows.last().expect("non-empty grid");
            Summary::new("scale", &hash, &format!("iod@{z}"), v)
        }
        Protocol::Nmf => {
            let (ext, hash) = extractor(cfg, cfg.eval.features)?;
            let n = cfg.eval.nmf_images.min(data.val.len());
            let maps = extract_features(&ext, &data.val[..n], None)?;
            let parts = nmf_parts(&maps, cfg.eval.nmf_rank, &cfg.eval.nmf)?;
            let mut rows = String::from("update,error\n");
            for (i, e) in parts.errors.iter().enumerate() {
                rows += &format!("{i},{e}\n");
            }
            let csv = dir.join("nmf_errors.csv");
            fs::write(&csv, rows).map_err(|e| Error::io(&csv, e))?;
            let part_dir = dir.join("parts");
            fs::create_dir_all(&part_dir).map_err(|e| Error::io(&part_dir, e))?;
            for (i, (s, h)) in data.val[..n].iter().zip(&parts.heatmaps).enumerate() {
                part_overlay(&s.image, h.data(), parts.rank, maps[i].height(), maps[i].width())
                    .save_png(&part_dir.join(format!("parts_{i:04}.png")))?;
            }
            let norm: f64 = maps
                .iter()
                .flat_map(|m| m.data.data().iter())
                .map(|&v| (v as f64 + parts.shift).max(0.0).powi(2))
                .sum::<f64>()
                .sqrt();
            let rel = parts.errors.last().copied().unwrap_or(f64::NAN) / norm.max(1e-12);
            let mut extra = json!({ "relative_error": rel, "shift": parts.shift, "updates": parts.errors.len() - 1 });
            if !data.pairs.is_empty() {
                let projected = ProjectedExtractor { inner: ext, parts };
                let report = eval_matching(&projected, &data.val, &data.pairs)?;
                report.write_csv(&dir.join("matching_nmf.csv"))?;
                extra["nmf_same_identity_err"] = json!(report.same_identity_err);
                extra["nmf_diff_identity_err"] = json!(report.diff_identity_err);
            }
            write_json(&dir.join("report.json"), &extra)?;
            Summary::new("nmf", &hash, "relative_reconstruction_error", rel)
        }
    };
    summary.write(&dir.join("summary.json"))?;
    Ok(serde_json::to_value(&summary).expect("summary serializes"))
}

const PART_COLORS: [[f32; 3]; 8] = [
    [0.9, 0.1, 0.1],
    [0.1, 0.7, 0.1],
    [0.1, 0.3, 0.9],
    [0.9, 0.8, 0.1],
    [0.8, 0.1, 0.8],
    [0.1, 0.8, 0.8],
    [1.0, 0.5, 0.0],
    [0.5, 0.3, 0.1],
];

/// Each pixel tinted by its strongest part.
fn part_overlay(img: &Image, heat: &[f32], rank: usize, h: usize, w: usize) -> Image {
    Image::from_fn(img.width(), img.height(), |x, y| {
        let (gx, gy) = ((x * w / img.width()).min(w - 1), (y * h / img.height()).min(h - 1));
        let k = (0..rank)
            .max_by(|&a, &b| heat[a * h * w + gy * w + gx].total_cmp(&heat[b * h * w + gy * w + gx]))
            .unwrap_or(0);
        let c = PART_COLORS[k % PART_COLORS.len()];
        let p = img.get(x, y);
        [0, 1, 2].map(|i| 0.5 * p[i] + 0.5 * c[i])
    })
}

/// Similarity heatmap of one reference point over the query image.
pub fn cmd_match_viz(reference: &Path, query: &Path, point: (f64, f64), checkpoint: &Path, out: &Path) -> Result<Value> {
    let ext: Box<dyn FeatureExtractor> = match DenseModelState::<f32>::load_checkpoint(checkpoint) {
        Ok(m) => Box::new(m),
        Err(Error::Checkpoint { .. }) => {
            let encoder = EncoderState::<f32>::load_checkpoint(checkpoint)?;
            let fp = file_sha256(checkpoint)?;
            Box::new(HypercolumnExtractor { encoder, downscale: DENSE_DOWNSCALE, batch: 2, fingerprint: fp })
        }
        Err(e) => return Err(e),
    };
    let (r, q) = (Image::load(reference)?, Image::load(query)?);
    if !(point.0 >= 0.0 && point.1 >= 0.0 && point.0 < r.width() as f64 && point.1 < r.height() as f64) {
        return Err(Error::Invalid(format!("point {point:?} outside the {}x{} reference image", r.width(), r.height())));
    }
    if r.width() != q.width() || r.height() != q.height() {
        return Err(Error::Invalid("reference and query images differ in size".into()));
    }
    let maps = ext.extract(&[&r, &q])?;
    let uv = pixel_to_cell(point, maps[0].downscale, maps[0].width(), maps[0].height());
    let (dist, hit) = match_point(&maps[0], uv, &maps[1], 0.05)?;
    let mut img = heatmap_overlay(&q, &dist, 0.5)?;
    mark(&mut img, hit, [1.0, 1.0, 1.0]);
    img.save_png(out)?;
    Ok(json!({ "command": "match-viz", "out": out, "match": [hit.0, hit.1], "peak_mass": dist.get(dist.argmax().0, dist.argmax().1) }))
}
