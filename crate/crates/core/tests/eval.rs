use landmark_core::datasets::{synthetic_dataset, ImageSample, LandmarkSet, MatchingPair};
use landmark_core::encoder::FeatureMap;
use landmark_core::eval::{
    eval_matching, fewshot_sweep, iod_error, nmf, pck, write_fewshot_csv, NmfConfig, ScaleSweepConfig, Summary,
};
use landmark_core::hypercolumn::FeatureExtractor;
use landmark_core::image::Image;
use landmark_core::landmark::RegressorConfig;
use landmark_core::tensor::Tensor;
use landmark_core::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 4x4 average-pooled colour plus normalized cell position.
struct PooledPixels;

impl FeatureExtractor for PooledPixels {
    fn extract(&self, images: &[&Image]) -> Result<Vec<FeatureMap<f32>>> {
        images
            .iter()
            .map(|img| {
                let (h, w) = (img.height() / 4, img.width() / 4);
                let t = Tensor::from_fn(&[5, h, w], |i| {
                    let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
                    match c {
                        3 => x as f32 / w as f32,
                        4 => y as f32 / h as f32,
                        _ => {
                            let mut s = 0.0;
                            for dy in 0..4 {
                                for dx in 0..4 {
                                    s += img.get(x * 4 + dx, y * 4 + dy)[c];
                                }
                            }
                            s / 16.0
                        }
                    }
                });
                FeatureMap::new(t, 4, (img.height(), img.width()))
            })
            .collect()
    }

    fn downscale(&self) -> usize {
        4
    }

    fn fingerprint(&self) -> String {
        "pooled-pixels".into()
    }
}

fn landmarks(points: Vec<(f64, f64)>) -> LandmarkSet {
    LandmarkSet::new(points, Some((0, 1))).unwrap()
}

proptest! {
    #[test]
    fn iod_error_ignores_similarity_transforms(
        pts in proptest::collection::vec((0.0f64..50.0, 0.0f64..50.0), 10),
        s in 0.2f64..5.0,
        tx in -20.0f64..20.0,
        ty in -20.0f64..20.0,
    ) {
        let gt: Vec<_> = pts[..5].to_vec();
        let pred: Vec<_> = pts[5..].to_vec();
        prop_assume!((gt[0].0 - gt[1].0).hypot(gt[0].1 - gt[1].1) > 1e-3);
        let f = |p: &(f64, f64)| (p.0 * s + tx, p.1 * s + ty);
        let e0 = iod_error(&landmarks(pred.clone()), &landmarks(gt.clone())).unwrap();
        let e1 = iod_error(&landmarks(pred.iter().map(f).collect()), &landmarks(gt.iter().map(f).collect())).unwrap();
        prop_assert!((e0 - e1).abs() <= 1e-9 * e0.max(1.0));
    }

    #[test]
    fn pck_is_a_percentage(pts in proptest::collection::vec((0.0f64..99.0, 0.0f64..49.0), 10)) {
        let gt = landmarks(pts[..5].to_vec());
        let pred = landmarks(pts[5..].to_vec());
        let v = pck(&[pred], &[&gt], &[(50, 100)], 0.05).unwrap();
        prop_assert!((0.0..=100.0).contains(&v));
    }
}

#[test]
fn self_pairs_match_within_half_a_cell() {
    let data = synthetic_dataset(6, 64, 0, 2).unwrap();
    let pairs: Vec<MatchingPair> =
        (0..data.len()).map(|i| MatchingPair { reference: i, query: i, same_identity: true }).collect();
    let report = eval_matching(&PooledPixels, &data, &pairs).unwrap();
    for (r, s) in report.records.iter().zip(&data) {
        let iod = s.landmarks.as_ref().unwrap().inter_ocular().unwrap();
        assert!(r.error <= 100.0 * 8f64.sqrt() / iod, "{} vs bound {}", r.error, 100.0 * 8f64.sqrt() / iod);
    }
    assert_eq!(report.n_same, data.len());
    assert!(report.diff_identity_err.is_nan());
}

/// Upscaling both images leaves errors in IOD units unchanged.
#[test]
fn matching_error_is_resolution_free() {
    let data = synthetic_dataset(4, 64, 1, 2).unwrap();
    let up: Vec<ImageSample> = data
        .iter()
        .map(|s| {
            let mut t = s.clone();
            t.image = Image::from_fn(128, 128, |x, y| s.image.get(x / 2, y / 2));
            let lm = s.landmarks.as_ref().unwrap();
            t.landmarks = Some(lm.transformed(&landmark_core::image::Affine2::scale(2.0, 2.0), 128, 128));
            t
        })
        .collect();
    /// `r x r` block means on a 16x16 grid.
    struct Blocks(usize);
    impl FeatureExtractor for Blocks {
        fn extract(&self, images: &[&Image]) -> Result<Vec<FeatureMap<f32>>> {
            let r = self.0;
            images
                .iter()
                .map(|img| {
                    let t = Tensor::from_fn(&[3, 16, 16], |i| {
                        let (c, y, x) = (i / 256, (i / 16) % 16, i % 16);
                        let mut s = 0.0f64;
                        for dy in 0..r {
                            for dx in 0..r {
                                s += img.get(x * r + dx, y * r + dy)[c] as f64;
                            }
                        }
                        (s / (r * r) as f64) as f32
                    });
                    FeatureMap::new(t, r, (img.height(), img.width()))
                })
                .collect()
        }
        fn downscale(&self) -> usize {
            self.0
        }
        fn fingerprint(&self) -> String {
            format!("blocks-{}", self.0)
        }
    }
    let pairs = vec![
        MatchingPair { reference: 0, query: 1, same_identity: true },
        MatchingPair { reference: 1, query: 2, same_identity: false },
        MatchingPair { reference: 3, query: 2, same_identity: true },
    ];
    let a = eval_matching(&Blocks(4), &data, &pairs).unwrap();
    let b = eval_matching(&Blocks(8), &up, &pairs).unwrap();
    for (x, y) in a.records.iter().zip(&b.records) {
        assert!((x.error - y.error).abs() < 1e-9, "{} vs {}", x.error, y.error);
    }
}

#[test]
fn nmf_recovers_an_exact_rank_two_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, m) = (30, 12);
    let w: Vec<f64> = (0..n * 2).map(|_| rng.random_range(0.1..1.0)).collect();
    let h: Vec<f64> = (0..2 * m).map(|_| rng.random_range(0.1..1.0)).collect();
    let v: Vec<f64> = (0..n * m).map(|i| (0..2).map(|k| w[(i / m) * 2 + k] * h[k * m + i % m]).sum()).collect();
    let out = nmf(&v, n, m, 2, &NmfConfig { max_iter: 500, tol: 0.0, seed: 0 }).unwrap();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut err = 0.0;
    for i in 0..n {
        for j in 0..m {
            let r: f64 = (0..2).map(|k| out.w[i * 2 + k] * out.h[k * m + j]).sum();
            err += (v[i * m + j] - r).powi(2);
        }
    }
    assert!(err.sqrt() / norm <= 1e-3, "relative error {}", err.sqrt() / norm);
}

#[test]
fn fewshot_sweep_writes_both_tables() {
    let train = synthetic_dataset(12, 64, 2, 2).unwrap();
    let val = synthetic_dataset(6, 64, 3, 2).unwrap();
    let cfg = RegressorConfig { max_steps: 20, eval_every: 5, ..Default::default() };
    let res = fewshot_sweep(&PooledPixels, &train, &val, &[1, 4], &[0, 1], &cfg, None).unwrap();
    assert_eq!(res.runs.len(), 4);
    assert!(res.rows.iter().all(|r| r.n_seeds == 2 && !r.single_seed && r.mean.is_finite()));
    let dir = tempfile::tempdir().unwrap();
    write_fewshot_csv(&res, "pooled", dir.path()).unwrap();
    let wide = std::fs::read_to_string(dir.path().join("fewshot.csv")).unwrap();
    assert!(wide.contains('±'));
    let long = std::fs::read_to_string(dir.path().join("fewshot_runs.csv")).unwrap();
    assert_eq!(long.lines().count(), 5);
}

#[test]
fn scale_config_rejects_out_of_range_zooms() {
    let bad = ScaleSweepConfig { eval_zoom_grid: vec![1.0, 2.5], ..Default::default() };
    assert!(bad.validate().is_err());
    let bad = ScaleSweepConfig { train_zoom_range: (0.5, 1.5), ..Default::default() };
    assert!(bad.validate().is_err());
    assert!(ScaleSweepConfig::default().validate().is_ok());
}

#[test]
fn summary_serializes_all_fields() {
    let dir = tempfile::tempdir().unwrap();
    let s = Summary::new("matching", "abc", "iod", 1.5);
    let path = dir.path().join("summary.json");
    s.write(&path).unwrap();
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(v["protocol"], "matching");
    assert_eq!(v["value"], 1.5);
}
